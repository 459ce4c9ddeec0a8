use std::fs;

use proptest::prelude::*;
use sha2::{Digest, Sha256};

use lesionseg::volume_io::{
    payload_path, read_annotations, read_label_raster, read_mask, read_volume, write_annotations,
    write_label_raster, write_mask, write_volume, Mask, RecistAnnotation, Volume, VoxelData,
};

fn sha(path: &std::path::Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

#[test]
fn volume_payload_is_stable_across_rewrites() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<i16> = (0..7 * 5 * 3).map(|i| (i * 37 % 2001 - 1000) as i16).collect();
    let v = Volume::new([7, 5, 3], [0.7, 0.7, 2.5], VoxelData::Int16(data)).unwrap();
    let a = dir.path().join("a.vol.json");
    let b = dir.path().join("b.vol.json");
    write_volume(&v, &a).unwrap();
    let back = read_volume(&a).unwrap();
    assert_eq!(back, v);
    write_volume(&back, &b).unwrap();
    assert_eq!(sha(&payload_path(&a)), sha(&payload_path(&b)));
    assert_eq!(fs::read_to_string(&a).unwrap(), fs::read_to_string(&b).unwrap());
    // little-endian, z-major
    let raw = fs::read(payload_path(&a)).unwrap();
    assert_eq!(raw.len(), 7 * 5 * 3 * 2);
    assert_eq!(i16::from_le_bytes([raw[2], raw[3]]), v.value(1, 0, 0) as i16);
}

#[test]
fn header_is_plain_json() {
    let dir = tempfile::tempdir().unwrap();
    let v = Volume::new([2, 2, 1], [1.0, 1.0, 1.0], VoxelData::Float32(vec![0.0, 0.25, 0.5, 1.0])).unwrap();
    let p = dir.path().join("f.vol.json");
    write_volume(&v, &p).unwrap();
    let h: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(h["dims"], serde_json::json!([2, 2, 1]));
    assert_eq!(h["order"], "zyx");
    assert_eq!(h["dtype"], "float32");
}

#[test]
fn label_raster_keeps_ignore_value() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.vol.json");
    let data = vec![0, 1, 255, 1, 0, 255];
    write_label_raster([3, 2, 1], [1.0; 3], &data, &p).unwrap();
    let (h, back) = read_label_raster(&p).unwrap();
    assert_eq!(h.dims, [3, 2, 1]);
    assert_eq!(back, data);
}

fn arb_annotation() -> impl Strategy<Value = RecistAnnotation> {
    (0usize..40, prop::array::uniform4(-50.0f64..50.0), prop::array::uniform4(-50.0f64..50.0), "[a-z0-9]{0,8}").prop_map(
        |(z, l, s, id)| RecistAnnotation {
            slice_index: z,
            long_axis: [[l[0], l[1]], [l[2], l[3]]],
            short_axis: [[s[0], s[1]], [s[2], s[3]]],
            window: [-160.0, 240.0],
            lesion_id: id.clone(),
            patient_id: format!("p{id}"),
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn volumes_round_trip(
        (dims, data) in (1usize..6, 1usize..6, 1usize..4).prop_flat_map(|(x, y, z)| {
            (Just([x, y, z]), prop::collection::vec(any::<i16>(), x * y * z))
        }),
        sx in 0.1f64..5.0,
        sz in 0.1f64..5.0,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vol.json");
        let v = Volume::new(dims, [sx, sx, sz], VoxelData::Int16(data)).unwrap();
        write_volume(&v, &p).unwrap();
        prop_assert_eq!(read_volume(&p).unwrap(), v);
    }

    #[test]
    fn float_volumes_round_trip(data in prop::collection::vec(-1e6f32..1e6, 12)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vol.json");
        let v = Volume::new([3, 2, 2], [0.5, 0.5, 1.25], VoxelData::Float32(data)).unwrap();
        write_volume(&v, &p).unwrap();
        prop_assert_eq!(read_volume(&p).unwrap(), v);
    }

    #[test]
    fn masks_round_trip(bits in prop::collection::vec(any::<bool>(), 4 * 3 * 2)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.vol.json");
        let m = Mask::new([4, 3, 2], [1.0, 1.0, 2.0], bits.iter().map(|&b| b as u8).collect()).unwrap();
        write_mask(&m, &p).unwrap();
        prop_assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn annotations_round_trip(anns in prop::collection::vec(arb_annotation(), 0..4)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        write_annotations(&anns, &p).unwrap();
        prop_assert_eq!(read_annotations(&p).unwrap(), anns);
    }
}
