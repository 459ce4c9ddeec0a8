//! Raster primitives shared by the trimap, metrics and phantom code: line
//! rasterization, binary dilation, connected components and exact Euclidean
//! distance transforms.

use std::collections::VecDeque;

use crate::grid::Grid;

/// Bresenham line between two subpixel endpoints, each rounded to the nearest
/// pixel center first. Both endpoints are included.
pub fn line_pixels(p0: [f64; 2], p1: [f64; 2]) -> Vec<(i64, i64)> {
    let (mut x0, mut y0) = (p0[0].round() as i64, p0[1].round() as i64);
    let (x1, y1) = (p1[0].round() as i64, p1[1].round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx.max(-dy) + 1) as usize);
    loop {
        out.push((x0, y0));
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
    out
}

/// One step of binary dilation with the 3x3 (8-connected) structuring element.
pub fn dilate(mask: &Grid<bool>) -> Grid<bool> {
    let (w, h) = mask.dims();
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            if !*mask.get(x, y) {
                continue;
            }
            for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    out.set(nx, ny, true);
                }
            }
        }
    }
    out
}

/// Dilate repeatedly until at least `target` pixels are set. Stops early when
/// the mask fills the grid or is empty.
pub fn dilate_to_area(seed: &Grid<bool>, target: usize) -> Grid<bool> {
    let mut mask = seed.clone();
    let mut area = mask.count();
    while area < target && area > 0 && area < mask.len() {
        mask = dilate(&mask);
        area = mask.count();
    }
    mask
}

/// 8-connected component labelling. Returns a label grid where 0 marks pixels
/// outside the mask and components are numbered from 1 in raster-scan order
/// of their first pixel, plus the number of components.
pub fn connected_components(mask: &Grid<bool>) -> (Grid<u32>, usize) {
    let (w, h) = mask.dims();
    let mut labels = Grid::filled(w, h, 0u32);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !*mask.get(x, y) || *labels.get(x, y) != 0 {
                continue;
            }
            next += 1;
            labels.set(x, y, next);
            queue.push_back((x, y));
            while let Some((cx, cy)) = queue.pop_front() {
                for ny in cy.saturating_sub(1)..(cy + 2).min(h) {
                    for nx in cx.saturating_sub(1)..(cx + 2).min(w) {
                        if *mask.get(nx, ny) && *labels.get(nx, ny) == 0 {
                            labels.set(nx, ny, next);
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Squared Euclidean distance from every pixel to the nearest set pixel, in
/// pixel units. Pixels of an empty set get `f64::INFINITY`.
pub fn distance_sq_2d(set: &Grid<bool>) -> Grid<f64> {
    let (w, h) = set.dims();
    let d = distance_sq_3d(set.as_slice(), [w, h, 1], [1.0, 1.0, 1.0]);
    Grid::from_vec(w, h, d).expect("distance transform preserves shape")
}

/// Exact squared Euclidean distance transform of a z-major 3D set with
/// anisotropic spacing (Felzenszwalb-Huttenlocher lower envelope, one pass per
/// axis). Distances are physical; empty sets give `f64::INFINITY`.
pub fn distance_sq_3d(set: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    assert_eq!(set.len(), nx * ny * nz, "set length must match dims");
    let mut f: Vec<f64> = set
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let mut line = Vec::new();
    let mut out = Vec::new();
    // axis 0 (x), stride 1
    for z in 0..nz {
        for y in 0..ny {
            let base = (z * ny + y) * nx;
            line.clear();
            line.extend_from_slice(&f[base..base + nx]);
            envelope_1d(&line, spacing[0], &mut out);
            f[base..base + nx].copy_from_slice(&out);
        }
    }
    // axis 1 (y), stride nx
    if ny > 1 {
        for z in 0..nz {
            for x in 0..nx {
                line.clear();
                line.extend((0..ny).map(|y| f[(z * ny + y) * nx + x]));
                envelope_1d(&line, spacing[1], &mut out);
                for (y, v) in out.iter().enumerate() {
                    f[(z * ny + y) * nx + x] = *v;
                }
            }
        }
    }
    // axis 2 (z), stride nx*ny
    if nz > 1 {
        for y in 0..ny {
            for x in 0..nx {
                line.clear();
                line.extend((0..nz).map(|z| f[(z * ny + y) * nx + x]));
                envelope_1d(&line, spacing[2], &mut out);
                for (z, v) in out.iter().enumerate() {
                    f[(z * ny + y) * nx + x] = *v;
                }
            }
        }
    }
    f
}

/// 1D squared distance transform: out[q] = min_p (s*(q-p))^2 + f[p].
fn envelope_1d(f: &[f64], s: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let finite: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if finite.is_empty() {
        return;
    }
    // parabola vertices and the boundaries between them
    let mut v: Vec<usize> = Vec::with_capacity(finite.len());
    let mut z: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    let pos = |i: usize| i as f64 * s;
    let intersect = |p: usize, q: usize| -> f64 {
        ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)))
    };
    v.push(finite[0]);
    z.push(f64::NEG_INFINITY);
    z.push(f64::INFINITY);
    for &q in &finite[1..] {
        let mut k = v.len() - 1;
        let mut sx = intersect(v[k], q);
        while sx <= z[k] {
            v.pop();
            z.pop();
            if v.is_empty() {
                break;
            }
            k = v.len() - 1;
            sx = intersect(v[k], q);
        }
        if v.is_empty() {
            v.push(q);
            z.clear();
            z.push(f64::NEG_INFINITY);
            z.push(f64::INFINITY);
        } else {
            let last = z.len() - 1;
            z[last] = sx;
            v.push(q);
            z.push(f64::INFINITY);
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = pos(q);
        while z[k + 1] < x {
            k += 1;
        }
        let d = x - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn horizontal_line_covers_row() {
        let px = line_pixels([0.0, 5.0], [9.0, 5.0]);
        assert_eq!(px.len(), 10);
        assert!(px.iter().enumerate().all(|(i, &(x, y))| x == i as i64 && y == 5));
    }

    #[test]
    fn zero_length_line_is_single_pixel() {
        assert_eq!(line_pixels([3.2, 4.4], [2.8, 3.6]), vec![(3, 4)]);
    }

    #[test]
    fn diagonal_line_is_eight_connected() {
        let px = line_pixels([0.0, 0.0], [7.0, 3.0]);
        assert_eq!(px.first(), Some(&(0, 0)));
        assert_eq!(px.last(), Some(&(7, 3)));
        for w in px.windows(2) {
            assert!((w[1].0 - w[0].0).abs() <= 1 && (w[1].1 - w[0].1).abs() <= 1);
        }
        assert_eq!(px.len(), 8);
    }

    #[test]
    fn dilation_grows_point_to_square() {
        let mut g = Grid::filled(7, 7, false);
        g.set(3, 3, true);
        let d = dilate(&g);
        assert_eq!(d.count(), 9);
        let d2 = dilate(&d);
        assert_eq!(d2.count(), 25);
    }

    #[test]
    fn dilate_to_area_stops_at_first_reach() {
        let mut g = Grid::filled(20, 20, false);
        g.set(10, 10, true);
        let d = dilate_to_area(&g, 10);
        assert_eq!(d.count(), 25);
    }

    #[test]
    fn components_are_eight_connected() {
        let g = Grid::from_vec(
            4,
            3,
            vec![
                true, false, false, true, //
                false, true, false, false, //
                false, false, false, true,
            ],
        )
        .unwrap();
        let (labels, n) = connected_components(&g);
        assert_eq!(n, 3);
        assert_eq!(*labels.get(0, 0), *labels.get(1, 1));
        assert_ne!(*labels.get(3, 0), *labels.get(3, 2));
    }

    fn brute_distance(set: &[bool], dims: [usize; 3], s: [f64; 3]) -> Vec<f64> {
        let [nx, ny, nz] = dims;
        let mut out = vec![f64::INFINITY; set.len()];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = (z * ny + y) * nx + x;
                    for z2 in 0..nz {
                        for y2 in 0..ny {
                            for x2 in 0..nx {
                                if set[(z2 * ny + y2) * nx + x2] {
                                    let dx = (x as f64 - x2 as f64) * s[0];
                                    let dy = (y as f64 - y2 as f64) * s[1];
                                    let dz = (z as f64 - z2 as f64) * s[2];
                                    out[i] = out[i].min(dx * dx + dy * dy + dz * dz);
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn empty_set_gives_infinite_distance() {
        let d = distance_sq_3d(&[false; 8], [2, 2, 2], [1.0, 1.0, 1.0]);
        assert!(d.iter().all(|v| v.is_infinite()));
    }

    proptest! {
        #[test]
        fn distance_transform_matches_brute_force(
            bits in proptest::collection::vec(prop::bool::weighted(0.15), 6 * 5 * 4),
            sx in 0.5f64..2.0, sy in 0.5f64..2.0, sz in 0.5f64..3.0,
        ) {
            let dims = [6, 5, 4];
            let s = [sx, sy, sz];
            let fast = distance_sq_3d(&bits, dims, s);
            let slow = brute_distance(&bits, dims, s);
            for (a, b) in fast.iter().zip(&slow) {
                if b.is_infinite() {
                    prop_assert!(a.is_infinite());
                } else {
                    prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b));
                }
            }
        }
    }
}
