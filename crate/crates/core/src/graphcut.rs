//! Max-flow / min-cut over capacitated graphs with terminal links.
//!
//! The solver grows search trees from both terminals and reuses them across
//! augmentations (Boykov-Kolmogorov). It is exact for any non-negative
//! capacities; grid graphs with many short augmenting paths are where the
//! tree reuse pays off.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Capacity marking a hard clamp to a terminal. Larger than any finite cut
/// the segmentation energies produce.
pub const INFINITE_CAPACITY: f64 = 1e18;

/// Neighbor offsets for each connectivity; every unordered pair appears once.
pub const OFFSETS_4: [(i64, i64); 2] = [(1, 0), (0, 1)];
pub const OFFSETS_8: [(i64, i64); 4] = [(1, 0), (0, 1), (1, 1), (-1, 1)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Source,
    Sink,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub cap_uv: f64,
    pub cap_vu: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowNetwork {
    to_source: Vec<f64>,
    to_sink: Vec<f64>,
    edges: Vec<Edge>,
}

fn check_cap(c: f64) -> Result<()> {
    if !(c >= 0.0) || c.is_nan() || c > INFINITE_CAPACITY {
        return Err(Error::InvalidParameter(format!(
            "capacity must be in [0, {INFINITE_CAPACITY:e}], got {c}"
        )));
    }
    Ok(())
}

impl FlowNetwork {
    pub fn new(nodes: usize) -> Self {
        FlowNetwork {
            to_source: vec![0.0; nodes],
            to_sink: vec![0.0; nodes],
            edges: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.to_source.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn terminal(&self, node: usize) -> (f64, f64) {
        (self.to_source[node], self.to_sink[node])
    }

    /// Add to the terminal capacities of `node`.
    pub fn add_terminal(&mut self, node: usize, to_source: f64, to_sink: f64) -> Result<()> {
        check_cap(to_source)?;
        check_cap(to_sink)?;
        let n = self.node_count();
        if node >= n {
            return Err(Error::InvalidParameter(format!("node {node} out of range {n}")));
        }
        self.to_source[node] = (self.to_source[node] + to_source).min(INFINITE_CAPACITY);
        self.to_sink[node] = (self.to_sink[node] + to_sink).min(INFINITE_CAPACITY);
        Ok(())
    }

    pub fn add_edge(&mut self, u: usize, v: usize, cap_uv: f64, cap_vu: f64) -> Result<()> {
        check_cap(cap_uv)?;
        check_cap(cap_vu)?;
        let n = self.node_count();
        if u >= n || v >= n || u == v {
            return Err(Error::InvalidParameter(format!("bad edge ({u}, {v}) in {n}-node network")));
        }
        self.edges.push(Edge { u, v, cap_uv, cap_vu });
        Ok(())
    }

    /// Capacity of the s/t cut induced by a labeling.
    pub fn cut_value(&self, sides: &[Side]) -> f64 {
        let mut cut = 0.0;
        for (i, side) in sides.iter().enumerate() {
            cut += match side {
                Side::Source => self.to_sink[i],
                Side::Sink => self.to_source[i],
            };
        }
        for e in &self.edges {
            match (sides[e.u], sides[e.v]) {
                (Side::Source, Side::Sink) => cut += e.cap_uv,
                (Side::Sink, Side::Source) => cut += e.cap_vu,
                _ => {}
            }
        }
        cut
    }
}

#[derive(Clone, Debug)]
pub struct FlowResult {
    pub flow: f64,
    pub sides: Vec<Side>,
    /// Net flow `u -> v` on each edge, in `FlowNetwork::edges` order.
    pub edge_flows: Vec<f64>,
    /// Net flow entering each node from the terminals (source in minus sink
    /// out).
    pub terminal_flows: Vec<f64>,
}

const NO_PARENT: usize = usize::MAX;
const TERMINAL: usize = usize::MAX - 1;
const ORPHAN: usize = usize::MAX - 2;
const END: usize = usize::MAX;

struct Solver {
    // per node
    first: Vec<usize>,
    parent: Vec<usize>,
    is_sink: Vec<bool>,
    tr_cap: Vec<f64>,
    ts: Vec<u64>,
    dist: Vec<u32>,
    queued: Vec<bool>,
    // per arc; arcs come in sister pairs (2e, 2e+1)
    head: Vec<usize>,
    next: Vec<usize>,
    r_cap: Vec<f64>,
    active: VecDeque<usize>,
    orphans: VecDeque<usize>,
    time: u64,
    flow: f64,
}

#[inline]
fn sister(a: usize) -> usize {
    a ^ 1
}

impl Solver {
    fn new(net: &FlowNetwork) -> Self {
        let n = net.node_count();
        let m = net.edges.len();
        let mut s = Solver {
            first: vec![END; n],
            parent: vec![NO_PARENT; n],
            is_sink: vec![false; n],
            tr_cap: vec![0.0; n],
            ts: vec![0; n],
            dist: vec![0; n],
            queued: vec![false; n],
            head: Vec::with_capacity(2 * m),
            next: Vec::with_capacity(2 * m),
            r_cap: Vec::with_capacity(2 * m),
            active: VecDeque::new(),
            orphans: VecDeque::new(),
            time: 0,
            flow: 0.0,
        };
        for e in &net.edges {
            let a = s.head.len();
            s.head.push(e.v);
            s.next.push(s.first[e.u]);
            s.r_cap.push(e.cap_uv);
            s.first[e.u] = a;
            s.head.push(e.u);
            s.next.push(s.first[e.v]);
            s.r_cap.push(e.cap_vu);
            s.first[e.v] = a + 1;
        }
        for i in 0..n {
            let (src, snk) = (net.to_source[i], net.to_sink[i]);
            s.flow += src.min(snk);
            s.tr_cap[i] = src - snk;
            if s.tr_cap[i] != 0.0 {
                s.is_sink[i] = s.tr_cap[i] < 0.0;
                s.parent[i] = TERMINAL;
                s.dist[i] = 1;
                s.activate(i);
            }
        }
        s
    }

    #[inline]
    fn activate(&mut self, i: usize) {
        if !self.queued[i] {
            self.queued[i] = true;
            self.active.push_back(i);
        }
    }

    fn next_active(&mut self) -> Option<usize> {
        while let Some(i) = self.active.pop_front() {
            self.queued[i] = false;
            if self.parent[i] != NO_PARENT {
                return Some(i);
            }
        }
        None
    }

    /// Grow the tree of `i` by one layer. Returns an arc from the source tree
    /// into the sink tree when the trees touch.
    fn grow(&mut self, i: usize) -> Option<usize> {
        let mut a = self.first[i];
        if !self.is_sink[i] {
            while a != END {
                if self.r_cap[a] > 0.0 {
                    let j = self.head[a];
                    if self.parent[j] == NO_PARENT {
                        self.is_sink[j] = false;
                        self.parent[j] = sister(a);
                        self.ts[j] = self.ts[i];
                        self.dist[j] = self.dist[i] + 1;
                        self.activate(j);
                    } else if self.is_sink[j] {
                        return Some(a);
                    } else if self.ts[j] <= self.ts[i] && self.dist[j] > self.dist[i] {
                        self.parent[j] = sister(a);
                        self.ts[j] = self.ts[i];
                        self.dist[j] = self.dist[i] + 1;
                    }
                }
                a = self.next[a];
            }
        } else {
            while a != END {
                if self.r_cap[sister(a)] > 0.0 {
                    let j = self.head[a];
                    if self.parent[j] == NO_PARENT {
                        self.is_sink[j] = true;
                        self.parent[j] = sister(a);
                        self.ts[j] = self.ts[i];
                        self.dist[j] = self.dist[i] + 1;
                        self.activate(j);
                    } else if !self.is_sink[j] {
                        return Some(sister(a));
                    } else if self.ts[j] <= self.ts[i] && self.dist[j] > self.dist[i] {
                        self.parent[j] = sister(a);
                        self.ts[j] = self.ts[i];
                        self.dist[j] = self.dist[i] + 1;
                    }
                }
                a = self.next[a];
            }
        }
        None
    }

    fn make_orphan(&mut self, i: usize) {
        self.parent[i] = ORPHAN;
        self.orphans.push_back(i);
    }

    fn augment(&mut self, middle: usize) {
        let mut bottleneck = self.r_cap[middle];
        let mut i = self.head[sister(middle)];
        loop {
            let p = self.parent[i];
            if p == TERMINAL {
                break;
            }
            bottleneck = bottleneck.min(self.r_cap[sister(p)]);
            i = self.head[p];
        }
        bottleneck = bottleneck.min(self.tr_cap[i]);
        let mut i = self.head[middle];
        loop {
            let p = self.parent[i];
            if p == TERMINAL {
                break;
            }
            bottleneck = bottleneck.min(self.r_cap[p]);
            i = self.head[p];
        }
        bottleneck = bottleneck.min(-self.tr_cap[i]);

        self.r_cap[sister(middle)] += bottleneck;
        self.r_cap[middle] -= bottleneck;

        let mut i = self.head[sister(middle)];
        loop {
            let p = self.parent[i];
            if p == TERMINAL {
                break;
            }
            self.r_cap[p] += bottleneck;
            self.r_cap[sister(p)] -= bottleneck;
            if self.r_cap[sister(p)] == 0.0 {
                self.make_orphan(i);
            }
            i = self.head[p];
        }
        self.tr_cap[i] -= bottleneck;
        if self.tr_cap[i] == 0.0 {
            self.make_orphan(i);
        }

        let mut i = self.head[middle];
        loop {
            let p = self.parent[i];
            if p == TERMINAL {
                break;
            }
            self.r_cap[sister(p)] += bottleneck;
            self.r_cap[p] -= bottleneck;
            if self.r_cap[p] == 0.0 {
                self.make_orphan(i);
            }
            i = self.head[p];
        }
        self.tr_cap[i] += bottleneck;
        if self.tr_cap[i] == 0.0 {
            self.make_orphan(i);
        }
        self.flow += bottleneck;
    }

    /// Distance from `j` to its terminal through valid parents, or `None` if
    /// the chain ends at an orphan. Caches results with the current time.
    fn origin_distance(&mut self, start: usize) -> Option<u32> {
        let mut d: u32 = 0;
        let mut j = start;
        loop {
            if self.ts[j] == self.time {
                d += self.dist[j];
                break;
            }
            let a = self.parent[j];
            d += 1;
            if a == TERMINAL {
                self.ts[j] = self.time;
                self.dist[j] = 1;
                break;
            }
            if a == ORPHAN {
                return None;
            }
            j = self.head[a];
        }
        let mut dd = d;
        let mut j = start;
        while self.ts[j] != self.time {
            self.ts[j] = self.time;
            self.dist[j] = dd;
            dd -= 1;
            j = self.head[self.parent[j]];
        }
        Some(d)
    }

    fn adopt(&mut self, i: usize) {
        let sink_tree = self.is_sink[i];
        let mut best = END;
        let mut best_d = u32::MAX;
        let mut a = self.first[i];
        while a != END {
            // an arc usable by i to reach its tree's terminal
            let usable = if sink_tree {
                self.r_cap[a] > 0.0
            } else {
                self.r_cap[sister(a)] > 0.0
            };
            let j = self.head[a];
            if usable && self.is_sink[j] == sink_tree && self.parent[j] != NO_PARENT {
                if let Some(d) = self.origin_distance(j) {
                    if d < best_d {
                        best = a;
                        best_d = d;
                    }
                }
            }
            a = self.next[a];
        }
        if best != END {
            self.parent[i] = best;
            self.ts[i] = self.time;
            self.dist[i] = best_d + 1;
            return;
        }
        let mut a = self.first[i];
        while a != END {
            let j = self.head[a];
            if self.is_sink[j] == sink_tree && self.parent[j] != NO_PARENT {
                let usable = if sink_tree {
                    self.r_cap[a] > 0.0
                } else {
                    self.r_cap[sister(a)] > 0.0
                };
                if usable {
                    self.activate(j);
                }
                let pj = self.parent[j];
                if pj != TERMINAL && pj != ORPHAN && self.head[pj] == i {
                    self.make_orphan(j);
                }
            }
            a = self.next[a];
        }
        self.parent[i] = NO_PARENT;
    }

    fn run(&mut self) {
        let mut current: Option<usize> = None;
        loop {
            let i = match current.take().filter(|&i| self.parent[i] != NO_PARENT) {
                Some(i) => i,
                None => match self.next_active() {
                    Some(i) => i,
                    None => break,
                },
            };
            let found = self.grow(i);
            self.time += 1;
            if let Some(middle) = found {
                current = Some(i);
                self.augment(middle);
                while let Some(o) = self.orphans.pop_front() {
                    self.adopt(o);
                }
            }
        }
    }
}

/// Maximum flow and a minimum cut. Nodes clamped to a terminal by an
/// infinite link always end up on that terminal's side.
pub fn max_flow(net: &FlowNetwork) -> Result<FlowResult> {
    for i in 0..net.node_count() {
        if net.to_source[i] >= INFINITE_CAPACITY && net.to_sink[i] >= INFINITE_CAPACITY {
            return Err(Error::ContradictoryClamp(i));
        }
    }
    let mut solver = Solver::new(net);
    let initial_tr = solver.tr_cap.clone();
    solver.run();
    let sides = (0..net.node_count())
        .map(|i| {
            if solver.parent[i] != NO_PARENT && !solver.is_sink[i] {
                Side::Source
            } else {
                Side::Sink
            }
        })
        .collect();
    let edge_flows = net
        .edges
        .iter()
        .enumerate()
        .map(|(e, edge)| edge.cap_uv - solver.r_cap[2 * e])
        .collect();
    let terminal_flows = initial_tr
        .iter()
        .zip(&solver.tr_cap)
        .map(|(a, b)| a - b)
        .collect();
    Ok(FlowResult {
        flow: solver.flow,
        sides,
        edge_flows,
        terminal_flows,
    })
}

/// Grid graph with one node per pixel (row-major). `unary_source[p]` is the
/// capacity of the source link of pixel `p`, `unary_sink[p]` of its sink
/// link. `pairwise[d][p]` weights the symmetric link between `p` and its
/// neighbor at offset `d` of the chosen connectivity (`OFFSETS_4` or
/// `OFFSETS_8`); entries whose neighbor falls outside the grid are ignored.
pub fn build_grid(
    dims: (usize, usize),
    unary_source: &[f64],
    unary_sink: &[f64],
    pairwise: &[Vec<f64>],
    connectivity: u8,
) -> Result<FlowNetwork> {
    let (w, h) = dims;
    let n = w * h;
    let offsets: &[(i64, i64)] = match connectivity {
        4 => &OFFSETS_4,
        8 => &OFFSETS_8,
        c => {
            return Err(Error::InvalidParameter(format!(
                "connectivity must be 4 or 8, got {c}"
            )))
        }
    };
    if unary_source.len() != n || unary_sink.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{w}x{h} grid needs {n} unaries per terminal"
        )));
    }
    if pairwise.len() != offsets.len() || pairwise.iter().any(|p| p.len() != n) {
        return Err(Error::ShapeMismatch(format!(
            "{connectivity}-connected grid needs {} pairwise planes of {n} weights",
            offsets.len()
        )));
    }
    let mut net = FlowNetwork::new(n);
    for p in 0..n {
        net.add_terminal(p, unary_source[p], unary_sink[p])?;
    }
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let p = (y as usize) * w + x as usize;
            for (d, &(dx, dy)) in offsets.iter().enumerate() {
                let (qx, qy) = (x + dx, y + dy);
                if qx < 0 || qy < 0 || qx >= w as i64 || qy >= h as i64 {
                    continue;
                }
                let q = (qy as usize) * w + qx as usize;
                let wgt = pairwise[d][p];
                net.add_edge(p, q, wgt, wgt)?;
            }
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_min_cut(net: &FlowNetwork) -> f64 {
        let n = net.node_count();
        (0u32..1 << n)
            .map(|bits| {
                let sides: Vec<Side> = (0..n)
                    .map(|i| if bits >> i & 1 == 1 { Side::Source } else { Side::Sink })
                    .collect();
                net.cut_value(&sides)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn single_node_cut() {
        let mut net = FlowNetwork::new(1);
        net.add_terminal(0, 5.0, 3.0).unwrap();
        let r = max_flow(&net).unwrap();
        assert_eq!(r.flow, 3.0);
        assert_eq!(r.sides, vec![Side::Source]);
        assert_eq!(brute_min_cut(&net), 3.0);
    }

    #[test]
    fn infinite_source_link_clamps() {
        let mut net = FlowNetwork::new(2);
        net.add_terminal(0, INFINITE_CAPACITY, 0.0).unwrap();
        net.add_terminal(1, 0.0, 100.0).unwrap();
        net.add_terminal(0, 0.0, 50.0).unwrap();
        net.add_edge(0, 1, 7.0, 7.0).unwrap();
        let r = max_flow(&net).unwrap();
        assert_eq!(r.sides[0], Side::Source);
        assert_eq!(r.flow, 57.0);
    }

    #[test]
    fn contradictory_clamp_is_rejected() {
        let mut net = FlowNetwork::new(1);
        net.add_terminal(0, INFINITE_CAPACITY, INFINITE_CAPACITY).unwrap();
        let err = max_flow(&net).unwrap_err();
        assert!(err.to_string().contains("contradictory clamp"));
    }

    #[test]
    fn diamond_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let mut net = FlowNetwork::new(4);
            for i in 0..4 {
                net.add_terminal(i, rng.random_range(0..10) as f64, rng.random_range(0..10) as f64)
                    .unwrap();
            }
            for (u, v) in [(0, 1), (0, 2), (1, 3), (2, 3), (1, 2)] {
                net.add_edge(u, v, rng.random_range(0..10) as f64, rng.random_range(0..10) as f64)
                    .unwrap();
            }
            let r = max_flow(&net).unwrap();
            assert_eq!(r.flow, brute_min_cut(&net));
            assert_eq!(net.cut_value(&r.sides), r.flow);
        }
    }

    #[test]
    fn grid_link_counts() {
        let net = build_grid((2, 1), &[0.0; 2], &[0.0; 2], &[vec![1.0; 2], vec![1.0; 2]], 4).unwrap();
        assert_eq!(net.edges().len(), 1);
        let planes = vec![vec![1.0; 9]; 4];
        let net = build_grid((3, 3), &[0.0; 9], &[0.0; 9], &planes, 8).unwrap();
        assert_eq!(net.edges().len(), 20);
        assert!(build_grid((3, 3), &[0.0; 9], &[0.0; 9], &planes, 4).is_err());
        assert!(build_grid((3, 3), &[0.0; 8], &[0.0; 9], &planes, 8).is_err());
        assert!(build_grid((3, 3), &[0.0; 9], &[0.0; 9], &planes, 6).is_err());
    }

    #[test]
    fn zero_pairwise_decouples_pixels() {
        let src = [1.0, 5.0, 2.0, 0.0];
        let snk = [3.0, 1.0, 2.5, 4.0];
        let net = build_grid((2, 2), &src, &snk, &vec![vec![0.0; 4]; 4], 8).unwrap();
        let r = max_flow(&net).unwrap();
        for p in 0..4 {
            // source side pays the sink link
            let expect = if snk[p] < src[p] { Side::Source } else { Side::Sink };
            assert_eq!(r.sides[p], expect, "pixel {p}");
        }
        let total: f64 = src.iter().zip(&snk).map(|(a, b)| a.min(*b)).sum();
        assert_eq!(r.flow, total);
    }

    #[test]
    fn large_grid_flow_is_feasible_and_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (w, h) = (40, 30);
        let n = w * h;
        let src: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0).collect();
        let snk: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0).collect();
        let planes: Vec<Vec<f64>> = (0..4).map(|_| (0..n).map(|_| rng.random::<f64>() * 4.0).collect()).collect();
        let net = build_grid((w, h), &src, &snk, &planes, 8).unwrap();
        let r = max_flow(&net).unwrap();
        let cut = net.cut_value(&r.sides);
        assert!((cut - r.flow).abs() <= 1e-9 * r.flow.max(1.0));
        let mut balance = r.terminal_flows.clone();
        for (e, f) in net.edges().iter().zip(&r.edge_flows) {
            assert!(*f <= e.cap_uv + 1e-9 && -*f <= e.cap_vu + 1e-9);
            balance[e.u] -= f;
            balance[e.v] += f;
        }
        assert!(balance.iter().all(|b| b.abs() < 1e-9));
    }
}
