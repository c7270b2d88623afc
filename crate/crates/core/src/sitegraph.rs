//! Arrows (edges dropping one time step inside a Toom triangle, with line
//! offset in {-1, 0, 1}) and forks (same-time edges inside a Toom triangle at
//! a fixed line coordinate) of the covering space-time graph. Adjacency is
//! computed from coordinates; the graph is never stored.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::geometry::arrow_offsets;
use crate::lattice::SpaceTimePoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Arrow,
    Fork,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Arrow => "arrow",
            EdgeKind::Fork => "fork",
        }
    }
}

/// An undirected edge with endpoints stored in increasing order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub kind: EdgeKind,
    pub ends: [SpaceTimePoint; 2],
}

impl Edge {
    pub fn new(kind: EdgeKind, p: SpaceTimePoint, q: SpaceTimePoint) -> Self {
        let ends = if p <= q { [p, q] } else { [q, p] };
        Self { kind, ends }
    }

    /// Endpoint with the larger time, for arrows.
    pub fn upper(&self) -> SpaceTimePoint {
        if self.ends[0].t >= self.ends[1].t {
            self.ends[0]
        } else {
            self.ends[1]
        }
    }

    pub fn lower(&self) -> SpaceTimePoint {
        if self.ends[0].t >= self.ends[1].t {
            self.ends[1]
        } else {
            self.ends[0]
        }
    }

    pub fn other(&self, p: &SpaceTimePoint) -> SpaceTimePoint {
        if self.ends[0] == *p {
            self.ends[1]
        } else {
            self.ends[0]
        }
    }
}

/// Offsets from a point to its six fork partners.
pub const FORK_OFFSETS: [(i64, i64); 6] = [(1, 0), (-1, 0), (0, 1), (0, -1), (-1, 1), (1, -1)];

pub fn fork_partners(p: &SpaceTimePoint) -> impl Iterator<Item = SpaceTimePoint> + '_ {
    FORK_OFFSETS
        .iter()
        .map(move |&(da, db)| p.offset(da, db, 0, 0))
}

/// The nine points an arrow reaches going down in time from `p`.
pub fn arrows_down(p: &SpaceTimePoint) -> impl Iterator<Item = SpaceTimePoint> + '_ {
    arrow_offsets()
        .into_iter()
        .map(move |o| p.offset(o.a, o.b, o.u, o.t))
}

/// The nine points an arrow reaches going up in time from `p`.
pub fn arrows_up(p: &SpaceTimePoint) -> impl Iterator<Item = SpaceTimePoint> + '_ {
    arrow_offsets()
        .into_iter()
        .map(move |o| p.offset(-o.a, -o.b, -o.u, -o.t))
}

/// All 24 edges at `p`: nine arrows down, nine up, six forks.
pub fn incident_edges(p: &SpaceTimePoint) -> Vec<Edge> {
    arrows_down(p)
        .chain(arrows_up(p))
        .map(|q| Edge::new(EdgeKind::Arrow, *p, q))
        .chain(fork_partners(p).map(|q| Edge::new(EdgeKind::Fork, *p, q)))
        .collect()
}

pub fn is_arrow(p: &SpaceTimePoint, q: &SpaceTimePoint) -> bool {
    let (hi, lo) = match q.t - p.t {
        -1 => (p, q),
        1 => (q, p),
        _ => return false,
    };
    let (da, db, du) = (lo.a - hi.a, lo.b - hi.b, lo.u - hi.u);
    matches!((da, db), (0, 0) | (1, 0) | (0, 1)) && (-1..=1).contains(&du)
}

pub fn is_fork(p: &SpaceTimePoint, q: &SpaceTimePoint) -> bool {
    p.t == q.t && p.u == q.u && FORK_OFFSETS.contains(&(q.a - p.a, q.b - p.b))
}

pub fn classify(p: &SpaceTimePoint, q: &SpaceTimePoint) -> Option<EdgeKind> {
    if is_arrow(p, q) {
        Some(EdgeKind::Arrow)
    } else if is_fork(p, q) {
        Some(EdgeKind::Fork)
    } else {
        None
    }
}

/// The graph with every arrow leaving a noise point downward removed.
pub struct PrunedGraph<F> {
    in_noise: F,
}

pub fn pruned_arrows<F: Fn(&SpaceTimePoint) -> bool>(in_noise: F) -> PrunedGraph<F> {
    PrunedGraph { in_noise }
}

impl<F: Fn(&SpaceTimePoint) -> bool> PrunedGraph<F> {
    pub fn admits(&self, edge: &Edge) -> bool {
        match edge.kind {
            EdgeKind::Fork => true,
            EdgeKind::Arrow => !(self.in_noise)(&edge.upper()),
        }
    }
}

/// The induced subgraph on a box `[a0, a0+na) x [b0, b0+nb) x [u0, u0+nu) x
/// [t0, t0+nt)`, as a vertex list and adjacency lists.
pub fn window_graph(
    origin: SpaceTimePoint,
    extent: (usize, usize, usize, usize),
) -> (Vec<SpaceTimePoint>, Vec<Vec<usize>>) {
    let mut points = Vec::new();
    for da in 0..extent.0 as i64 {
        for db in 0..extent.1 as i64 {
            for du in 0..extent.2 as i64 {
                for dt in 0..extent.3 as i64 {
                    points.push(origin.offset(da, db, du, dt));
                }
            }
        }
    }
    let index: HashMap<SpaceTimePoint, usize> =
        points.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let adjacency = points
        .iter()
        .map(|p| {
            let mut nbrs: Vec<usize> = incident_edges(p)
                .iter()
                .filter_map(|e| index.get(&e.other(p)).copied())
                .collect();
            nbrs.sort_unstable();
            nbrs
        })
        .collect();
    (points, adjacency)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn p(a: i64, b: i64, u: i64, t: i64) -> SpaceTimePoint {
        SpaceTimePoint::new(a, b, u, t)
    }

    #[test]
    fn degree_is_24() {
        for q in [p(0, 0, 0, 0), p(5, -3, 2, 7), p(-1, -1, -1, 1)] {
            let edges = incident_edges(&q);
            assert_eq!(edges.len(), 24);
            let distinct: BTreeSet<_> = edges.iter().collect();
            assert_eq!(distinct.len(), 24);
            assert_eq!(edges.iter().filter(|e| e.kind == EdgeKind::Fork).count(), 6);
            for e in &edges {
                assert_eq!(classify(&e.ends[0], &e.ends[1]), Some(e.kind));
            }
        }
    }

    #[test]
    fn fork_partners_enumerate_all_bases() {
        // Brute force: every base (x, y) and each of the three fork kinds.
        let q = p(4, 7, 1, 3);
        let mut expected = BTreeSet::new();
        for x in 0..10 {
            for y in 0..10 {
                let kinds = [
                    [(x, y), (x + 1, y)],
                    [(x, y), (x, y + 1)],
                    [(x + 1, y), (x, y + 1)],
                ];
                for pair in kinds {
                    for k in 0..2 {
                        if pair[k] == (q.a, q.b) {
                            let (a, b) = pair[1 - k];
                            expected.insert(p(a, b, q.u, q.t));
                        }
                    }
                }
            }
        }
        let got: BTreeSet<_> = fork_partners(&q).collect();
        assert_eq!(got, expected);
        let want: BTreeSet<_> = [
            p(5, 7, 1, 3),
            p(3, 7, 1, 3),
            p(4, 8, 1, 3),
            p(4, 6, 1, 3),
            p(3, 8, 1, 3),
            p(5, 6, 1, 3),
        ]
        .into_iter()
        .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn downward_arrows_match_offsets() {
        let q = p(0, 0, 0, 5);
        let heads: BTreeSet<_> = arrows_down(&q).collect();
        let mut expected = BTreeSet::new();
        for du in -1..=1 {
            for (da, db) in [(0, 0), (1, 0), (0, 1)] {
                expected.insert(p(da, db, du, 4));
            }
        }
        assert_eq!(heads, expected);
    }

    #[test]
    fn membership_examples() {
        assert!(is_arrow(&p(1, 1, 1, 3), &p(1, 1, 1, 2)));
        assert!(is_arrow(&p(1, 1, 1, 2), &p(1, 1, 1, 3)));
        assert!(is_arrow(&p(1, 1, 1, 3), &p(2, 1, 0, 2)));
        assert!(!is_arrow(&p(1, 1, 1, 3), &p(0, 1, 1, 2)));
        assert!(!is_arrow(&p(1, 1, 1, 3), &p(1, 1, 3, 2)));
        assert!(is_fork(&p(2, 1, 0, 4), &p(1, 2, 0, 4)));
        assert!(!is_fork(&p(1, 1, 0, 4), &p(2, 2, 0, 4)));
        assert_eq!(classify(&p(1, 1, 0, 4), &p(1, 1, 2, 4)), None);
        assert_eq!(classify(&p(1, 1, 0, 4), &p(1, 1, 0, 4)), None);
    }

    #[test]
    fn pruning_drops_only_arrows_below_noise() {
        let noisy = p(0, 0, 0, 5);
        let everything = pruned_arrows(|_| false);
        let pruned = pruned_arrows(|q: &SpaceTimePoint| *q == noisy);
        for e in incident_edges(&noisy) {
            assert!(everything.admits(&e));
            let down = e.kind == EdgeKind::Arrow && e.upper() == noisy;
            assert_eq!(pruned.admits(&e), !down);
        }
    }

    #[test]
    fn window_degrees_are_bounded() {
        let (points, adjacency) = window_graph(p(0, 0, 0, 0), (5, 5, 3, 2));
        assert_eq!(points.len(), 150);
        assert!(adjacency.iter().all(|n| n.len() <= 24));
        for (i, nbrs) in adjacency.iter().enumerate() {
            for &j in nbrs {
                assert!(adjacency[j].contains(&i));
            }
        }
    }
}
