//! Explanation trees for a deviation.
//!
//! Starting from a deviating point outside the noise set, every deviating
//! non-noise point is given an *excuse*: two deviating points of a Toom
//! triangle one step earlier. The closure of the starting point under
//! excuses is the working graph `W`, whose arrows are exactly the excuse
//! arrows. At each time level, `W` splits into clusters: components of the
//! arrow graph restricted to times at most that level.
//!
//! The explanation tree is grown by refinement. An unprocessed node is a
//! spanned subset of one cluster. Refining it replaces the node by the
//! pole points that carry tree edges, adds arrows down to the poles of their
//! excuses, and hangs below them the pieces produced by the spanning
//! construction applied to the clusters of the cause graph together with
//! one connecting fork per edge of a spanning tree of that graph. When only
//! noise singletons remain unprocessed, their number is the weight of the
//! tree.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use crate::deviation::CoveringView;
use crate::error::{Error, Result};
use crate::geometry::{create_spanned, span_of_poles, Functional, SpannedSet};
use crate::lattice::SpaceTimePoint;
use crate::sitegraph::{classify, fork_partners, EdgeKind};

type P = SpaceTimePoint;

/// Line offsets scanned for an excuse, in order.
const LINE_SCAN: [i64; 3] = [0, -1, 1];
/// Pairs of triangle corners `(a,b) < (a+1,b) < (a,b+1)`, in order.
const CORNER_PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, x: usize, y: usize) -> bool {
        let (rx, ry) = (self.find(x), self.find(y));
        if rx == ry {
            return false;
        }
        self.parent[rx.max(ry)] = rx.min(ry);
        true
    }
}

/// Two deviating points of one Toom triangle below a deviating point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Excuse {
    owner: P,
    pair: [P; 2],
}

impl Excuse {
    pub fn owner(&self) -> P {
        self.owner
    }

    pub fn pair(&self) -> [P; 2] {
        self.pair
    }

    /// The pair as a spanned set whose span is its size (always 3).
    pub fn spanned(&self) -> SpannedSet {
        create_spanned(self.pair).expect("excuse pair is non-empty")
    }

    pub fn poles(&self) -> [P; 3] {
        *self.spanned().poles()
    }

    pub fn pole(&self, f: Functional) -> P {
        self.poles()[f.index()]
    }
}

/// The excuse of `v`: scanning the line offsets 0, -1, +1, the first
/// triangle below `v` with two deviating corners, and within it the
/// lexicographically first such pair of corners.
pub fn find_excuse(view: &CoveringView<'_>, v: &P) -> Result<Excuse> {
    if v.t < 1 {
        return Err(Error::Precondition(format!("{v} has no earlier time step")));
    }
    if !view.xi(v)? {
        return Err(Error::Precondition(format!("{v} does not deviate")));
    }
    if view.in_noise(v)? {
        return Err(Error::Precondition(format!("{v} is a noise point")));
    }
    for du in LINE_SCAN {
        let base = v.offset(0, 0, du, -1);
        if !view.on_lattice(&base) {
            continue;
        }
        let corners = [base, base.offset(1, 0, 0, 0), base.offset(0, 1, 0, 0)];
        let mut deviates = [false; 3];
        for (flag, c) in deviates.iter_mut().zip(&corners) {
            *flag = view.xi(c)?;
        }
        if let Some(&(i, j)) = CORNER_PAIRS
            .iter()
            .find(|&&(i, j)| deviates[i] && deviates[j])
        {
            return Ok(Excuse {
                owner: *v,
                pair: [corners[i], corners[j]],
            });
        }
    }
    Err(Error::NoExcuse(*v))
}

#[derive(Debug, Clone)]
pub struct WorkingNode {
    pub point: P,
    pub noise: bool,
    /// Present exactly for the non-noise nodes.
    pub excuse: Option<Excuse>,
}

/// The excuse closure of a root point, nodes ordered by time then point.
#[derive(Debug, Clone)]
pub struct WorkingGraph {
    root: P,
    nodes: Vec<WorkingNode>,
    index: HashMap<P, usize>,
}

impl WorkingGraph {
    pub fn root(&self) -> P {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[WorkingNode] {
        &self.nodes
    }

    pub fn id_of(&self, p: &P) -> Option<usize> {
        self.index.get(p).copied()
    }

    pub fn node(&self, p: &P) -> Option<&WorkingNode> {
        self.id_of(p).map(|i| &self.nodes[i])
    }

    pub fn contains(&self, p: &P) -> bool {
        self.index.contains_key(p)
    }

    /// Excuse arrows, tail first.
    pub fn arrows(&self) -> impl Iterator<Item = (P, P)> + '_ {
        self.nodes
            .iter()
            .filter_map(|n| n.excuse.as_ref())
            .flat_map(|e| {
                let owner = e.owner();
                e.pair().into_iter().map(move |q| (owner, q))
            })
    }

    /// Forks of the space-time graph between two nodes, each listed once.
    pub fn forks(&self) -> Vec<[P; 2]> {
        let mut out = Vec::new();
        for n in &self.nodes {
            for q in fork_partners(&n.point) {
                if n.point < q && self.contains(&q) {
                    out.push([n.point, q]);
                }
            }
        }
        out
    }
}

/// Builds the excuse closure of `root`, which must deviate outside the noise.
pub fn build_working_graph(view: &CoveringView<'_>, root: P) -> Result<WorkingGraph> {
    if !view.xi(&root)? || view.in_noise(&root)? {
        return Err(Error::Precondition(format!(
            "{root} must deviate and lie outside the noise set"
        )));
    }
    let mut seen: BTreeSet<P> = BTreeSet::new();
    let mut queue = VecDeque::from([root]);
    seen.insert(root);
    let mut nodes = Vec::new();
    while let Some(v) = queue.pop_front() {
        let noise = view.in_noise(&v)?;
        let excuse = if noise {
            None
        } else {
            Some(find_excuse(view, &v)?)
        };
        if let Some(e) = &excuse {
            for q in e.pair() {
                if seen.insert(q) {
                    queue.push_back(q);
                }
            }
        }
        nodes.push(WorkingNode {
            point: v,
            noise,
            excuse,
        });
    }
    nodes.sort_by_key(|n| (n.point.t, n.point));
    let index = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.point, i))
        .collect();
    Ok(WorkingGraph { root, nodes, index })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    pub time: i64,
    /// Sorted.
    pub points: Vec<P>,
}

/// All clusters of a working graph, at every time level.
#[derive(Debug, Clone)]
pub struct Clusters {
    clusters: Vec<Cluster>,
    of_node: Vec<usize>,
}

impl Clusters {
    /// Sweeps time upward, merging along the excuse arrows of each level
    /// before reading off that level's components.
    pub fn build(w: &WorkingGraph) -> Self {
        let mut uf = UnionFind::new(w.len());
        let mut clusters = Vec::new();
        let mut of_node = vec![usize::MAX; w.len()];
        let mut start = 0;
        while start < w.len() {
            let t = w.nodes[start].point.t;
            let end = start
                + w.nodes[start..]
                    .iter()
                    .take_while(|n| n.point.t == t)
                    .count();
            for i in start..end {
                if let Some(e) = &w.nodes[i].excuse {
                    for q in e.pair() {
                        uf.union(i, w.id_of(&q).expect("excuse points are nodes"));
                    }
                }
            }
            let mut by_root: BTreeMap<usize, usize> = BTreeMap::new();
            for (i, slot) in of_node.iter_mut().enumerate().take(end).skip(start) {
                let r = uf.find(i);
                let id = *by_root.entry(r).or_insert_with(|| {
                    clusters.push(Cluster {
                        time: t,
                        points: Vec::new(),
                    });
                    clusters.len() - 1
                });
                clusters[id].points.push(w.nodes[i].point);
                *slot = id;
            }
            start = end;
        }
        Self { clusters, of_node }
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn get(&self, id: usize) -> &Cluster {
        &self.clusters[id]
    }

    pub fn all(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn cluster_of(&self, w: &WorkingGraph, p: &P) -> Option<usize> {
        w.id_of(p).map(|i| self.of_node[i])
    }
}

/// The clusters of `w` at time `t`, each sorted, ordered by least point.
pub fn clusters_of(w: &WorkingGraph, t: i64) -> Vec<Vec<P>> {
    Clusters::build(w)
        .clusters
        .into_iter()
        .filter(|c| c.time == t)
        .map(|c| c.points)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CauseEdge {
    /// Cluster ids, smaller first.
    pub clusters: [usize; 2],
    /// Forks of `W` between the two clusters, sorted.
    pub forks: Vec<[P; 2]>,
    /// Excuse pairs split between the two clusters, sorted.
    pub head_pairs: Vec<[P; 2]>,
}

/// Clusters one level below a node, joined when a fork runs between them
/// or when they share the head of an excuse.
#[derive(Debug, Clone)]
pub struct CauseGraph {
    pub time: i64,
    pub nodes: Vec<usize>,
    pub edges: Vec<CauseEdge>,
}

impl CauseGraph {
    pub fn components(&self) -> usize {
        let pos: HashMap<usize, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i))
            .collect();
        let mut uf = UnionFind::new(self.nodes.len());
        let mut count = self.nodes.len();
        for e in &self.edges {
            if uf.union(pos[&e.clusters[0]], pos[&e.clusters[1]]) {
                count -= 1;
            }
        }
        count
    }

    pub fn is_connected(&self) -> bool {
        self.components() == 1
    }
}

fn sorted_pair(p: P, q: P) -> [P; 2] {
    if p <= q {
        [p, q]
    } else {
        [q, p]
    }
}

fn cause_edge(
    edges: &mut BTreeMap<(usize, usize), CauseEdge>,
    c1: usize,
    c2: usize,
) -> &mut CauseEdge {
    let key = (c1.min(c2), c1.max(c2));
    edges.entry(key).or_insert_with(|| CauseEdge {
        clusters: [key.0, key.1],
        forks: Vec::new(),
        head_pairs: Vec::new(),
    })
}

/// Cause graph of a set of non-noise points of one cluster.
pub fn cause_graph(
    w: &WorkingGraph,
    clusters: &Clusters,
    points: &BTreeSet<P>,
) -> Result<CauseGraph> {
    let first = points
        .first()
        .ok_or_else(|| Error::Precondition("cause graph of an empty set".into()))?;
    let mut excuses = Vec::with_capacity(points.len());
    for p in points {
        let node = w
            .node(p)
            .ok_or_else(|| Error::Precondition(format!("{p} is not in W")))?;
        match &node.excuse {
            Some(e) => excuses.push(e),
            None => return Err(Error::Precondition(format!("{p} is a noise point"))),
        }
    }
    let cl = |q: &P| clusters.cluster_of(w, q).expect("excuse points are nodes");
    let nodes: BTreeSet<usize> = excuses
        .iter()
        .flat_map(|e| e.pair())
        .map(|q| cl(&q))
        .collect();
    let mut edges: BTreeMap<(usize, usize), CauseEdge> = BTreeMap::new();
    let mut fork_list = Vec::new();
    for &c in &nodes {
        for p in &clusters.get(c).points {
            for q in fork_partners(p) {
                if *p < q {
                    if let Some(cq) = clusters.cluster_of(w, &q) {
                        if cq != c && nodes.contains(&cq) {
                            fork_list.push((c, cq, [*p, q]));
                        }
                    }
                }
            }
        }
    }
    let mut head_list = Vec::new();
    for e in &excuses {
        let [r, s] = e.pair();
        let (cr, cs) = (cl(&r), cl(&s));
        if cr != cs {
            head_list.push((cr, cs, sorted_pair(r, s)));
        }
    }
    for (c1, c2, f) in fork_list {
        cause_edge(&mut edges, c1, c2).forks.push(f);
    }
    for (c1, c2, h) in head_list {
        cause_edge(&mut edges, c1, c2).head_pairs.push(h);
    }
    let mut edges: Vec<CauseEdge> = edges.into_values().collect();
    for e in &mut edges {
        e.forks.sort();
        e.forks.dedup();
        e.head_pairs.sort();
        e.head_pairs.dedup();
    }
    Ok(CauseGraph {
        time: first.t - 1,
        nodes: nodes.into_iter().collect(),
        edges,
    })
}

/// One member of a spanning system: a spanned set on a member of the family
/// together with the points of that member used to connect it.
#[derive(Debug, Clone)]
pub struct SpanningPiece {
    pub member: usize,
    pub spanned: SpannedSet,
    pub pole_points: Vec<P>,
}

fn bfs(adj: &[Vec<usize>], source: usize) -> (Vec<usize>, Vec<usize>) {
    let mut dist = vec![usize::MAX; adj.len()];
    let mut parent = vec![usize::MAX; adj.len()];
    let mut queue = VecDeque::from([source]);
    dist[source] = 0;
    while let Some(x) = queue.pop_front() {
        for &y in &adj[x] {
            if dist[y] == usize::MAX {
                dist[y] = dist[x] + 1;
                parent[y] = x;
                queue.push_back(y);
            }
        }
    }
    (dist, parent)
}

/// Splits the span of `target` over a connected family of subsets of its
/// base.
///
/// Builds the point/member incidence graph, extracts a tree connecting the
/// distinct poles, and gives each member on the tree, for each functional,
/// the pole at its neighbour towards the corresponding target pole. The
/// spans of the pieces add up to the span of `target`, and the sets of used
/// points form a minimal connecting system for the poles.
pub fn spanning(target: &SpannedSet, family: &[BTreeSet<P>]) -> Result<Vec<SpanningPiece>> {
    if family.is_empty() {
        return Err(Error::Precondition("spanning over an empty family".into()));
    }
    for (i, set) in family.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::Precondition(format!("family member {i} is empty")));
        }
        if let Some(p) = set.iter().find(|p| !target.base().contains(p)) {
            return Err(Error::Precondition(format!(
                "{p} of member {i} is outside the base"
            )));
        }
    }
    let points: Vec<P> = family
        .iter()
        .flatten()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let np = points.len();
    let point_id: HashMap<P, usize> = points.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let mut adj = vec![Vec::new(); np + family.len()];
    for (i, set) in family.iter().enumerate() {
        for p in set {
            let x = point_id[p];
            adj[x].push(np + i);
            adj[np + i].push(x);
        }
    }
    let poles = *target.poles();
    let mut terminals: Vec<usize> = Vec::new();
    let mut terminal_of = [0usize; 3];
    for (j, pole) in poles.iter().enumerate() {
        let x = *point_id.get(pole).ok_or_else(|| {
            Error::Precondition(format!("pole {pole} is not covered by the family"))
        })?;
        terminal_of[j] = match terminals.iter().position(|&t| t == x) {
            Some(k) => k,
            None => {
                terminals.push(x);
                terminals.len() - 1
            }
        };
    }
    let (dist0, _) = bfs(&adj, 0);
    if dist0.contains(&usize::MAX) {
        return Err(Error::Precondition("family is not connected".into()));
    }

    let pieces = if terminals.len() == 1 {
        let member = adj[terminals[0]][0] - np;
        let spanned = SpannedSet::new(family[member].clone(), poles)?;
        vec![SpanningPiece {
            member,
            spanned,
            pole_points: vec![poles[0]],
        }]
    } else {
        let dists: Vec<Vec<usize>> = terminals.iter().map(|&t| bfs(&adj, t).0).collect();
        let centre = (0..adj.len())
            .min_by_key(|&x| (dists.iter().map(|d| d[x]).sum::<usize>(), x))
            .expect("graph is non-empty");
        let (_, parent) = bfs(&adj, centre);
        let mut kept = vec![false; adj.len()];
        for &t in &terminals {
            let mut x = t;
            while !kept[x] {
                kept[x] = true;
                if x == centre {
                    break;
                }
                x = parent[x];
            }
        }
        let mut tree_adj: Vec<Vec<usize>> = vec![Vec::new(); adj.len()];
        for x in 0..adj.len() {
            if kept[x] && x != centre {
                tree_adj[x].push(parent[x]);
                tree_adj[parent[x]].push(x);
            }
        }
        // Drop non-terminal leaves; only the centre can be one.
        let mut x = centre;
        while kept[x] && tree_adj[x].len() == 1 && !terminals.contains(&x) {
            kept[x] = false;
            let y = tree_adj[x].pop().expect("one neighbour");
            tree_adj[y].retain(|&z| z != x);
            x = y;
        }
        let toward: Vec<Vec<usize>> = terminals.iter().map(|&t| bfs(&tree_adj, t).1).collect();
        let mut pieces = Vec::new();
        for x in np..adj.len() {
            if !kept[x] {
                continue;
            }
            let member = x - np;
            let mut member_poles = [poles[0]; 3];
            for j in 0..3 {
                member_poles[j] = points[toward[terminal_of[j]][x]];
            }
            let mut pole_points: Vec<P> = tree_adj[x].iter().map(|&y| points[y]).collect();
            pole_points.sort();
            let spanned = SpannedSet::new(family[member].clone(), member_poles)?;
            pieces.push(SpanningPiece {
                member,
                spanned,
                pole_points,
            });
        }
        pieces
    };

    let total: i64 = pieces.iter().map(|p| p.spanned.span()).sum();
    if total != target.span() {
        return Err(Error::Invariant(format!(
            "pieces span {total}, target spans {}",
            target.span()
        )));
    }
    let used: Vec<Vec<P>> = pieces.iter().map(|p| p.pole_points.clone()).collect();
    if !is_minimal_connecting(&used, &poles) {
        return Err(Error::Invariant(
            "pole point sets are not a minimal connecting system".into(),
        ));
    }
    Ok(pieces)
}

/// Whether some connected component of the intersection graph of `sets`
/// covers every point of `poles`.
pub fn connects(sets: &[Vec<P>], poles: &[P]) -> bool {
    let mut uf = UnionFind::new(sets.len());
    let mut owner: HashMap<P, usize> = HashMap::new();
    for (i, s) in sets.iter().enumerate() {
        for p in s {
            if let Some(&j) = owner.get(p) {
                uf.union(i, j);
            } else {
                owner.insert(*p, i);
            }
        }
    }
    let mut root_of_pole = None;
    for pole in poles {
        let Some(&i) = owner.get(pole) else {
            return false;
        };
        let r = uf.find(i);
        match root_of_pole {
            None => root_of_pole = Some(r),
            Some(r0) if r0 != r => return false,
            _ => {}
        }
    }
    true
}

/// Connecting, and no longer connecting once any single set is dropped.
pub fn is_minimal_connecting(sets: &[Vec<P>], poles: &[P]) -> bool {
    connects(sets, poles)
        && (0..sets.len()).all(|i| {
            let rest: Vec<Vec<P>> = sets
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, s)| s.clone())
                .collect();
            !connects(&rest, poles)
        })
}

#[derive(Debug, Clone)]
struct Unprocessed {
    spanned: SpannedSet,
    noise: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PartialEdge {
    kind: EdgeKind,
    ends: [P; 2],
    span: i64,
}

/// What one refinement did, with the quantities its invariants are about.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefinementRecord {
    pub time: i64,
    pub node_size: usize,
    pub node_span: i64,
    /// Sum over the functionals of each one at the matching excuse pole.
    pub excuse_span: i64,
    pub cause_nodes: usize,
    pub cause_edges: usize,
    /// Cause edges carried only by a shared excuse head.
    pub head_only_edges: usize,
    pub spanning_total: i64,
    pub arrows_added: usize,
    pub forks_added: usize,
    pub fork_span_total: i64,
    /// Forks whose spanned set spans less than 3.
    pub forks_below_full_span: usize,
    pub degenerate_nodes: usize,
    /// Change of (spans of unprocessed nodes + spans of forks).
    pub conserved_delta: i64,
    /// Change of (spans of unprocessed nodes + 3 per fork).
    pub span_delta: i64,
}

/// A tree whose nodes are processed points and unprocessed spanned sets.
#[derive(Debug, Clone)]
pub struct PartialExplanationTree {
    root: P,
    unprocessed: BTreeMap<usize, Unprocessed>,
    next_slot: usize,
    pole_owner: HashMap<P, usize>,
    processed: BTreeSet<P>,
    edges: Vec<PartialEdge>,
}

impl PartialExplanationTree {
    /// The one-node tree on `{root}`.
    pub fn new(root: P) -> Self {
        let mut t = Self {
            root,
            unprocessed: BTreeMap::new(),
            next_slot: 0,
            pole_owner: HashMap::new(),
            processed: BTreeSet::new(),
            edges: Vec::new(),
        };
        t.add_unprocessed(create_spanned([root]).expect("one point"), false);
        t
    }

    fn add_unprocessed(&mut self, spanned: SpannedSet, noise: bool) {
        let slot = self.next_slot;
        self.next_slot += 1;
        for p in spanned.poles() {
            self.pole_owner.insert(*p, slot);
        }
        self.unprocessed
            .insert(slot, Unprocessed { spanned, noise });
    }

    pub fn root(&self) -> P {
        self.root
    }

    pub fn unprocessed_count(&self) -> usize {
        self.unprocessed.len()
    }

    pub fn processed(&self) -> &BTreeSet<P> {
        &self.processed
    }

    pub fn arrow_count(&self) -> usize {
        self.edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Arrow)
            .count()
    }

    pub fn fork_count(&self) -> usize {
        self.edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Fork)
            .count()
    }

    /// Spans of the unprocessed nodes plus three per fork.
    pub fn span(&self) -> i64 {
        self.unprocessed
            .values()
            .map(|u| u.spanned.span())
            .sum::<i64>()
            + 3 * self.fork_count() as i64
    }

    /// Spans of the unprocessed nodes plus the spans of the forks.
    pub fn conserved_span(&self) -> i64 {
        self.unprocessed
            .values()
            .map(|u| u.spanned.span())
            .sum::<i64>()
            + self.edges.iter().map(|e| e.span).sum::<i64>()
    }

    pub fn is_finished(&self) -> bool {
        self.unprocessed.values().all(|u| u.noise)
    }

    /// The next node to refine: latest time first, then least point.
    fn next_refinable(&self) -> Option<usize> {
        self.unprocessed
            .iter()
            .filter(|(_, u)| !u.noise)
            .max_by_key(|(_, u)| {
                let first = *u.spanned.base().first().expect("non-empty");
                (first.t, std::cmp::Reverse(first))
            })
            .map(|(&slot, _)| slot)
    }

    fn node_of(&self, p: &P) -> Option<NodeRef> {
        if self.processed.contains(p) {
            Some(NodeRef::Point(*p))
        } else {
            self.pole_owner.get(p).map(|&s| NodeRef::Slot(s))
        }
    }

    /// Checks that nodes and edges form a tree whose edges end at processed
    /// points or at poles of unprocessed nodes.
    pub fn check_tree(&self) -> Result<()> {
        let mut ids: HashMap<NodeRef, usize> = HashMap::new();
        for p in &self.processed {
            let n = ids.len();
            ids.insert(NodeRef::Point(*p), n);
        }
        for (&slot, u) in &self.unprocessed {
            if u.spanned.base().iter().any(|p| self.processed.contains(p)) {
                return Err(Error::Invariant(
                    "an unprocessed node overlaps a processed point".into(),
                ));
            }
            let n = ids.len();
            ids.insert(NodeRef::Slot(slot), n);
        }
        if self.edges.len() + 1 != ids.len() {
            return Err(Error::Invariant(format!(
                "{} edges on {} nodes",
                self.edges.len(),
                ids.len()
            )));
        }
        let mut uf = UnionFind::new(ids.len());
        for e in &self.edges {
            let ends = e
                .ends
                .map(|p| self.node_of(&p).and_then(|r| ids.get(&r).copied()));
            match ends {
                [Some(x), Some(y)] => {
                    if !uf.union(x, y) {
                        return Err(Error::Invariant("edges close a cycle".into()));
                    }
                }
                _ => {
                    return Err(Error::Invariant(format!(
                        "edge {:?} has a dangling end",
                        e.ends
                    )))
                }
            }
        }
        Ok(())
    }

    /// Refines the unprocessed node in `slot`.
    fn refine(
        &mut self,
        slot: usize,
        w: &WorkingGraph,
        clusters: &Clusters,
    ) -> Result<RefinementRecord> {
        let node = self.unprocessed.get(&slot).expect("slot exists").clone();
        let k_poles = *node.spanned.poles();
        let k_points = node.spanned.base().clone();
        let time = k_points.first().expect("non-empty").t;
        let before_conserved = self.conserved_span();
        let before_span = self.span();

        let cause = cause_graph(w, clusters, &k_points)?;
        let components = cause.components();
        if components != 1 {
            return Err(Error::DisconnectedCauseGraph {
                time: cause.time,
                components,
            });
        }

        let mut u_poles = [k_poles[0]; 3];
        for f in Functional::ALL {
            let e = w
                .node(&k_poles[f.index()])
                .and_then(|n| n.excuse.as_ref())
                .expect("checked above");
            u_poles[f.index()] = e.pole(f);
        }
        let excuse_span = span_of_poles(&u_poles);
        if excuse_span != node.spanned.span() + 3 {
            return Err(Error::Invariant(format!(
                "excuse poles span {excuse_span}, node spans {}",
                node.spanned.span()
            )));
        }

        // Spanning tree of the cause graph, one witness fork per tree edge.
        let pos: HashMap<usize, usize> = cause
            .nodes
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i))
            .collect();
        let mut uf = UnionFind::new(cause.nodes.len());
        let mut chosen_forks: Vec<[P; 2]> = Vec::new();
        for e in &cause.edges {
            if uf.union(pos[&e.clusters[0]], pos[&e.clusters[1]]) {
                let witness = e
                    .forks
                    .first()
                    .or_else(|| e.head_pairs.first())
                    .expect("edge has a witness");
                if classify(&witness[0], &witness[1]) != Some(EdgeKind::Fork) {
                    return Err(Error::Invariant(format!(
                        "witness {witness:?} is not a fork"
                    )));
                }
                chosen_forks.push(*witness);
            }
        }
        let head_only_edges = cause.edges.iter().filter(|e| e.forks.is_empty()).count();

        let mut family: Vec<BTreeSet<P>> = cause
            .nodes
            .iter()
            .map(|&c| clusters.get(c).points.iter().copied().collect())
            .collect();
        let cluster_members = family.len();
        family.extend(
            chosen_forks
                .iter()
                .map(|f| f.iter().copied().collect::<BTreeSet<P>>()),
        );
        let union: BTreeSet<P> = family.iter().flatten().copied().collect();
        let target = SpannedSet::new(union, u_poles)?;
        let pieces = spanning(&target, &family)?;
        let spanning_total: i64 = pieces.iter().map(|p| p.spanned.span()).sum();

        // Pole points of K carrying edges to the rest of the tree.
        let mut kept: Vec<P> = Vec::new();
        for e in &self.edges {
            for p in e.ends {
                if k_points.contains(&p) && !kept.contains(&p) {
                    kept.push(p);
                }
            }
        }
        if let Some(p) = kept.iter().find(|p| !k_poles.contains(p)) {
            return Err(Error::Invariant(format!("edge ends at {p}, not a pole")));
        }
        kept.sort_by_key(|p| k_poles.iter().position(|q| q == p));
        if kept.is_empty() {
            kept.push(k_poles[0]);
        }

        self.unprocessed.remove(&slot);
        for p in &k_poles {
            self.pole_owner.remove(p);
        }
        let mut arrows_added = 0;
        for v in &kept {
            let j = k_poles
                .iter()
                .position(|q| q == v)
                .expect("kept points are poles");
            self.processed.insert(*v);
            self.edges.push(PartialEdge {
                kind: EdgeKind::Arrow,
                ends: [*v, u_poles[j]],
                span: 0,
            });
            arrows_added += 1;
        }

        let mut retained_clusters: BTreeSet<usize> = BTreeSet::new();
        let mut forks_added = 0;
        let mut fork_span_total = 0;
        let mut forks_below_full_span = 0;
        let mut attached: BTreeSet<P> = BTreeSet::new();
        for piece in &pieces {
            attached.extend(piece.pole_points.iter().copied());
            if piece.member < cluster_members {
                let c = cause.nodes[piece.member];
                retained_clusters.insert(c);
                let noise = piece.spanned.base().len() == 1
                    && w.node(piece.spanned.base().first().unwrap())
                        .is_some_and(|n| n.noise);
                self.add_unprocessed(piece.spanned.clone(), noise);
            } else {
                let span = piece.spanned.span();
                let f = chosen_forks[piece.member - cluster_members];
                self.edges.push(PartialEdge {
                    kind: EdgeKind::Fork,
                    ends: f,
                    span,
                });
                forks_added += 1;
                fork_span_total += span;
                forks_below_full_span += usize::from(span < 3);
            }
        }
        attached.extend(u_poles);
        let mut degenerate_nodes = 0;
        for p in attached {
            let c = clusters.cluster_of(w, &p).expect("family points are in W");
            if !retained_clusters.contains(&c) {
                let noise = w.node(&p).is_some_and(|n| n.noise);
                self.add_unprocessed(create_spanned([p]).expect("one point"), noise);
                degenerate_nodes += 1;
            }
        }

        self.check_tree()?;
        let record = RefinementRecord {
            time,
            node_size: k_points.len(),
            node_span: node.spanned.span(),
            excuse_span,
            cause_nodes: cause.nodes.len(),
            cause_edges: cause.edges.len(),
            head_only_edges,
            spanning_total,
            arrows_added,
            forks_added,
            fork_span_total,
            forks_below_full_span,
            degenerate_nodes,
            conserved_delta: self.conserved_span() - before_conserved,
            span_delta: self.span() - before_span,
        };
        if record.conserved_delta != 3 {
            return Err(Error::Invariant(format!(
                "refinement changed the conserved span by {}",
                record.conserved_delta
            )));
        }
        Ok(record)
    }

    fn into_tree(self) -> ExplanationTree {
        let mut points: Vec<(P, u8)> = Vec::new();
        points.push((self.root, 0));
        points.extend(
            self.processed
                .iter()
                .filter(|p| **p != self.root)
                .map(|p| (*p, 0)),
        );
        let mut noise_points: Vec<P> = self
            .unprocessed
            .values()
            .map(|u| *u.spanned.base().first().expect("non-empty"))
            .collect();
        noise_points.sort();
        points.extend(noise_points.into_iter().map(|p| (p, 1)));
        let id: HashMap<P, usize> = points
            .iter()
            .enumerate()
            .map(|(i, (p, _))| (*p, i))
            .collect();
        let mut edges: Vec<TreeEdge> = self
            .edges
            .iter()
            .map(|e| {
                let (x, y) = (id[&e.ends[0]], id[&e.ends[1]]);
                TreeEdge {
                    kind: e.kind,
                    ends: [x.min(y), x.max(y)],
                }
            })
            .collect();
        edges.sort();
        ExplanationTree {
            nodes: points
                .into_iter()
                .map(|(point, weight)| TreeNode { point, weight })
                .collect(),
            edges,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum NodeRef {
    Point(P),
    Slot(usize),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub working_nodes: usize,
    pub working_arrows: usize,
    pub working_forks: usize,
    pub clusters: usize,
    pub refinements: Vec<RefinementRecord>,
}

#[derive(Debug, Clone)]
pub struct Explanation {
    pub tree: ExplanationTree,
    pub stats: BuildStats,
}

/// Builds the explanation tree of a deviating non-noise point, checking the
/// tree shape and span accounting after every refinement.
pub fn build_explanation(view: &CoveringView<'_>, root: P) -> Result<Explanation> {
    let w = build_working_graph(view, root)?;
    let clusters = Clusters::build(&w);
    let mut stats = BuildStats {
        working_nodes: w.len(),
        working_arrows: w.arrows().count(),
        working_forks: w.forks().len(),
        clusters: clusters.len(),
        refinements: Vec::new(),
    };
    let mut partial = PartialExplanationTree::new(root);
    while let Some(slot) = partial.next_refinable() {
        stats.refinements.push(partial.refine(slot, &w, &clusters)?);
    }
    Ok(Explanation {
        tree: partial.into_tree(),
        stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TreeNode {
    pub point: P,
    /// 1 for noise points, 0 otherwise.
    pub weight: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TreeEdge {
    pub kind: EdgeKind,
    pub ends: [usize; 2],
}

/// A finished explanation tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplanationTree {
    nodes: Vec<TreeNode>,
    edges: Vec<TreeEdge>,
}

impl ExplanationTree {
    /// Assembles a tree without checking it; see [`verify_explanation`].
    pub fn new(nodes: Vec<TreeNode>, edges: Vec<TreeEdge>) -> Self {
        Self { nodes, edges }
    }

    pub fn root(&self) -> Option<P> {
        self.nodes.first().map(|n| n.point)
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[TreeEdge] {
        &self.edges
    }

    pub fn weight(&self) -> usize {
        self.nodes.iter().filter(|n| n.weight == 1).count()
    }

    pub fn arrow_count(&self) -> usize {
        self.edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Arrow)
            .count()
    }

    pub fn fork_count(&self) -> usize {
        self.edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Fork)
            .count()
    }

    /// Lines `id a b u t weight`, then `arrow i j` / `fork i j`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# id a b u t weight; node 0 is the root\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let p = n.point;
            s.push_str(&format!(
                "{i} {} {} {} {} {}\n",
                p.a, p.b, p.u, p.t, n.weight
            ));
        }
        for e in &self.edges {
            s.push_str(&format!(
                "{} {} {}\n",
                e.kind.as_str(),
                e.ends[0],
                e.ends[1]
            ));
        }
        s
    }
}

impl fmt::Display for ExplanationTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl FromStr for ExplanationTree {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for (lineno, raw) in s.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Parse(format!("line {}: {what}", lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            let kind = match fields[0] {
                "arrow" => Some(EdgeKind::Arrow),
                "fork" => Some(EdgeKind::Fork),
                _ => None,
            };
            if let Some(kind) = kind {
                if fields.len() != 3 {
                    return Err(bad("an edge needs two node ids"));
                }
                let x: usize = fields[1].parse().map_err(|_| bad("bad node id"))?;
                let y: usize = fields[2].parse().map_err(|_| bad("bad node id"))?;
                edges.push(TreeEdge { kind, ends: [x, y] });
            } else {
                if fields.len() != 6 {
                    return Err(bad("a node needs id, four coordinates and a weight"));
                }
                let nums: Vec<i64> = fields
                    .iter()
                    .map(|f| f.parse::<i64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("non-integer field"))?;
                if nums[0] != nodes.len() as i64 {
                    return Err(bad("node ids must be 0, 1, 2, ... in order"));
                }
                if !(0..=1).contains(&nums[5]) {
                    return Err(bad("weight must be 0 or 1"));
                }
                nodes.push(TreeNode {
                    point: SpaceTimePoint::new(nums[1], nums[2], nums[3], nums[4]),
                    weight: nums[5] as u8,
                });
            }
        }
        if let Some(e) = edges
            .iter()
            .find(|e| e.ends.iter().any(|&i| i >= nodes.len()))
        {
            return Err(Error::Parse(format!(
                "edge {:?} refers to a missing node",
                e.ends
            )));
        }
        Ok(Self { nodes, edges })
    }
}

/// The properties the verifier checks, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Clause {
    /// Distinct nodes, valid edge ends, connected and acyclic.
    Tree,
    /// Every edge is an arrow or fork of its declared kind, and no arrow
    /// leaves a noise point downward.
    Edges,
    /// Weight 1 exactly on noise points; the root has weight 0.
    Weights,
    /// Contracting the arrows leaves a tree on the weight-1 nodes, one per
    /// class, joined by the forks.
    Contraction,
    /// At most `3(n-1)` arrows.
    ArrowBound,
    /// At most `4(n-1)` edges.
    EdgeBound,
}

impl Clause {
    pub const ALL: [Clause; 6] = [
        Clause::Tree,
        Clause::Edges,
        Clause::Weights,
        Clause::Contraction,
        Clause::ArrowBound,
        Clause::EdgeBound,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub nodes: usize,
    pub weight: usize,
    pub arrows: usize,
    pub forks: usize,
    pub failures: Vec<(Clause, String)>,
}

impl Certificate {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn failed(&self, clause: Clause) -> bool {
        self.failures.iter().any(|(c, _)| *c == clause)
    }
}

/// Checks a tree against the noise set, independently of how it was built.
pub fn verify_explanation(tree: &ExplanationTree, in_noise: impl Fn(&P) -> bool) -> Certificate {
    let n_nodes = tree.nodes.len();
    let mut cert = Certificate {
        nodes: n_nodes,
        weight: tree.weight(),
        arrows: tree.arrow_count(),
        forks: tree.fork_count(),
        failures: Vec::new(),
    };
    let mut fail = |c: Clause, msg: String| cert.failures.push((c, msg));

    let mut tree_ok = n_nodes > 0;
    if !tree_ok {
        fail(Clause::Tree, "no nodes".into());
    }
    let distinct: BTreeSet<P> = tree.nodes.iter().map(|n| n.point).collect();
    if distinct.len() != n_nodes {
        tree_ok = false;
        fail(Clause::Tree, "repeated node".into());
    }
    if tree
        .edges
        .iter()
        .any(|e| e.ends.iter().any(|&i| i >= n_nodes) || e.ends[0] == e.ends[1])
    {
        tree_ok = false;
        fail(Clause::Tree, "edge with a missing or repeated end".into());
    } else if tree_ok {
        if tree.edges.len() + 1 != n_nodes {
            tree_ok = false;
            fail(
                Clause::Tree,
                format!("{} edges on {n_nodes} nodes", tree.edges.len()),
            );
        } else {
            let mut uf = UnionFind::new(n_nodes);
            if !tree.edges.iter().all(|e| uf.union(e.ends[0], e.ends[1])) {
                tree_ok = false;
                fail(Clause::Tree, "cycle".into());
            }
        }
    }

    for e in &tree.edges {
        let Some([p, q]) = e
            .ends
            .iter()
            .map(|&i| tree.nodes.get(i).map(|n| n.point))
            .collect::<Option<Vec<_>>>()
            .map(|v| [v[0], v[1]])
        else {
            continue;
        };
        if classify(&p, &q) != Some(e.kind) {
            fail(
                Clause::Edges,
                format!("{p} -- {q} is not a {}", e.kind.as_str()),
            );
        } else if e.kind == EdgeKind::Arrow {
            let upper = if p.t > q.t { p } else { q };
            if in_noise(&upper) {
                fail(
                    Clause::Edges,
                    format!("arrow leaves the noise point {upper} downward"),
                );
            }
        }
    }

    for (i, n) in tree.nodes.iter().enumerate() {
        if (n.weight == 1) != in_noise(&n.point) {
            fail(
                Clause::Weights,
                format!("node {i} at {} has weight {}", n.point, n.weight),
            );
        }
    }
    if tree.nodes.first().is_some_and(|r| r.weight != 0) {
        fail(Clause::Weights, "the root has weight 1".into());
    }

    let n = cert.weight;
    if tree_ok {
        let mut uf = UnionFind::new(n_nodes);
        for e in tree.edges.iter().filter(|e| e.kind == EdgeKind::Arrow) {
            uf.union(e.ends[0], e.ends[1]);
        }
        let mut heavy: HashMap<usize, usize> = HashMap::new();
        let mut classes: BTreeSet<usize> = BTreeSet::new();
        for (i, node) in tree.nodes.iter().enumerate() {
            let r = uf.find(i);
            classes.insert(r);
            if node.weight == 1 {
                *heavy.entry(r).or_default() += 1;
            }
        }
        let bad = classes
            .iter()
            .filter(|r| heavy.get(r).copied().unwrap_or(0) != 1)
            .count();
        if bad > 0 {
            fail(
                Clause::Contraction,
                format!("{bad} arrow classes without exactly one weight-1 node"),
            );
        } else if cert.forks + 1 != n {
            fail(
                Clause::Contraction,
                format!("{} forks join {n} classes", cert.forks),
            );
        }
        // With arrows contracted the forks join the classes without a cycle
        // because the uncontracted graph is a tree.
    } else {
        fail(
            Clause::Contraction,
            "not checked: the input is not a tree".into(),
        );
    }

    let limit = 3 * n.saturating_sub(1);
    if cert.arrows > limit || n == 0 {
        fail(
            Clause::ArrowBound,
            format!("{} arrows, weight {n}", cert.arrows),
        );
    }
    if cert.arrows + cert.forks > 4 * n.saturating_sub(1) || n == 0 {
        fail(
            Clause::EdgeBound,
            format!("{} edges, weight {n}", cert.arrows + cert.forks),
        );
    }
    cert
}
