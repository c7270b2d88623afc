//! Rooted trees with 0/1 node weights, cut into lighter pieces without
//! raising the ratio of edges to weight, and the count of weighted subtrees
//! of a bounded-degree graph.

use std::collections::VecDeque;

use num_bigint::BigUint;
use num_rational::Ratio;
use rand::Rng;

use crate::error::{Error, Result};
use crate::explanation::ExplanationTree;

/// A rooted tree with node 0 as the root. `labels` name each node in
/// whatever tree it was cut from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightedTree {
    parent: Vec<Option<usize>>,
    weight: Vec<u8>,
    labels: Vec<usize>,
    children: Vec<Vec<usize>>,
}

impl WeightedTree {
    /// `parent[0]` must be `None` and every other node must reach 0 by
    /// following parents. The root's weight must be 0.
    pub fn new(parent: Vec<Option<usize>>, weight: Vec<u8>) -> Result<Self> {
        let labels = (0..parent.len()).collect();
        Self::with_labels(parent, weight, labels)
    }

    fn with_labels(
        parent: Vec<Option<usize>>,
        weight: Vec<u8>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let n = parent.len();
        if n == 0 || weight.len() != n || labels.len() != n {
            return Err(Error::Precondition(
                "a tree needs matching, non-empty node lists".into(),
            ));
        }
        if parent[0].is_some() || parent[1..].iter().any(|p| p.is_none_or(|q| q >= n)) {
            return Err(Error::Precondition(
                "node 0 alone must lack a parent".into(),
            ));
        }
        if weight.iter().any(|&x| x > 1) {
            return Err(Error::Precondition("weights are 0 or 1".into()));
        }
        if weight[0] != 0 {
            return Err(Error::Precondition("the root has weight 0".into()));
        }
        let mut children = vec![Vec::new(); n];
        for (v, p) in parent.iter().enumerate().skip(1) {
            children[p.expect("checked")].push(v);
        }
        let tree = Self {
            parent,
            weight,
            labels,
            children,
        };
        if tree.preorder().len() != n {
            return Err(Error::Precondition("parent links contain a cycle".into()));
        }
        Ok(tree)
    }

    /// Builds a rooted tree from undirected edges, rooted at `root`.
    pub fn from_edges(
        n: usize,
        edges: &[(usize, usize)],
        weight: Vec<u8>,
        root: usize,
    ) -> Result<Self> {
        if root >= n || edges.len() + 1 != n {
            return Err(Error::Precondition(format!(
                "{} edges cannot span {n} nodes",
                edges.len()
            )));
        }
        let mut adj = vec![Vec::new(); n];
        for &(x, y) in edges {
            if x >= n || y >= n {
                return Err(Error::Precondition("edge end out of range".into()));
            }
            adj[x].push(y);
            adj[y].push(x);
        }
        // Renumber in BFS order so that the root becomes node 0.
        let mut order = vec![root];
        let mut new_id = vec![usize::MAX; n];
        new_id[root] = 0;
        let mut parent = vec![None];
        let mut i = 0;
        while i < order.len() {
            let v = order[i];
            for &y in &adj[v] {
                if new_id[y] == usize::MAX {
                    new_id[y] = order.len();
                    order.push(y);
                    parent.push(Some(new_id[v]));
                }
            }
            i += 1;
        }
        if order.len() != n {
            return Err(Error::Precondition("edges do not connect the nodes".into()));
        }
        let w = order.iter().map(|&v| weight[v]).collect();
        Self::with_labels(parent, w, order)
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        self.parent[v]
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    pub fn node_weight(&self, v: usize) -> u8 {
        self.weight[v]
    }

    pub fn label(&self, v: usize) -> usize {
        self.labels[v]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn edges(&self) -> usize {
        self.len() - 1
    }

    pub fn weight(&self) -> usize {
        self.weight.iter().map(|&x| x as usize).sum()
    }

    /// Edges per unit of weight; `None` for weight 0.
    pub fn redundancy(&self) -> Option<Ratio<u64>> {
        let w = self.weight() as u64;
        (w > 0).then(|| Ratio::new(self.edges() as u64, w))
    }

    fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut stack = vec![0];
        while let Some(v) = stack.pop() {
            out.push(v);
            if out.len() > self.len() {
                break;
            }
            stack.extend(self.children[v].iter().rev());
        }
        out
    }

    /// Weight of each node's full subtree, the node included.
    fn subtree_weights(&self) -> Vec<usize> {
        let mut below: Vec<usize> = self.weight.iter().map(|&x| x as usize).collect();
        for v in self.preorder().into_iter().rev() {
            if let Some(p) = self.parent[v] {
                below[p] += below[v];
            }
        }
        below
    }

    /// The subtree induced by `keep`, rooted at `root`, whose weight is
    /// cleared. `keep` must be connected and contain `root`.
    fn induced(&self, keep: &[bool], root: usize) -> WeightedTree {
        let mut parent = vec![None];
        let mut weight = vec![0];
        let mut labels = vec![self.labels[root]];
        let mut queue = VecDeque::from([(root, 0usize)]);
        let mut seen = vec![false; self.len()];
        seen[root] = true;
        while let Some((v, id)) = queue.pop_front() {
            let nbrs = self.children[v].iter().copied().chain(self.parent[v]);
            for y in nbrs {
                if keep[y] && !seen[y] {
                    seen[y] = true;
                    parent.push(Some(id));
                    weight.push(self.weight[y]);
                    labels.push(self.labels[y]);
                    queue.push_back((y, parent.len() - 1));
                }
            }
        }
        WeightedTree::with_labels(parent, weight, labels).expect("induced subtree is a tree")
    }

    fn descendants(&self, v: usize, mark: &mut [bool]) {
        let mut stack = vec![v];
        while let Some(x) = stack.pop() {
            mark[x] = true;
            stack.extend(&self.children[x]);
        }
    }
}

fn less_redundant(a: &WeightedTree, b: &WeightedTree) -> bool {
    // a.edges / a.weight <= b.edges / b.weight
    a.edges() * b.weight() <= b.edges() * a.weight()
}

/// A subtree of weight in `(w/3, 2w/3]` whose redundancy does not exceed
/// that of `tree`, for a tree of weight `w > 3`.
pub fn one_cut(tree: &WeightedTree) -> Result<WeightedTree> {
    let w = tree.weight();
    if w <= 3 {
        return Err(Error::Precondition(format!(
            "cutting needs weight above 3, got {w}"
        )));
    }
    // "weight > w/3" is 3 * weight > w throughout.
    let heavy = |x: usize| 3 * x > w;
    let below = tree.subtree_weights();
    let strict = |v: usize| below[v] - tree.weight[v] as usize;

    let mut v = 0;
    while let Some(&c) = tree.children[v].iter().find(|&&c| heavy(strict(c))) {
        v = c;
    }
    let mut chosen: Vec<usize> = match tree.children[v].iter().find(|&&c| heavy(below[c])) {
        // A weight-1 child whose own subtree tips the balance: keep it alone.
        Some(&c) => vec![c],
        None => {
            let mut kept: Vec<usize> = tree.children[v].clone();
            let mut total = strict(v);
            kept.retain(|&c| {
                if heavy(total - below[c]) {
                    total -= below[c];
                    false
                } else {
                    true
                }
            });
            kept
        }
    };
    chosen.sort_unstable();

    let part = |subtrees: &[usize]| {
        let mut keep = vec![false; tree.len()];
        for &c in subtrees {
            tree.descendants(c, &mut keep);
        }
        keep[v] = true;
        keep
    };
    let first_keep = part(&chosen);
    let first = tree.induced(&first_keep, v);
    let w1 = first.weight();
    debug_assert!(heavy(w1) && 3 * w1 <= 2 * w);

    let mut rest_keep: Vec<bool> = first_keep.iter().map(|&k| !k).collect();
    rest_keep[v] = true;
    let rest = tree.induced(&rest_keep, 0);

    if heavy(rest.weight()) {
        return Ok(if less_redundant(&first, &rest) {
            first
        } else {
            rest
        });
    }
    // The first part weighs exactly 2w/3 and consists of two branches of
    // weight w/3 each; the rest weighs w/3. Any two of the three pieces
    // form a subtree of weight 2w/3, and the best of those three pairs has
    // redundancy at most that of the whole tree.
    debug_assert_eq!(chosen.len(), 2);
    let (x, y) = (chosen[0], chosen[1]);
    let mut with_x = rest_keep.clone();
    tree.descendants(x, &mut with_x);
    let mut with_y = rest_keep;
    tree.descendants(y, &mut with_y);
    let candidates = [first, tree.induced(&with_x, 0), tree.induced(&with_y, 0)];
    let best = candidates
        .into_iter()
        .reduce(|a, b| if less_redundant(&a, &b) { a } else { b })
        .expect("three candidates");
    Ok(best)
}

/// A subtree of weight in `(k/3, k]` with redundancy at most that of
/// `tree`, obtained by cutting repeatedly. Requires `4 <= k < weight`.
pub fn separate(tree: &WeightedTree, k: usize) -> Result<WeightedTree> {
    let w = tree.weight();
    if k >= w {
        return Err(Error::Precondition(format!(
            "k = {k} must be below the weight {w}"
        )));
    }
    if k < 4 {
        return Err(Error::Precondition(format!(
            "k = {k} is below 4, where repeated cutting is not guaranteed to land in (k/3, k]"
        )));
    }
    let mut current = tree.clone();
    while current.weight() > k {
        current = one_cut(&current)?;
    }
    Ok(current)
}

/// Number of subtrees of `adj` with exactly `k` edges that contain `root`,
/// times the `2^(k+1)` ways of weighting their nodes.
pub fn count_weighted_subtrees(adj: &[Vec<usize>], root: usize, k: usize) -> Result<BigUint> {
    if root >= adj.len() {
        return Err(Error::Precondition("root outside the graph".into()));
    }
    let max_degree = adj.iter().map(Vec::len).max().unwrap_or(0);
    if k > 8 && max_degree > 6 {
        return Err(Error::TooLarge(format!(
            "k = {k} on a graph of degree {max_degree}"
        )));
    }
    let trees = count_subtrees(adj, root, k);
    Ok(BigUint::from(trees) << (k + 1))
}

/// Unweighted count: each tree arises from exactly one sequence of
/// include/exclude decisions on the frontier edges taken in order.
pub fn count_subtrees(adj: &[Vec<usize>], root: usize, k: usize) -> u128 {
    fn grow(
        adj: &[Vec<usize>],
        in_tree: &mut [bool],
        frontier: &[(usize, usize)],
        left: usize,
    ) -> u128 {
        if left == 0 {
            return 1;
        }
        let Some((&(_, y), rest)) = frontier.split_first() else {
            return 0;
        };
        if in_tree[y] {
            return grow(adj, in_tree, rest, left);
        }
        in_tree[y] = true;
        let mut extended = rest.to_vec();
        extended.extend(adj[y].iter().filter(|&&z| !in_tree[z]).map(|&z| (y, z)));
        let with = grow(adj, in_tree, &extended, left - 1);
        in_tree[y] = false;
        with + grow(adj, in_tree, rest, left)
    }
    let mut in_tree = vec![false; adj.len()];
    in_tree[root] = true;
    let frontier: Vec<(usize, usize)> = adj[root].iter().map(|&y| (root, y)).collect();
    grow(adj, &mut in_tree, &frontier, k)
}

/// `2r (2r^2)^k`.
pub fn counting_bound(r: u64, k: u32) -> BigUint {
    let r = BigUint::from(r);
    let base = BigUint::from(2u8) * &r * &r;
    BigUint::from(2u8) * r * base.pow(k)
}

/// The explanation tree as a weighted tree rooted at its root.
pub fn from_explanation(tree: &ExplanationTree) -> Result<WeightedTree> {
    let edges: Vec<(usize, usize)> = tree
        .edges()
        .iter()
        .map(|e| (e.ends[0], e.ends[1]))
        .collect();
    let weight = tree.nodes().iter().map(|n| n.weight).collect();
    WeightedTree::from_edges(tree.nodes().len(), &edges, weight, 0)
}

/// A random tree on `n` nodes: each node hangs from a uniformly chosen
/// earlier node and has weight 1 with probability `p` (the root excepted).
pub fn random_tree<R: Rng + ?Sized>(rng: &mut R, n: usize, p: f64) -> WeightedTree {
    let mut parent = vec![None];
    let mut weight = vec![0];
    for v in 1..n.max(1) {
        parent.push(Some(rng.gen_range(0..v)));
        weight.push(u8::from(rng.gen_bool(p)));
    }
    WeightedTree::new(parent, weight).expect("random parent links form a tree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn path(weights: &[u8]) -> WeightedTree {
        let parent = (0..weights.len()).map(|v| v.checked_sub(1)).collect();
        WeightedTree::new(parent, weights.to_vec()).unwrap()
    }

    /// Every connected node subset, as a weight and edge count, with the
    /// weight of its topmost node dropped.
    fn all_subtrees(t: &WeightedTree) -> Vec<(usize, usize)> {
        let n = t.len();
        assert!(n <= 16);
        let mut out = Vec::new();
        for mask in 1u32..(1 << n) {
            let nodes: Vec<usize> = (0..n).filter(|&v| mask >> v & 1 == 1).collect();
            let inner = nodes
                .iter()
                .filter(|&&v| t.parent(v).is_some_and(|p| mask >> p & 1 == 1))
                .count();
            if inner + 1 != nodes.len() {
                continue;
            }
            let top = nodes
                .iter()
                .find(|&&v| t.parent(v).is_none_or(|p| mask >> p & 1 == 0))
                .unwrap();
            let w: usize = nodes
                .iter()
                .filter(|&&v| v != *top)
                .map(|&v| t.node_weight(v) as usize)
                .sum();
            out.push((w, inner));
        }
        out
    }

    fn check_cut(t: &WeightedTree) {
        let w = t.weight();
        let cut = one_cut(t).unwrap();
        let w1 = cut.weight();
        assert!(3 * w1 > w && 3 * w1 <= 2 * w, "w = {w}, w1 = {w1}");
        assert!(less_redundant(&cut, t));
        let mut labels = cut.labels().to_vec();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels.len(), cut.len());
    }

    #[test]
    fn path_example() {
        let t = path(&[0, 1, 1, 1, 1]);
        assert_eq!(t.redundancy(), Some(Ratio::new(1, 1)));
        let cut = one_cut(&t).unwrap();
        assert_eq!(cut.weight(), 2);
        assert!(cut.redundancy().unwrap() <= Ratio::new(1, 1));
        assert!(all_subtrees(&t).iter().any(|&(w, e)| w == 2 && e <= 2));
    }

    #[test]
    fn star_example() {
        let t = WeightedTree::new(
            vec![None, Some(0), Some(0), Some(0), Some(0)],
            vec![0, 1, 1, 1, 1],
        )
        .unwrap();
        let cut = one_cut(&t).unwrap();
        assert_eq!(cut.weight(), 2);
        assert_eq!(cut.edges(), 2);
        assert!(all_subtrees(&t)
            .iter()
            .filter(|&&(w, _)| 3 * w > 4 && 3 * w <= 8)
            .all(|&(w, _)| w == 2));
    }

    #[test]
    fn balanced_three_way_split() {
        // Root with a 0-weight child holding two branches of weight 2 each,
        // and a third branch of weight 2 under the root: w = 6.
        let parent = vec![
            None,
            Some(0),
            Some(1),
            Some(2),
            Some(1),
            Some(4),
            Some(0),
            Some(6),
            Some(7),
        ];
        let weight = vec![0, 0, 1, 1, 1, 1, 0, 1, 1];
        let t = WeightedTree::new(parent, weight).unwrap();
        check_cut(&t);
        assert_eq!(one_cut(&t).unwrap().weight(), 4);
    }

    #[test]
    fn small_weights_are_rejected() {
        assert!(one_cut(&path(&[0, 1, 1, 1])).is_err());
        let t = path(&[0, 1, 1, 1, 1, 1, 1]);
        assert!(separate(&t, 3).is_err());
        assert!(separate(&t, 6).is_err());
        let s = separate(&t, 5).unwrap();
        assert!(3 * s.weight() > 5 && s.weight() <= 5);
    }

    #[test]
    fn random_cuts_satisfy_the_window() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..3000 {
            let n = rng.gen_range(5..40);
            let density = rng.gen_range(0.2..1.0);
            let t = random_tree(&mut rng, n, density);
            if t.weight() > 3 {
                check_cut(&t);
            }
            let w = t.weight();
            if w > 4 {
                let k = rng.gen_range(4..w);
                let s = separate(&t, k).unwrap();
                assert!(3 * s.weight() > k && s.weight() <= k);
                assert!(less_redundant(&s, &t));
            }
        }
    }

    #[test]
    fn exhaustive_existence_on_small_trees() {
        let mut rng = StdRng::seed_from_u64(8);
        for _ in 0..300 {
            let n = rng.gen_range(5..12);
            let t = random_tree(&mut rng, n, 0.7);
            let w = t.weight();
            if w <= 3 {
                continue;
            }
            let found = all_subtrees(&t)
                .into_iter()
                .any(|(w1, e1)| 3 * w1 > w && 3 * w1 <= 2 * w && e1 * w <= t.edges() * w1);
            assert!(found);
        }
    }

    #[test]
    fn subtree_counts() {
        let path3 = vec![vec![1], vec![0, 2], vec![1]];
        assert_eq!(count_subtrees(&path3, 1, 1), 2);
        assert_eq!(count_subtrees(&path3, 1, 0), 1);
        assert_eq!(count_subtrees(&path3, 0, 2), 1);
        assert_eq!(
            count_weighted_subtrees(&path3, 1, 1).unwrap(),
            BigUint::from(8u8)
        );
        assert!(BigUint::from(8u8) <= counting_bound(2, 1));

        // Triangle: 3 spanning trees, each containing the root.
        let tri = vec![vec![1, 2], vec![0, 2], vec![0, 1]];
        assert_eq!(count_subtrees(&tri, 0, 2), 3);
        // K4 has 16 spanning trees.
        let k4: Vec<Vec<usize>> = (0..4)
            .map(|v| (0..4).filter(|&u| u != v).collect())
            .collect();
        assert_eq!(count_subtrees(&k4, 0, 3), 16);
        let big: Vec<Vec<usize>> = (0..8)
            .map(|v| (0..8).filter(|&u| u != v).collect())
            .collect();
        assert!(count_weighted_subtrees(&big, 0, 9).is_err());
    }

    #[test]
    fn bound_values() {
        assert_eq!(counting_bound(24, 0), BigUint::from(48u8));
        assert_eq!(counting_bound(24, 1), BigUint::from(55296u32));
        assert_eq!(counting_bound(2, 1), BigUint::from(32u8));
    }

    #[test]
    fn edges_are_rerooted() {
        let t =
            WeightedTree::from_edges(4, &[(0, 1), (1, 2), (1, 3)], vec![1, 0, 1, 1], 1).unwrap();
        assert_eq!(t.label(0), 1);
        assert_eq!(t.weight(), 3);
        assert!(WeightedTree::from_edges(3, &[(0, 1), (1, 2)], vec![1, 0, 0], 0).is_err());
        assert!(WeightedTree::new(vec![None, Some(2), Some(1)], vec![0, 0, 0]).is_err());
    }
}
