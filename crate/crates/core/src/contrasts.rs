//! Independent contrasts: tip differences along pairwise edge-disjoint
//! paths, which are independent under the OU model with variance
//! `2γ(1 − e^{−2αT_C})`.
//!
//! Both selection procedures work on a binary resolution of the tree: a
//! node with `k` children becomes a left comb of `k − 1` nodes of the same
//! age joined by zero-length edges, children taken youngest first. Every
//! real edge of the tree maps to exactly one edge of the resolution, so
//! disjoint paths there are disjoint in the tree.

use std::collections::HashMap;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::optimize::brent_root;
use crate::tree::{NodeId, Tree, DEFAULT_ULTRAMETRIC_TOL};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Contrast {
    /// Tip indices (into [`Tree::tips`]).
    pub tip_i: usize,
    pub tip_j: usize,
    pub label_i: String,
    pub label_j: String,
    /// Most recent common ancestor of the two tips.
    pub node: NodeId,
    pub age: f64,
    /// Nodes whose incoming edge lies on the path, sorted.
    pub path: Vec<NodeId>,
    pub path_length: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ContrastSet {
    pub contrasts: Vec<Contrast>,
}

impl ContrastSet {
    pub fn len(&self) -> usize {
        self.contrasts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contrasts.is_empty()
    }

    pub fn ages(&self) -> Vec<f64> {
        self.contrasts.iter().map(|c| c.age).collect()
    }

    /// True when no edge is shared by two paths.
    pub fn paths_disjoint(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.contrasts.iter().flat_map(|c| &c.path).all(|&e| seen.insert(e))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tip_i", "tip_j", "T_C", "path_length"])?;
        for c in &self.contrasts {
            w.write_record([
                c.label_i.clone(),
                c.label_j.clone(),
                format!("{}", c.age),
                format!("{}", c.path_length),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Age interval with independently open or closed ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgeWindow {
    pub lo: f64,
    pub hi: f64,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl AgeWindow {
    pub fn open(lo: f64, hi: f64) -> AgeWindow {
        AgeWindow {
            lo,
            hi,
            lo_closed: false,
            hi_closed: false,
        }
    }

    pub fn closed(lo: f64, hi: f64) -> AgeWindow {
        AgeWindow {
            lo,
            hi,
            lo_closed: true,
            hi_closed: true,
        }
    }

    pub fn contains(&self, age: f64) -> bool {
        let above = if self.lo_closed { age >= self.lo } else { age > self.lo };
        let below = if self.hi_closed { age <= self.hi } else { age < self.hi };
        above && below
    }
}

#[derive(Debug, Clone)]
struct BNode {
    children: Option<[usize; 2]>,
    parent: Option<usize>,
    age: f64,
    tip: Option<usize>,
    /// Original node this binary node belongs to.
    orig: NodeId,
    /// Whether the edge above carries the original edge above `orig`.
    real_edge: bool,
    /// Rank of the smallest descendant tip label.
    min_rank: usize,
    /// `min_rank` of the whole clade of `orig`; shared by a multifurcation's
    /// binary nodes.
    orig_rank: usize,
}

struct Binary {
    nodes: Vec<BNode>,
    root: usize,
    labels: Vec<String>,
}

impl Binary {
    fn new(tree: &Tree) -> Result<Binary> {
        tree.require_ultrametric(DEFAULT_ULTRAMETRIC_TOL)?;
        let ages = tree.node_ages();
        let tip_index = tree.tip_index();
        let labels = tree.tip_labels();
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.sort_by(|&a, &b| labels[a].cmp(&labels[b]));
        let mut rank = vec![0; labels.len()];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }

        let mut nodes: Vec<BNode> = Vec::with_capacity(2 * tree.len());
        let mut top = vec![usize::MAX; tree.len()];
        for id in tree.postorder() {
            if let Some(i) = tip_index[id] {
                top[id] = nodes.len();
                nodes.push(BNode {
                    children: None,
                    parent: None,
                    age: 0.0,
                    tip: Some(i),
                    orig: id,
                    real_edge: true,
                    min_rank: rank[i],
                    orig_rank: rank[i],
                });
                continue;
            }
            let mut kids: Vec<usize> = tree.children(id).iter().map(|&c| top[c]).collect();
            kids.sort_by(|&a, &b| {
                nodes[a]
                    .age
                    .total_cmp(&nodes[b].age)
                    .then(nodes[a].min_rank.cmp(&nodes[b].min_rank))
            });
            let mut acc = kids[0];
            if kids.len() == 1 {
                // A unary node adds nothing to the binary resolution.
                top[id] = acc;
                continue;
            }
            for &k in &kids[1..] {
                let b = nodes.len();
                let min_rank = nodes[acc].min_rank.min(nodes[k].min_rank);
                nodes.push(BNode {
                    children: Some([acc, k]),
                    parent: None,
                    age: ages[id],
                    tip: None,
                    orig: id,
                    real_edge: false,
                    min_rank,
                    orig_rank: 0,
                });
                nodes[acc].parent = Some(b);
                nodes[k].parent = Some(b);
                acc = b;
            }
            nodes[acc].real_edge = true;
            top[id] = acc;
        }
        for b in 0..nodes.len() {
            nodes[b].orig_rank = nodes[top[nodes[b].orig]].min_rank;
        }
        let root = top[tree.root()];
        Ok(Binary { nodes, root, labels })
    }

    // Original edges on the path from binary node `from` up to `to`.
    fn path_up(&self, tree: &Tree, mut from: usize, to: usize, out: &mut Vec<NodeId>, length: &mut f64) {
        while from != to {
            let node = &self.nodes[from];
            if node.real_edge {
                out.push(node.orig);
                *length += tree.branch_length(node.orig);
            }
            from = node.parent.expect("path target is an ancestor");
        }
    }

    fn contrast(&self, tree: &Tree, at: usize, a: usize, b: usize) -> Contrast {
        let (ta, tb) = (self.nodes[a].tip.unwrap(), self.nodes[b].tip.unwrap());
        let (tip_i, tip_j) = if self.labels[ta] <= self.labels[tb] { (ta, tb) } else { (tb, ta) };
        let mut path = Vec::new();
        let mut length = 0.0;
        self.path_up(tree, a, at, &mut path, &mut length);
        self.path_up(tree, b, at, &mut path, &mut length);
        path.sort_unstable();
        Contrast {
            tip_i,
            tip_j,
            label_i: self.labels[tip_i].clone(),
            label_j: self.labels[tip_j].clone(),
            node: self.nodes[at].orig,
            age: self.nodes[at].age,
            path,
            path_length: length,
        }
    }
}

/// Greedy selection over the internal nodes with age in `window`.
///
/// Repeatedly takes the youngest remaining in-window node (ties by smallest
/// descendant label), records a contrast between the smallest-label tips of
/// its two subtrees, removes its clade and suppresses its parent. At most
/// two in-window nodes are consumed per contrast, so at least half of them
/// yield one.
pub fn select_contrasts_window(tree: &Tree, window: AgeWindow) -> Result<ContrastSet> {
    if !(window.lo <= window.hi) {
        return Err(Error::param("window", format!("lower end {} exceeds upper end {}", window.lo, window.hi)));
    }
    let bin = Binary::new(tree)?;
    let mut cur = bin.nodes.clone();
    let mut alive = vec![true; cur.len()];
    let mut candidates: Vec<usize> = (0..cur.len())
        .filter(|&b| cur[b].children.is_some() && window.contains(cur[b].age))
        .collect();
    // Equal ages: original nodes by smallest label, then the binary nodes of
    // one multifurcation bottom-up (they are created in that order).
    candidates.sort_by(|&a, &b| {
        cur[a]
            .age
            .total_cmp(&cur[b].age)
            .then(cur[a].orig_rank.cmp(&cur[b].orig_rank))
            .then(a.cmp(&b))
    });

    let mut set = ContrastSet::default();
    for v in candidates {
        if !alive[v] {
            continue;
        }
        let [c1, c2] = cur[v].children.expect("live candidate is internal");
        let t1 = smallest_tip(&cur, c1);
        let t2 = smallest_tip(&cur, c2);
        set.contrasts.push(bin.contrast(tree, v, t1, t2));

        let mut stack = vec![v];
        while let Some(x) = stack.pop() {
            alive[x] = false;
            if let Some(ch) = cur[x].children {
                stack.extend(ch);
            }
        }
        if let Some(p) = cur[v].parent {
            let [a, b] = cur[p].children.unwrap();
            let sibling = if a == v { b } else { a };
            let grand = cur[p].parent;
            alive[p] = false;
            cur[sibling].parent = grand;
            if let Some(g) = grand {
                let ch = cur[g].children.as_mut().unwrap();
                for slot in ch.iter_mut() {
                    if *slot == p {
                        *slot = sibling;
                    }
                }
            }
        }
    }
    Ok(set)
}

fn smallest_tip(nodes: &[BNode], from: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_rank = usize::MAX;
    let mut stack = vec![from];
    while let Some(x) = stack.pop() {
        match nodes[x].children {
            Some(ch) => stack.extend(ch),
            None => {
                if nodes[x].min_rank < best_rank {
                    best_rank = nodes[x].min_rank;
                    best = x;
                }
            }
        }
    }
    best
}

/// Recursive selection over the nodes older than `t`.
///
/// While the current subtree's root is older than `t`, a contrast is taken
/// at the root along the path that descends from each root child by always
/// following the younger child (ties by smallest descendant label). The path
/// and every edge touching it are removed and the procedure recurses on the
/// remaining subtrees.
pub fn select_contrasts_above(tree: &Tree, t: f64) -> Result<ContrastSet> {
    if !(t >= 0.0) {
        return Err(Error::param("t", "must be >= 0"));
    }
    let bin = Binary::new(tree)?;
    let nodes = &bin.nodes;
    let mut set = ContrastSet::default();
    let mut work = vec![bin.root];
    while let Some(r) = work.pop() {
        let Some(children) = nodes[r].children else {
            continue;
        };
        if nodes[r].age <= t {
            continue;
        }
        let mut ends = [0usize; 2];
        let mut spawned = Vec::new();
        for (slot, &c) in children.iter().enumerate() {
            let mut x = c;
            while let Some([a, b]) = nodes[x].children {
                let a_first = nodes[a]
                    .age
                    .total_cmp(&nodes[b].age)
                    .then(nodes[a].min_rank.cmp(&nodes[b].min_rank))
                    .is_le();
                let (young, old) = if a_first { (a, b) } else { (b, a) };
                spawned.push(old);
                x = young;
            }
            ends[slot] = x;
        }
        set.contrasts.push(bin.contrast(tree, r, ends[0], ends[1]));
        // Reverse so subtrees are processed in discovery order.
        work.extend(spawned.into_iter().rev());
    }
    Ok(set)
}

/// Contrast values `(C, T_C)` with data keyed by tip label.
pub fn contrast_values(set: &ContrastSet, labels: &[String], data: &[f64]) -> Result<Vec<(f64, f64)>> {
    if labels.len() != data.len() {
        return Err(Error::param("data", "labels and values differ in length"));
    }
    let by_label: HashMap<&str, f64> = labels.iter().map(String::as_str).zip(data.iter().copied()).collect();
    set.contrasts
        .iter()
        .map(|c| {
            let get = |l: &str| by_label.get(l).copied().ok_or_else(|| Error::MissingTip(l.to_owned()));
            Ok((get(&c.label_i)? - get(&c.label_j)?, c.age))
        })
        .collect()
}

/// Contrast values for data already in the tree's tip order.
pub fn contrast_values_ordered(set: &ContrastSet, y: &[f64]) -> Vec<(f64, f64)> {
    set.contrasts.iter().map(|c| (y[c.tip_i] - y[c.tip_j], c.age)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FtEstimate {
    pub value: f64,
    pub se: f64,
    pub count: usize,
}

/// Moment estimate of `f_{t0}` from contrasts whose ages are at or near `t0`.
///
/// For `t0 > 0` the estimate is `Σ C²/(2|C|)`. For `t0 = 0` each contrast is
/// normalized by its own age, `(1/|C|) Σ C²/(4T_C)`, which carries an
/// `O(αT_C)` bias. The standard error treats each term as a scaled χ²₁.
pub fn estimate_f_t(values: &[(f64, f64)], t0: f64) -> Result<FtEstimate> {
    if values.is_empty() {
        return Err(Error::param("contrasts", "empty contrast set"));
    }
    if !(t0 >= 0.0) {
        return Err(Error::param("t0", "must be >= 0"));
    }
    let n = values.len() as f64;
    let value = if t0 > 0.0 {
        values.iter().map(|(c, _)| c * c).sum::<f64>() / (2.0 * n)
    } else {
        if values.iter().any(|&(_, age)| !(age > 0.0)) {
            return Err(Error::param("contrasts", "t0 = 0 needs contrasts with positive ages"));
        }
        values.iter().map(|(c, age)| c * c / (4.0 * age)).sum::<f64>() / n
    };
    Ok(FtEstimate {
        value,
        se: value * (2.0 / n).sqrt(),
        count: values.len(),
    })
}

/// The unique `(γ, α)` with `f_{t1} = f1` and `f_{t2} = f2`.
pub fn invert_two_ages(f1: f64, t1: f64, f2: f64, t2: f64) -> Result<(f64, f64)> {
    for (name, v) in [("f1", f1), ("f2", f2)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::param(name, "must be finite and > 0"));
        }
    }
    if !(t1 >= 0.0 && t2 >= 0.0) || t1 == t2 {
        return Err(Error::param("t", "ages must be >= 0 and distinct"));
    }
    // Order so that `t_a > 0`; `t_b` may be zero.
    let (fa, ta, fb, tb) = if t1 > 0.0 { (f1, t1, f2, t2) } else { (f2, t2, f1, t1) };
    let growth = |alpha: f64, t: f64| -(-2.0 * alpha * t).exp_m1();
    let target = (fa / fb).ln();
    // g(x) on x = ln α: log of the ratio f_{ta}/f_{tb} (with f_0 = γα) minus target.
    let g = |x: f64| {
        let alpha = x.exp();
        let denom = if tb > 0.0 { growth(alpha, tb).ln() } else { x };
        growth(alpha, ta).ln() - denom - target
    };
    let (lo, hi) = (1e-10f64, 1e4f64);
    let x = brent_root(g, lo.ln(), hi.ln(), 1e-14, 500).map_err(|e| match e {
        Error::NoRoot { .. } => Error::NoRoot { lo, hi },
        other => other,
    })?;
    let alpha = x.exp();
    Ok((fa / growth(alpha, ta), alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symtree::{build_symmetric_tree, SymmetricTreeSpec};
    use crate::tree::parse_newick;
    use approx::assert_relative_eq;

    fn balanced4() -> Tree {
        build_symmetric_tree(&SymmetricTreeSpec::new(vec![2, 2], vec![2.0, 1.0]).unwrap())
    }

    #[test]
    fn window_takes_both_cherries() {
        let set = select_contrasts_window(&balanced4(), AgeWindow::open(0.5, 1.5)).unwrap();
        assert_eq!(set.len(), 2);
        assert!(set.paths_disjoint());
        assert_eq!(set.ages(), vec![1.0, 1.0]);
        assert_eq!((set.contrasts[0].label_i.as_str(), set.contrasts[0].label_j.as_str()), ("t1", "t2"));
    }

    #[test]
    fn window_with_root_consumes_root_with_first_cherry() {
        // First cherry removed, root suppressed, second cherry becomes the root.
        let set = select_contrasts_window(&balanced4(), AgeWindow::open(0.5, 2.5)).unwrap();
        assert_eq!(set.len(), 2);
        assert!(set.paths_disjoint());
    }

    #[test]
    fn window_above_root_is_empty() {
        let set = select_contrasts_window(&balanced4(), AgeWindow::open(2.5, 3.0)).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn above_on_star() {
        let star3 = parse_newick("(A:1,B:1,C:1);").unwrap();
        let set = select_contrasts_above(&star3, 0.0).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.contrasts[0].age, 1.0);
        // Larger stars resolve into a comb, one contrast per removed pair.
        let star6 = parse_newick("(A:1,B:1,C:1,D:1,E:1,F:1);").unwrap();
        let set = select_contrasts_above(&star6, 0.5).unwrap();
        assert_eq!(set.len(), 3);
        assert!(set.paths_disjoint());
    }

    #[test]
    fn above_on_balanced_tree() {
        let set = select_contrasts_above(&balanced4(), 0.0).unwrap();
        // The root path uses t1 and t3 and touches both cherries' other edges.
        assert_eq!(set.len(), 1);
        assert_eq!(set.contrasts[0].age, 2.0);
        let sum: f64 = set.ages().iter().map(|a| a * a).sum();
        assert!(sum >= 0.25 * (4.0 + 4.0 + 1.0 + 1.0));
    }

    #[test]
    fn paths_and_lengths() {
        let t = parse_newick("((A:1,B:1):1,(C:0.5,D:0.5):1.5);").unwrap();
        let set = select_contrasts_window(&t, AgeWindow::closed(0.0, 2.0)).unwrap();
        for c in &set.contrasts {
            assert_relative_eq!(c.path_length, 2.0 * c.age, epsilon = 1e-12);
        }
        assert!(set.paths_disjoint());
    }

    #[test]
    fn values_by_label() {
        let set = select_contrasts_window(&balanced4(), AgeWindow::open(0.5, 1.5)).unwrap();
        let labels: Vec<String> = ["t4", "t3", "t2", "t1"].iter().map(|s| s.to_string()).collect();
        let vals = contrast_values(&set, &labels, &[4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(vals, vec![(-1.0, 1.0), (-1.0, 1.0)]);
        let same = contrast_values(&set, &labels, &[1.0; 4]).unwrap();
        assert!(same.iter().all(|(c, _)| *c == 0.0));
        let missing = contrast_values(&set, &labels[..3], &[1.0; 3]);
        assert!(matches!(missing, Err(Error::MissingTip(_))));
    }

    #[test]
    fn f_t_plug_in() {
        let (gamma, alpha, t0) = (1.3, 0.4, 0.8f64);
        let f = gamma * -(-2.0 * alpha * t0).exp_m1();
        let c = (2.0 * f).sqrt();
        let est = estimate_f_t(&[(c, t0)], t0).unwrap();
        assert_relative_eq!(est.value, f, epsilon = 1e-14);
        assert!(estimate_f_t(&[], t0).is_err());
    }

    #[test]
    fn inversion_round_trip() {
        let f1 = 1.0 - (-0.1f64).exp();
        let f2 = 1.0 - (-0.2f64).exp();
        assert_relative_eq!(f1, 0.0951626, epsilon = 1e-7);
        let (g, a) = invert_two_ages(f1, 0.5, f2, 1.0).unwrap();
        assert!((g - 1.0).abs() < 1e-8 && (a - 0.1).abs() < 1e-8, "{g} {a}");
        let (g3, a3) = invert_two_ages(3.0 * f1, 0.5, 3.0 * f2, 1.0).unwrap();
        assert!((g3 - 3.0).abs() < 1e-8 && (a3 - 0.1).abs() < 1e-8);
        // f_0 = γα.
        let (g0, a0) = invert_two_ages(0.1, 0.0, f2, 1.0).unwrap();
        assert!((g0 - 1.0).abs() < 1e-8 && (a0 - 0.1).abs() < 1e-8);
        assert!(matches!(invert_two_ages(f2, 0.5, f1, 1.0), Err(Error::NoRoot { .. })));
    }
}
