//! Random ultrametric trees for tests and benchmarks.

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::tree::{Node, Tree};

/// Coalescent-style random ultrametric tree on `n ≥ 2` tips, height 1.
///
/// Lineages merge pairwise at exponential waiting times; with probability
/// `multifurcation_prob` a merge takes three lineages instead of two (when
/// available). Tips are labelled `t1..tn` in left-to-right order and the
/// root stem has length 0.
pub fn random_ultrametric<R: Rng + ?Sized>(n: usize, multifurcation_prob: f64, rng: &mut R) -> Tree {
    assert!(n >= 2, "random_ultrametric needs at least two tips");
    let mut ages = vec![0.0; n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut lineages: Vec<usize> = (0..n).collect();
    let mut age = 0.0;
    while lineages.len() > 1 {
        let k = lineages.len() as f64;
        let rate = k * (k - 1.0) / 2.0;
        age += Exp::new(rate).unwrap().sample(rng);
        let take = if lineages.len() >= 3 && rng.random::<f64>() < multifurcation_prob {
            3
        } else {
            2
        };
        let mut merged = Vec::with_capacity(take);
        for _ in 0..take {
            let i = rng.random_range(0..lineages.len());
            merged.push(lineages.swap_remove(i));
        }
        let id = ages.len();
        ages.push(age);
        children.push(merged);
        lineages.push(id);
    }
    let root = lineages[0];
    let height = ages[root];

    // Renumber in preorder so tip labels follow the left-to-right order.
    let mut nodes: Vec<Node> = Vec::with_capacity(ages.len());
    let mut new_age = Vec::with_capacity(ages.len());
    let mut stack = vec![(root, None::<usize>)];
    let mut tip_count = 0;
    while let Some((old, parent)) = stack.pop() {
        let id = nodes.len();
        let label = if children[old].is_empty() {
            tip_count += 1;
            Some(format!("t{tip_count}"))
        } else {
            None
        };
        let length = parent.map_or(0.0, |p| (new_age[p] - ages[old]) / height);
        nodes.push(Node {
            parent,
            children: Vec::new(),
            length,
            label,
        });
        new_age.push(ages[old]);
        if let Some(p) = parent {
            nodes[p].children.push(id);
        }
        for &c in children[old].iter().rev() {
            stack.push((c, Some(id)));
        }
    }
    Tree::from_nodes(nodes, 0, Some(0.0)).expect("generated tree is valid")
}
