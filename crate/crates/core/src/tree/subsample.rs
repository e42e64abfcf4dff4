use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tree::{Node, NodeId, Tree, DEFAULT_ULTRAMETRIC_TOL};

/// Attempts per subset before the root-MRCA condition is declared unreachable.
pub const SUBSAMPLE_MAX_RETRIES: usize = 10_000;

/// Subtree induced by a set of tips (indices into [`Tree::tips`]).
///
/// Nodes left with a single child are suppressed and their branch lengths
/// summed into the child's edge. The root is kept as-is when two or more of
/// its children survive; otherwise the MRCA of the subset becomes the root.
pub fn induced_subtree(tree: &Tree, keep: &[usize]) -> Result<Tree> {
    if keep.is_empty() {
        return Err(Error::Subsample("empty tip subset".into()));
    }
    let mut kept = vec![false; tree.len()];
    for &i in keep {
        let mut id = *tree
            .tips()
            .get(i)
            .ok_or_else(|| Error::Subsample(format!("tip index {i} out of range")))?;
        while !kept[id] {
            kept[id] = true;
            match tree.parent(id) {
                Some(p) => id = p,
                None => break,
            }
        }
    }

    // Descend from the root past single-kept-child nodes to the subset MRCA.
    let mut top = tree.root();
    let mut lead = 0.0;
    loop {
        let live: Vec<NodeId> = tree.children(top).iter().copied().filter(|&c| kept[c]).collect();
        if live.len() == 1 && !tree.is_tip(top) {
            lead += tree.branch_length(live[0]);
            top = live[0];
        } else {
            break;
        }
    }

    let mut nodes: Vec<Node> = Vec::new();
    // (original id, new parent, accumulated length)
    let mut stack = vec![(top, None::<NodeId>, 0.0)];
    while let Some((orig, parent, acc)) = stack.pop() {
        let mut cur = orig;
        let mut length = acc;
        // Collapse unary chains.
        loop {
            let live: Vec<NodeId> = tree.children(cur).iter().copied().filter(|&c| kept[c]).collect();
            if live.len() == 1 {
                cur = live[0];
                length += tree.branch_length(cur);
            } else {
                break;
            }
        }
        let id = nodes.len();
        nodes.push(Node {
            parent,
            children: Vec::new(),
            length,
            label: tree.node(cur).label.clone(),
        });
        if let Some(p) = parent {
            nodes[p].children.push(id);
        }
        for &c in tree.children(cur).iter().rev() {
            if kept[c] {
                stack.push((c, Some(id), tree.branch_length(c)));
            }
        }
    }
    // Children were pushed in reverse; restore left-to-right order.
    for node in &mut nodes {
        node.children.sort_unstable();
    }
    let root_edge = if top == tree.root() {
        tree.root_edge()
    } else {
        Some(tree.root_edge().unwrap_or(0.0) + lead)
    };
    Tree::from_nodes(nodes, 0, root_edge)
}

/// Nested random subtrees whose tip sets all have the original root as MRCA.
///
/// `sizes` must be strictly descending with every size between 2 and the tip
/// count. Output tree `k+1` is induced on a subset of tree `k`'s tips.
pub fn subsample_nested(tree: &Tree, sizes: &[usize], seed: u64) -> Result<Vec<Tree>> {
    tree.require_ultrametric(DEFAULT_ULTRAMETRIC_TOL)?;
    let n = tree.n_tips();
    if sizes.is_empty() {
        return Err(Error::config("sizes", "at least one size is required"));
    }
    if sizes.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::config("sizes", "sizes must be strictly descending"));
    }
    if sizes[sizes.len() - 1] < 2 || sizes[0] > n {
        return Err(Error::config(
            "sizes",
            format!("sizes must lie in [2, {n}], got {sizes:?}"),
        ));
    }

    // Which root child each tip descends from.
    let mut root_child_of_tip = vec![0usize; n];
    let below = tree.descendant_tips();
    for (k, &c) in tree.children(tree.root()).iter().enumerate() {
        for &i in &below[c] {
            root_child_of_tip[i] = k;
        }
    }
    let spans_root = |subset: &[usize]| {
        let first = root_child_of_tip[subset[0]];
        subset.iter().any(|&i| root_child_of_tip[i] != first)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size < current.len() {
            let mut attempt = 0;
            current = loop {
                if attempt == SUBSAMPLE_MAX_RETRIES {
                    return Err(Error::Subsample(format!(
                        "no subset of size {size} with the root as MRCA after {SUBSAMPLE_MAX_RETRIES} draws"
                    )));
                }
                attempt += 1;
                let mut pick: Vec<usize> = index::sample(&mut rng, current.len(), size)
                    .into_iter()
                    .map(|k| current[k])
                    .collect();
                if spans_root(&pick) {
                    pick.sort_unstable();
                    break pick;
                }
            };
        } else if !spans_root(&current) {
            return Err(Error::Subsample("tree root has a single child".into()));
        }
        out.push(induced_subtree(tree, &current)?);
    }
    Ok(out)
}
