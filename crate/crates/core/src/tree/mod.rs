//! Rooted trees with branch lengths.
//!
//! Nodes are stored in an arena and addressed by [`NodeId`]. Tips keep the
//! left-to-right order in which they were created, and that order defines
//! the row/column order of every matrix built from a tree.

mod metrics;
mod newick;
pub mod random;
mod subsample;

pub(crate) use metrics::write_labeled_matrix;
pub use metrics::{age_multiset, distance_matrix, shared_time_matrix, TreeMetrics, DEFAULT_ULTRAMETRIC_TOL};
pub use newick::{parse_newick, write_newick};
pub use subsample::{induced_subtree, subsample_nested, SUBSAMPLE_MAX_RETRIES};

use std::collections::HashSet;

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Length of the edge above this node. Ignored for the root.
    pub length: f64,
    pub label: Option<String>,
}

impl Node {
    pub fn is_tip(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
    root: NodeId,
    root_edge: Option<f64>,
    tips: Vec<NodeId>,
}

impl Tree {
    /// Builds a tree from an arena of nodes, checking structural invariants.
    pub fn from_nodes(nodes: Vec<Node>, root: NodeId, root_edge: Option<f64>) -> Result<Tree> {
        if root >= nodes.len() {
            return Err(Error::InvalidTree(format!("root id {root} out of range")));
        }
        if nodes[root].parent.is_some() {
            return Err(Error::InvalidTree("root has a parent".into()));
        }
        if let Some(len) = root_edge {
            if !(len.is_finite() && len >= 0.0) {
                return Err(Error::InvalidTree(format!("invalid root edge length {len}")));
            }
        }
        // Walk from the root; every node must be reached exactly once via
        // consistent parent links.
        let mut seen = vec![false; nodes.len()];
        let mut tips = Vec::new();
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            if seen[id] {
                return Err(Error::InvalidTree(format!("node {id} reached twice")));
            }
            seen[id] = true;
            let node = &nodes[id];
            if id != root && !(node.length.is_finite() && node.length >= 0.0) {
                return Err(Error::InvalidTree(format!(
                    "negative or non-finite branch length {} above node {id}",
                    node.length
                )));
            }
            if node.is_tip() {
                tips.push(id);
            }
            for &c in node.children.iter().rev() {
                if c >= nodes.len() || nodes[c].parent != Some(id) {
                    return Err(Error::InvalidTree(format!("broken parent link at node {c}")));
                }
                stack.push(c);
            }
        }
        if let Some(orphan) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidTree(format!("node {orphan} is not reachable from the root")));
        }
        let mut labels = HashSet::with_capacity(tips.len());
        for &t in &tips {
            match nodes[t].label.as_deref() {
                None | Some("") => {
                    return Err(Error::InvalidTree(format!("tip node {t} has no label")))
                }
                Some(l) => {
                    if !labels.insert(l) {
                        return Err(Error::InvalidTree(format!("duplicate tip label `{l}`")));
                    }
                }
            }
        }
        Ok(Tree {
            nodes,
            root,
            root_edge,
            tips,
        })
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn root_edge(&self) -> Option<f64> {
        self.root_edge
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id].children
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id].parent
    }

    /// Edge length above `id`; zero for the root.
    pub fn branch_length(&self, id: NodeId) -> f64 {
        if id == self.root {
            0.0
        } else {
            self.nodes[id].length
        }
    }

    pub fn is_tip(&self, id: NodeId) -> bool {
        self.nodes[id].is_tip()
    }

    /// Tip node ids in left-to-right order.
    pub fn tips(&self) -> &[NodeId] {
        &self.tips
    }

    pub fn n_tips(&self) -> usize {
        self.tips.len()
    }

    pub fn tip_labels(&self) -> Vec<String> {
        self.tips
            .iter()
            .map(|&t| self.nodes[t].label.clone().unwrap_or_default())
            .collect()
    }

    pub fn label(&self, id: NodeId) -> Option<&str> {
        self.nodes[id].label.as_deref()
    }

    /// Nodes in preorder (parents before children, children left to right).
    pub fn preorder(&self) -> Vec<NodeId> {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            order.push(id);
            stack.extend(self.nodes[id].children.iter().rev());
        }
        order
    }

    pub fn postorder(&self) -> Vec<NodeId> {
        let mut order = self.preorder();
        order.reverse();
        order
    }

    /// Distance from the root to every node, indexed by node id.
    pub fn depths(&self) -> Vec<f64> {
        let mut depth = vec![0.0; self.nodes.len()];
        for id in self.preorder() {
            if let Some(p) = self.nodes[id].parent {
                depth[id] = depth[p] + self.nodes[id].length;
            }
        }
        depth
    }

    /// Root-to-tip distance of each tip, in tip order.
    pub fn tip_depths(&self) -> Vec<f64> {
        let depth = self.depths();
        self.tips.iter().map(|&t| depth[t]).collect()
    }

    /// Maximum root-to-tip distance.
    pub fn height(&self) -> f64 {
        self.tip_depths().into_iter().fold(0.0, f64::max)
    }

    /// Age of every node (height minus depth). Well defined on ultrametric trees.
    pub fn node_ages(&self) -> Vec<f64> {
        let depth = self.depths();
        let h = self.tips.iter().map(|&t| depth[t]).fold(0.0, f64::max);
        depth.into_iter().map(|d| (h - d).max(0.0)).collect()
    }

    /// Maximum relative deviation of tip depths from the height.
    pub fn ultrametric_deviation(&self) -> f64 {
        let depths = self.tip_depths();
        let h = depths.iter().copied().fold(0.0, f64::max);
        if h == 0.0 {
            return 0.0;
        }
        depths.iter().map(|d| (h - d).abs() / h).fold(0.0, f64::max)
    }

    pub fn is_ultrametric(&self, tol: f64) -> bool {
        self.ultrametric_deviation() <= tol
    }

    pub(crate) fn require_ultrametric(&self, tol: f64) -> Result<()> {
        let deviation = self.ultrametric_deviation();
        if deviation <= tol {
            Ok(())
        } else {
            Err(Error::NotUltrametric { deviation, tol })
        }
    }

    /// Position of each node's tips in the tip order: `tip_index[node]` is
    /// `Some(i)` for tips.
    pub fn tip_index(&self) -> Vec<Option<usize>> {
        let mut idx = vec![None; self.nodes.len()];
        for (i, &t) in self.tips.iter().enumerate() {
            idx[t] = Some(i);
        }
        idx
    }

    /// Tip indices (into [`Tree::tips`]) below every node.
    pub fn descendant_tips(&self) -> Vec<Vec<usize>> {
        let tip_index = self.tip_index();
        let mut below: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for id in self.postorder() {
            if let Some(i) = tip_index[id] {
                below[id].push(i);
            } else {
                let mut acc = Vec::new();
                for &c in &self.nodes[id].children {
                    acc.extend_from_slice(&below[c]);
                }
                below[id] = acc;
            }
        }
        below
    }

    /// Returns a copy of the tree with every branch length transformed.
    pub fn map_lengths(&self, mut f: impl FnMut(NodeId, f64) -> f64) -> Tree {
        let mut nodes = self.nodes.clone();
        for (id, node) in nodes.iter_mut().enumerate() {
            if id != self.root {
                node.length = f(id, node.length);
            }
        }
        Tree {
            nodes,
            root: self.root,
            root_edge: self.root_edge,
            tips: self.tips.clone(),
        }
    }

    pub fn with_root_edge(mut self, root_edge: Option<f64>) -> Tree {
        self.root_edge = root_edge;
        self
    }

    /// Multiplies every branch length (and the root edge) by `factor`.
    pub fn scaled(&self, factor: f64) -> Tree {
        self.map_lengths(|_, l| l * factor)
            .with_root_edge(self.root_edge.map(|l| l * factor))
    }

    /// Number of children of the root and the shortest root-child branch.
    pub fn root_geometry(&self) -> (usize, f64) {
        let children = self.children(self.root);
        let t = children
            .iter()
            .map(|&c| self.nodes[c].length)
            .fold(f64::INFINITY, f64::min);
        (children.len(), t)
    }
}
