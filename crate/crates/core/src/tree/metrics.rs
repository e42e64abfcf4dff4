use std::io::Write;

use nalgebra::DMatrix;

use crate::error::Result;
use crate::tree::Tree;

/// Relative tolerance on tip depths used to call a tree ultrametric.
pub const DEFAULT_ULTRAMETRIC_TOL: f64 = 1e-8;

/// Pairwise and node-age summaries of a tree, in tip order.
#[derive(Debug, Clone)]
pub struct TreeMetrics {
    pub labels: Vec<String>,
    /// Path length between tips.
    pub distances: DMatrix<f64>,
    /// Shared time from the root (depth of the most recent common ancestor).
    pub shared_times: DMatrix<f64>,
    pub tip_depths: Vec<f64>,
    /// Internal node ages, each repeated `children - 1` times, sorted
    /// from oldest to youngest.
    pub ages: Vec<f64>,
    pub height: f64,
    pub ultrametric: bool,
}

impl TreeMetrics {
    pub fn new(tree: &Tree, ultrametric_tol: f64) -> TreeMetrics {
        let shared_times = shared_time_matrix(tree);
        let n = tree.n_tips();
        let tip_depths: Vec<f64> = (0..n).map(|i| shared_times[(i, i)]).collect();
        let distances = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                0.0
            } else {
                tip_depths[i] + tip_depths[j] - 2.0 * shared_times[(i, j)]
            }
        });
        let height = tip_depths.iter().copied().fold(0.0, f64::max);
        TreeMetrics {
            labels: tree.tip_labels(),
            distances,
            shared_times,
            tip_depths,
            ages: age_multiset(tree),
            height,
            ultrametric: tree.is_ultrametric(ultrametric_tol),
        }
    }

    /// Writes a square matrix with a header row of tip labels.
    pub fn write_matrix_csv<W: Write>(&self, matrix: &DMatrix<f64>, out: W) -> Result<()> {
        write_labeled_matrix(&self.labels, matrix, out)
    }
}

/// Tip-by-tip matrix of root-to-MRCA depths.
pub fn shared_time_matrix(tree: &Tree) -> DMatrix<f64> {
    let n = tree.n_tips();
    let depth = tree.depths();
    let below = tree.descendant_tips();
    let mut shared = DMatrix::zeros(n, n);
    for (id, node) in tree.nodes().iter().enumerate() {
        if node.is_tip() {
            let i = below[id][0];
            shared[(i, i)] = depth[id];
            continue;
        }
        let d = depth[id];
        for (a, &ca) in node.children.iter().enumerate() {
            for &cb in &node.children[a + 1..] {
                for &i in &below[ca] {
                    for &j in &below[cb] {
                        shared[(i, j)] = d;
                        shared[(j, i)] = d;
                    }
                }
            }
        }
    }
    shared
}

/// Tip-by-tip path-length matrix.
pub fn distance_matrix(tree: &Tree) -> DMatrix<f64> {
    let shared = shared_time_matrix(tree);
    let n = shared.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            shared[(i, i)] + shared[(j, j)] - 2.0 * shared[(i, j)]
        }
    })
}

/// Internal node ages with multiplicity `children - 1`, oldest first.
pub fn age_multiset(tree: &Tree) -> Vec<f64> {
    let ages = tree.node_ages();
    let mut out = Vec::new();
    for (id, node) in tree.nodes().iter().enumerate() {
        let k = node.children.len();
        for _ in 1..k {
            out.push(ages[id]);
        }
    }
    out.sort_by(|a, b| b.total_cmp(a));
    out
}

pub(crate) fn write_labeled_matrix<W: Write>(
    labels: &[String],
    matrix: &DMatrix<f64>,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(labels)?;
    for i in 0..matrix.nrows() {
        w.write_record(matrix.row(i).iter().map(|v| format!("{v}")))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symtree::{build_symmetric_tree, SymmetricTreeSpec};
    use crate::tree::parse_newick;

    #[test]
    fn three_tip_metrics() {
        let t = parse_newick("((A:1,B:1):1,C:2):0;").unwrap();
        let m = TreeMetrics::new(&t, DEFAULT_ULTRAMETRIC_TOL);
        assert_eq!(m.distances[(0, 1)], 2.0);
        assert_eq!(m.distances[(0, 2)], 4.0);
        assert_eq!(m.distances[(1, 2)], 4.0);
        assert_eq!(m.shared_times[(0, 1)], 1.0);
        assert_eq!(m.ages, vec![2.0, 1.0]);
        assert!(m.ultrametric);
        assert_eq!(m.height, 2.0);
    }

    #[test]
    fn balanced_binary_ages() {
        let spec = SymmetricTreeSpec::new(vec![2, 2], vec![2.0, 1.0]).unwrap();
        let t = build_symmetric_tree(&spec);
        assert_eq!(age_multiset(&t), vec![2.0, 1.0, 1.0]);
    }

    #[test]
    fn multifurcating_root_counts_twice() {
        let t = parse_newick("(A:3,B:3,C:3);").unwrap();
        assert_eq!(age_multiset(&t), vec![3.0, 3.0]);
    }

    #[test]
    fn csv_has_label_header() {
        let t = parse_newick("(A:1,B:1);").unwrap();
        let m = TreeMetrics::new(&t, DEFAULT_ULTRAMETRIC_TOL);
        let mut buf = Vec::new();
        m.write_matrix_csv(&m.distances, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "A,B\n0,2\n2,0\n");
    }
}
