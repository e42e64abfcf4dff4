//! Ornstein–Uhlenbeck covariance on a tree, the BM branch-length transform,
//! and exact simulation of tip values.
//!
//! Both root treatments ignore the root stem: time is measured from the
//! root node.

use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{shared_time_matrix, write_labeled_matrix, Tree, DEFAULT_ULTRAMETRIC_TOL};

/// Below this value of α·height the fixed-root covariance uses its series form.
pub const BM_LIMIT_THRESHOLD: f64 = 1e-8;

/// Mean `mu`, selection strength `alpha` and stationary variance `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OUParams {
    pub mu: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl OUParams {
    pub fn new(mu: f64, alpha: f64, gamma: f64) -> Result<OUParams> {
        let p = OUParams { mu, alpha, gamma };
        p.validate()?;
        Ok(p)
    }

    /// Parameters from the diffusion rate instead of the stationary variance.
    pub fn from_sigma2(mu: f64, alpha: f64, sigma2: f64) -> Result<OUParams> {
        if !(alpha > 0.0) {
            return Err(Error::param("alpha", "must be > 0 to convert from sigma2"));
        }
        OUParams::new(mu, alpha, sigma2 / (2.0 * alpha))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() {
            return Err(Error::param("mu", format!("must be finite, got {}", self.mu)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::param("alpha", format!("must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::param("gamma", format!("must be finite and > 0, got {}", self.gamma)));
        }
        Ok(())
    }

    pub fn sigma2(&self) -> f64 {
        2.0 * self.alpha * self.gamma
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "root")]
pub enum RootMode {
    /// Root state drawn from the stationary law N(μ, γ).
    Random,
    /// Root state fixed at `y0`.
    Fixed { y0: f64 },
}

#[derive(Debug, Clone)]
pub struct CovarianceMatrix {
    pub matrix: DMatrix<f64>,
    pub labels: Vec<String>,
    pub mode: RootMode,
    pub mean: Vec<f64>,
    /// Set when two tips coincide (zero distance) or a tip has zero variance.
    pub singular: bool,
}

impl CovarianceMatrix {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_labeled_matrix(&self.labels, &self.matrix, out)
    }
}

/// Correlation matrix `exp(-α d_ij)` from a distance matrix.
pub fn ou_correlation(distances: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    distances.map(|d| (-alpha * d).exp())
}

fn check_alpha_for_mode(params: &OUParams, mode: RootMode) -> Result<()> {
    params.validate()?;
    if matches!(mode, RootMode::Random) && params.alpha == 0.0 {
        return Err(Error::param(
            "alpha",
            "alpha = 0 has no stationary distribution; use a fixed root",
        ));
    }
    if let RootMode::Fixed { y0 } = mode {
        if !y0.is_finite() {
            return Err(Error::param("y0", "must be finite"));
        }
    }
    Ok(())
}

/// OU covariance and mean of the tip values.
pub fn covariance(tree: &Tree, params: &OUParams, mode: RootMode) -> Result<CovarianceMatrix> {
    check_alpha_for_mode(params, mode)?;
    let shared = shared_time_matrix(tree);
    let n = shared.nrows();
    let dist = |i: usize, j: usize| shared[(i, i)] + shared[(j, j)] - 2.0 * shared[(i, j)];
    let OUParams { mu, alpha, gamma } = *params;

    let mut singular = false;
    for i in 0..n {
        for j in 0..i {
            if dist(i, j) == 0.0 {
                singular = true;
            }
        }
    }

    let (matrix, mean) = match mode {
        RootMode::Random => {
            let m = DMatrix::from_fn(n, n, |i, j| if i == j { gamma } else { gamma * (-alpha * dist(i, j)).exp() });
            (m, vec![mu; n])
        }
        RootMode::Fixed { y0 } => {
            let height = (0..n).map(|i| shared[(i, i)]).fold(0.0, f64::max);
            let m = if alpha * height < BM_LIMIT_THRESHOLD {
                let sigma2 = params.sigma2();
                DMatrix::from_fn(n, n, |i, j| fixed_entry_series(sigma2, alpha, shared[(i, j)], dist(i, j)))
            } else {
                DMatrix::from_fn(n, n, |i, j| fixed_entry(gamma, alpha, shared[(i, j)], dist(i, j)))
            };
            let mean = (0..n)
                .map(|i| {
                    let decay = (-alpha * shared[(i, i)]).exp();
                    -(-alpha * shared[(i, i)]).exp_m1() * mu + decay * y0
                })
                .collect();
            if (0..n).any(|i| m[(i, i)] <= 0.0) {
                singular = true;
            }
            (m, mean)
        }
    };
    if singular {
        log::warn!("covariance is singular: coincident tips or zero-variance tips");
    }
    Ok(CovarianceMatrix {
        matrix,
        labels: tree.tip_labels(),
        mode,
        mean,
        singular,
    })
}

fn fixed_entry(gamma: f64, alpha: f64, t: f64, d: f64) -> f64 {
    gamma * (-alpha * d).exp() * -(-2.0 * alpha * t).exp_m1()
}

// First-order expansion in α of `fixed_entry` with γ = σ²/(2α).
fn fixed_entry_series(sigma2: f64, alpha: f64, t: f64, d: f64) -> f64 {
    sigma2 * t * (1.0 - alpha * (t + d))
}

/// Brownian-motion covariance `σ²·(shared path length from the stem base)`.
pub fn bm_covariance(tree: &Tree, sigma2: f64) -> DMatrix<f64> {
    let stem = tree.root_edge().unwrap_or(0.0);
    shared_time_matrix(tree).map(|t| sigma2 * (t + stem))
}

/// Branch lengths under which unit-rate BM reproduces the random-root OU
/// correlation `exp(-α d_ij)` of an ultrametric tree.
pub fn bm_branch_transform(tree: &Tree, alpha: f64) -> Result<Tree> {
    tree.require_ultrametric(DEFAULT_ULTRAMETRIC_TOL)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::param("alpha", "must be finite and > 0"));
    }
    let ages = tree.node_ages();
    let root_age = ages[tree.root()];
    let transformed = tree.map_lengths(|id, _| {
        let p = tree.parent(id).expect("non-root node");
        // e^{-2α a_c} − e^{-2α a_p}, written to keep precision on short edges.
        (-2.0 * alpha * ages[id]).exp() * -(-2.0 * alpha * (ages[p] - ages[id])).exp_m1()
    });
    Ok(transformed.with_root_edge(Some((-2.0 * alpha * root_age).exp())))
}

/// Exact OU simulation along the edges, one row per replicate.
///
/// Replicate `r` draws from its own ChaCha stream `r` under `seed`, so the
/// output does not depend on how replicates are scheduled.
pub fn simulate_tips(tree: &Tree, params: &OUParams, mode: RootMode, reps: usize, seed: u64) -> Result<DMatrix<f64>> {
    check_alpha_for_mode(params, mode)?;
    if reps == 0 {
        return Err(Error::param("reps", "must be >= 1"));
    }
    let order = tree.preorder();
    let tip_index = tree.tip_index();
    let n_nodes = tree.len();
    let OUParams { mu, alpha, gamma } = *params;
    // Per-edge shrinkage and innovation sd.
    let mut decay = vec![0.0; n_nodes];
    let mut sd = vec![0.0; n_nodes];
    for id in 0..n_nodes {
        let t = tree.branch_length(id);
        decay[id] = (-alpha * t).exp();
        sd[id] = (gamma * -(-2.0 * alpha * t).exp_m1()).sqrt();
    }
    let rows: Vec<Vec<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut value = vec![0.0; n_nodes];
            let mut tips = vec![0.0; tree.n_tips()];
            for &id in &order {
                value[id] = match tree.parent(id) {
                    None => match mode {
                        RootMode::Random => {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            mu + gamma.sqrt() * z
                        }
                        RootMode::Fixed { y0 } => y0,
                    },
                    Some(p) => {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mu + decay[id] * (value[p] - mu) + sd[id] * z
                    }
                };
                if let Some(i) = tip_index[id] {
                    tips[i] = value[id];
                }
            }
            tips
        })
        .collect();
    let n = tree.n_tips();
    Ok(DMatrix::from_fn(reps, n, |r, i| rows[r][i]))
}

/// Writes replicates as CSV: header of tip labels, one row per replicate.
pub fn write_tip_data_csv<W: Write>(labels: &[String], data: &DMatrix<f64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(labels)?;
    for r in 0..data.nrows() {
        w.write_record(data.row(r).iter().map(|v| format!("{v}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads tip data written by [`write_tip_data_csv`].
pub fn read_tip_data_csv<R: std::io::Read>(input: R) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::Reader::from_reader(input);
    let labels: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_owned()).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        for (k, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::config("data", format!("row {}: column `{}` is not a number: `{field}`", rows + 1, labels[k]))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    Ok((labels.clone(), DMatrix::from_row_slice(rows, labels.len(), &values)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{parse_newick, random::random_ultrametric};
    use approx::assert_relative_eq;

    fn cherry() -> Tree {
        parse_newick("(A:1,B:1):0;").unwrap()
    }

    #[test]
    fn cherry_random_root() {
        let p = OUParams::new(0.0, 0.5, 2.0).unwrap();
        let c = covariance(&cherry(), &p, RootMode::Random).unwrap();
        assert_eq!(c.matrix[(0, 0)], 2.0);
        assert_relative_eq!(c.matrix[(0, 1)], 0.7357589, epsilon = 1e-7);
        assert!(!c.singular);
    }

    #[test]
    fn cherry_fixed_root() {
        let p = OUParams::new(0.0, 0.5, 2.0).unwrap();
        let c = covariance(&cherry(), &p, RootMode::Fixed { y0: 3.0 }).unwrap();
        assert_relative_eq!(c.matrix[(0, 0)], 1.2642411, epsilon = 1e-7);
        assert_eq!(c.matrix[(0, 1)], 0.0);
        let w = (-0.5f64).exp();
        assert_relative_eq!(c.mean[0], 3.0 * w, epsilon = 1e-14);
        assert_eq!(c.mean[0], c.mean[1]);
    }

    #[test]
    fn random_root_rejects_zero_alpha() {
        let p = OUParams::new(0.0, 0.0, 1.0).unwrap();
        assert!(covariance(&cherry(), &p, RootMode::Random).is_err());
    }

    #[test]
    fn fixed_root_series_matches_direct_evaluation() {
        let sigma2 = 0.3;
        let alpha = 1e-6;
        for (t, d) in [(1.0, 2.0), (2.0, 0.0), (0.5, 3.0)] {
            let exact = fixed_entry(sigma2 / (2.0 * alpha), alpha, t, d);
            let series = fixed_entry_series(sigma2, alpha, t, d);
            assert!((exact - series).abs() < 1e-8, "{exact} vs {series}");
        }
    }

    #[test]
    fn fixed_root_bm_limit() {
        let t = parse_newick("((A:1,B:1):1,C:2):0;").unwrap();
        let sigma2 = 0.3;
        let p = OUParams::from_sigma2(0.0, 1e-10, sigma2).unwrap();
        let series = covariance(&t, &p, RootMode::Fixed { y0: 0.0 }).unwrap();
        assert_relative_eq!(series.matrix, bm_covariance(&t, sigma2), epsilon = 1e-8);
    }

    #[test]
    fn duplicate_tips_flagged() {
        let t = parse_newick("((A:0,B:0):1,C:1);").unwrap();
        let c = covariance(&t, &OUParams::new(0.0, 1.0, 1.0).unwrap(), RootMode::Random).unwrap();
        assert!(c.singular);
    }

    #[test]
    fn star_transform() {
        let t = parse_newick("(A:1.5,B:1.5,C:1.5);").unwrap();
        let a = 0.4;
        let bm = bm_branch_transform(&t, a).unwrap();
        let e = (-2.0 * a * 1.5f64).exp();
        assert_relative_eq!(bm.root_edge().unwrap(), e, epsilon = 1e-15);
        assert_relative_eq!(bm.branch_length(bm.tips()[0]), 1.0 - e, epsilon = 1e-15);
        let cov = bm_covariance(&bm, 1.0);
        assert_relative_eq!(cov[(0, 0)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(cov[(0, 1)], e, epsilon = 1e-15);
    }

    #[test]
    fn transform_reproduces_ou_on_random_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let t = random_ultrametric(25, 0.2, &mut rng);
            let alpha = 0.7;
            let bm = bm_covariance(&bm_branch_transform(&t, alpha).unwrap(), 1.0);
            let ou = covariance(&t, &OUParams::new(0.0, alpha, 1.0).unwrap(), RootMode::Random).unwrap();
            assert_relative_eq!(bm, ou.matrix, epsilon = 1e-12);
        }
    }

    #[test]
    fn transform_rejects_non_ultrametric() {
        let t = parse_newick("(A:1,B:2);").unwrap();
        assert!(matches!(bm_branch_transform(&t, 1.0), Err(Error::NotUltrametric { .. })));
    }

    #[test]
    fn simulation_is_deterministic() {
        let t = parse_newick("((A:1,B:1):1,C:2):0;").unwrap();
        let p = OUParams::new(1.0, 0.5, 2.0).unwrap();
        let a = simulate_tips(&t, &p, RootMode::Random, 10, 5).unwrap();
        let b = simulate_tips(&t, &p, RootMode::Random, 10, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.row(0), a.row(1));
    }

    #[test]
    fn large_alpha_decorrelates() {
        let t = parse_newick("((A:1,B:1):1,C:2):0;").unwrap();
        let p = OUParams::new(0.0, 1e6, 1.0).unwrap();
        let y = simulate_tips(&t, &p, RootMode::Fixed { y0: 100.0 }, 20_000, 1).unwrap();
        let n = y.nrows() as f64;
        let mean0 = y.column(0).sum() / n;
        let cov01 = y.column(0).dot(&y.column(1)) / n - mean0 * y.column(1).sum() / n;
        assert!(mean0.abs() < 4.0 / n.sqrt());
        assert!(cov01.abs() < 4.0 / n.sqrt());
    }

    #[test]
    fn csv_round_trip() {
        let labels = vec!["A".to_string(), "B".to_string()];
        let data = DMatrix::from_row_slice(2, 2, &[0.1, -2.5, 3.0, 1e-20]);
        let mut buf = Vec::new();
        write_tip_data_csv(&labels, &data, &mut buf).unwrap();
        let (l2, d2) = read_tip_data_csv(&buf[..]).unwrap();
        assert_eq!(l2, labels);
        assert_eq!(d2, data);
    }
}
