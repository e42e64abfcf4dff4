//! Distances between two random-root OU models on the same tree.
//!
//! The entropy distance is the symmetrized Kullback–Leibler divergence
//! `KL(P₁‖P₂) + KL(P₂‖P₁)`. It stays bounded along a growing tree sequence
//! exactly when the limiting Gaussian measures are equivalent; the Rao sum
//! `z_m` diverging is sufficient for them to be orthogonal.

use std::io::Write;

use nalgebra::SymmetricEigen;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::ou::{ou_correlation, OUParams};
use crate::symtree::{eigensystem, DenseTipSpec, SymmetricTreeSpec};
use crate::tree::{age_multiset, distance_matrix, Tree, DEFAULT_ULTRAMETRIC_TOL};

/// Two parameter values on one tree.
#[derive(Debug, Clone, Copy)]
pub struct ModelPair<'a> {
    pub tree: &'a Tree,
    pub theta1: OUParams,
    pub theta2: OUParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhitenedPair {
    /// Variances under P₂ of coordinates that are i.i.d. N(0, 1) under P₁,
    /// ascending.
    pub variance_ratios: Vec<f64>,
    /// Means under P₂ of the same coordinates.
    pub mean_offsets: Vec<f64>,
}

fn check_random_root(theta: &OUParams) -> Result<()> {
    theta.validate()?;
    if !(theta.alpha > 0.0) {
        return Err(Error::param("alpha", "random-root models need alpha > 0"));
    }
    Ok(())
}

/// Joint diagonalization: Cholesky of Σ₁, then a symmetric eigendecomposition
/// of `L₁⁻¹Σ₂L₁⁻ᵀ`.
pub fn whiten_pair(pair: &ModelPair) -> Result<WhitenedPair> {
    check_random_root(&pair.theta1)?;
    check_random_root(&pair.theta2)?;
    let d = distance_matrix(pair.tree);
    let s1 = ou_correlation(&d, pair.theta1.alpha) * pair.theta1.gamma;
    let s2 = ou_correlation(&d, pair.theta2.alpha) * pair.theta2.gamma;
    let l1 = Cholesky::new(&s1)?;
    let m = l1.congruence(&s2);
    let eig = SymmetricEigen::new(m);
    let n = pair.tree.n_tips();
    let offset = l1.whiten(&vec![pair.theta2.mu - pair.theta1.mu; n]);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|j| {
            let v = eig.eigenvectors.column(j);
            let mj: f64 = v.iter().zip(&offset).map(|(a, b)| a * b).sum();
            (eig.eigenvalues[j], mj)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    if let Some(&(v, _)) = pairs.first() {
        if !(v > 0.0) {
            return Err(Error::SingularCovariance { order: n, pivot: v });
        }
    }
    Ok(WhitenedPair {
        variance_ratios: pairs.iter().map(|p| p.0).collect(),
        mean_offsets: pairs.iter().map(|p| p.1).collect(),
    })
}

fn entropy_terms(variance_ratios: &[f64], mean_offsets: &[f64]) -> f64 {
    0.5 * variance_ratios
        .iter()
        .zip(mean_offsets)
        .map(|(&s, &m)| s + 1.0 / s - 2.0 + m * m + m * m / s)
        .sum::<f64>()
}

impl WhitenedPair {
    pub fn entropy_distance(&self) -> f64 {
        entropy_terms(&self.variance_ratios, &self.mean_offsets)
    }

    /// `Σ_j (σ²_j − 1)²`.
    pub fn rao_sum(&self) -> f64 {
        self.variance_ratios.iter().map(|s| (s - 1.0) * (s - 1.0)).sum()
    }
}

pub fn entropy_distance(pair: &ModelPair) -> Result<f64> {
    Ok(whiten_pair(pair)?.entropy_distance())
}

/// Entropy distance between two models that differ only in μ:
/// `(μ₁ − μ₂)²·1ᵀV⁻¹1/γ`.
pub fn mean_only_distance(tree: &Tree, mu1: f64, mu2: f64, alpha: f64, gamma: f64) -> Result<f64> {
    check_random_root(&OUParams::new(mu1, alpha, gamma)?)?;
    let chol = Cholesky::new(&ou_correlation(&distance_matrix(tree), alpha))?;
    let q = chol.quad_form(&vec![1.0; tree.n_tips()]);
    Ok((mu1 - mu2).powi(2) * q / gamma)
}

/// Entropy distance on a symmetric tree from the closed-form spectrum.
pub fn spectral_entropy_distance(spec: &SymmetricTreeSpec, theta1: &OUParams, theta2: &OUParams) -> Result<f64> {
    check_random_root(theta1)?;
    check_random_root(theta2)?;
    let e1 = eigensystem(spec, theta1.alpha)?;
    let e2 = eigensystem(spec, theta2.alpha)?;
    let mut r = 0.0;
    for k in 0..e1.values.len() {
        let s = theta2.gamma * e2.values[k] / (theta1.gamma * e1.values[k]);
        r += 0.5 * e1.multiplicities[k] as f64 * (s + 1.0 / s - 2.0);
        if k == 0 {
            let n = spec.n_tips() as f64;
            let m2 = (theta2.mu - theta1.mu).powi(2) * n / (theta1.gamma * e1.values[0]);
            r += 0.5 * (m2 + m2 / s);
        }
    }
    Ok(r)
}

/// Lower bound on the entropy distance from a set of independent contrasts
/// (mean-free, so only the variance ratios enter).
pub fn contrast_entropy_bound(contrast_ages: &[f64], theta1: &OUParams, theta2: &OUParams) -> f64 {
    contrast_ages
        .iter()
        .map(|&t| {
            let s = f_t(theta2.gamma, theta2.alpha, t) / f_t(theta1.gamma, theta1.alpha, t);
            0.5 * (s + 1.0 / s - 2.0)
        })
        .sum()
}

/// `γ(1 − e^{−2αt})` for `t > 0`, and `γα` at `t = 0`.
pub fn f_t(gamma: f64, alpha: f64, t: f64) -> f64 {
    if t > 0.0 {
        gamma * -(-2.0 * alpha * t).exp_m1()
    } else {
        gamma * alpha
    }
}

/// `z_m = Σ_{k=1}^m d^{k−1}(d−1)(γ₁λ_k(α₁)/(γ₂λ_k(α₂)) − 1)²` for
/// `m = 2..=m_max` along a dense-tip family.
///
/// The pair must agree on the functional that is microergodic for the
/// family (`γα` when `t0 = 0`, `f_{t0}` otherwise), so that any divergence
/// of `z_m` comes from the accumulation of node ages and not from that
/// functional.
pub fn rao_sum_sequence(family: &DenseTipSpec, theta1: &OUParams, theta2: &OUParams, m_max: usize) -> Result<Vec<(usize, f64)>> {
    check_random_root(theta1)?;
    check_random_root(theta2)?;
    let f1 = f_t(theta1.gamma, theta1.alpha, family.t0);
    let f2 = f_t(theta2.gamma, theta2.alpha, family.t0);
    if (f1 - f2).abs() > 1e-10 * f1.abs().max(f2.abs()) {
        return Err(Error::param(
            "theta",
            format!(
                "pair is not matched at t0 = {}: f = {f1} vs {f2}",
                family.t0
            ),
        ));
    }
    if m_max < 2 {
        return Err(Error::param("m_max", "must be >= 2"));
    }
    let mut out = Vec::with_capacity(m_max - 1);
    for m in 2..=m_max {
        let spec = DenseTipSpec { m, ..*family }.to_spec()?;
        let e1 = eigensystem(&spec, theta1.alpha)?;
        let e2 = eigensystem(&spec, theta2.alpha)?;
        let z: f64 = (1..=m)
            .map(|k| {
                let ratio = theta1.gamma * e1.values[k] / (theta2.gamma * e2.values[k]);
                e1.multiplicities[k] as f64 * (ratio - 1.0).powi(2)
            })
            .sum();
        out.push((m, z));
    }
    Ok(out)
}

/// `Σ_i (T_i − t)²` over the node-age multiset for each `t` in the grid.
pub fn age_divergence_profile(tree: &Tree, t_grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    tree.require_ultrametric(DEFAULT_ULTRAMETRIC_TOL)?;
    let ages = age_multiset(tree);
    Ok(t_grid
        .iter()
        .map(|&t| (t, ages.iter().map(|a| (a - t) * (a - t)).sum()))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: usize,
}

/// Equal-width histogram of the node-age multiset on `[0, T]`.
pub fn age_histogram(tree: &Tree, bins: usize) -> Result<Vec<HistogramBin>> {
    tree.require_ultrametric(DEFAULT_ULTRAMETRIC_TOL)?;
    if bins == 0 {
        return Err(Error::param("bins", "must be >= 1"));
    }
    let height = tree.height();
    let width = height / bins as f64;
    let mut counts = vec![0usize; bins];
    for a in age_multiset(tree) {
        let b = if width > 0.0 { ((a / width) as usize).min(bins - 1) } else { 0 };
        counts[b] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            bin_left: width * i as f64,
            bin_right: if i + 1 == bins { height } else { width * (i + 1) as f64 },
            count,
        })
        .collect())
}

/// Two-column CSV with the given header.
pub fn write_two_column_csv<W: Write, A: std::fmt::Display, B: std::fmt::Display>(
    header: [&str; 2],
    rows: &[(A, B)],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for (a, b) in rows {
        w.write_record([a.to_string(), b.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_histogram_csv<W: Write>(bins: &[HistogramBin], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for b in bins {
        w.serialize(b)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symtree::build_symmetric_tree;
    use crate::tree::parse_newick;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn p(mu: f64, alpha: f64, gamma: f64) -> OUParams {
        OUParams::new(mu, alpha, gamma).unwrap()
    }

    fn five_tip() -> Tree {
        parse_newick("(((A:0.5,B:0.5):0.5,C:1):1,(D:1.5,E:1.5):0.5);").unwrap()
    }

    // ½[tr(Σ₂⁻¹Σ₁) + tr(Σ₁⁻¹Σ₂) − 2n + Δᵀ(Σ₁⁻¹ + Σ₂⁻¹)Δ]
    fn kl_oracle(tree: &Tree, t1: &OUParams, t2: &OUParams) -> f64 {
        let d = distance_matrix(tree);
        let s1 = ou_correlation(&d, t1.alpha) * t1.gamma;
        let s2 = ou_correlation(&d, t2.alpha) * t2.gamma;
        let i1 = s1.clone().try_inverse().unwrap();
        let i2 = s2.clone().try_inverse().unwrap();
        let n = tree.n_tips();
        let delta = nalgebra::DVector::from_element(n, t2.mu - t1.mu);
        let quad = (delta.transpose() * (&i1 + &i2) * &delta)[0];
        0.5 * ((&i2 * &s1).trace() + (&i1 * &s2).trace() - 2.0 * n as f64 + quad)
    }

    #[test]
    fn identical_models() {
        let t = five_tip();
        let w = whiten_pair(&ModelPair { tree: &t, theta1: p(1.0, 0.5, 2.0), theta2: p(1.0, 0.5, 2.0) }).unwrap();
        for (s, m) in w.variance_ratios.iter().zip(&w.mean_offsets) {
            assert_relative_eq!(*s, 1.0, epsilon = 1e-12);
            assert!(m.abs() < 1e-12);
        }
        assert!(w.entropy_distance().abs() < 1e-12);
    }

    #[test]
    fn scaled_covariance() {
        let t = five_tip();
        let w = whiten_pair(&ModelPair { tree: &t, theta1: p(0.0, 0.5, 2.0), theta2: p(0.0, 0.5, 6.0) }).unwrap();
        for s in &w.variance_ratios {
            assert_relative_eq!(*s, 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn three_tip_generalized_eigenvalues() {
        let t = parse_newick("((A:1,B:1):1,C:2):0;").unwrap();
        let (t1, t2) = (p(0.0, 0.3, 1.0), p(0.5, 1.1, 0.7));
        let w = whiten_pair(&ModelPair { tree: &t, theta1: t1, theta2: t2 }).unwrap();
        // Oracle: eigenvalues of Σ₁⁻¹Σ₂ via nalgebra's general solver on the
        // symmetric form S₁^{-1/2} Σ₂ S₁^{-1/2}.
        let d = distance_matrix(&t);
        let s1 = ou_correlation(&d, t1.alpha) * t1.gamma;
        let s2 = ou_correlation(&d, t2.alpha) * t2.gamma;
        let e1 = SymmetricEigen::new(s1);
        let half_inv = &e1.eigenvectors
            * DMatrix::from_diagonal(&e1.eigenvalues.map(|v| 1.0 / v.sqrt()))
            * e1.eigenvectors.transpose();
        let mut oracle: Vec<f64> = SymmetricEigen::new(&half_inv * s2 * &half_inv).eigenvalues.iter().copied().collect();
        oracle.sort_by(f64::total_cmp);
        for (a, b) in w.variance_ratios.iter().zip(&oracle) {
            assert_relative_eq!(*a, *b, epsilon = 1e-10);
        }
    }

    #[test]
    fn single_tip_unit_mean_shift() {
        let t = parse_newick("A:1;").unwrap();
        let r = entropy_distance(&ModelPair { tree: &t, theta1: p(0.0, 0.4, 1.0), theta2: p(1.0, 0.4, 1.0) }).unwrap();
        assert_relative_eq!(r, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn general_pair_matches_kl() {
        let t = five_tip();
        let (t1, t2) = (p(0.2, 0.3, 1.0), p(-0.4, 1.4, 0.6));
        let r = entropy_distance(&ModelPair { tree: &t, theta1: t1, theta2: t2 }).unwrap();
        assert_relative_eq!(r, kl_oracle(&t, &t1, &t2), max_relative = 1e-10);
        let back = entropy_distance(&ModelPair { tree: &t, theta1: t2, theta2: t1 }).unwrap();
        assert!((r - back).abs() < 1e-10);
    }

    #[test]
    fn mean_only_shortcut_and_bound() {
        let t = five_tip();
        let (a, g) = (0.7, 1.3);
        let r = entropy_distance(&ModelPair { tree: &t, theta1: p(0.0, a, g), theta2: p(0.8, a, g) }).unwrap();
        let short = mean_only_distance(&t, 0.0, 0.8, a, g).unwrap();
        assert_relative_eq!(r, short, max_relative = 1e-10);
        let bound = 0.64 / (g * (-2.0 * a * t.height()).exp());
        assert!(short <= bound);
    }

    #[test]
    fn spectral_distance_matches_dense() {
        let spec = SymmetricTreeSpec::new(vec![2, 3, 2], vec![1.5, 0.7, 0.2]).unwrap();
        let t = build_symmetric_tree(&spec);
        let (t1, t2) = (p(0.1, 0.4, 1.2), p(0.6, 0.9, 0.8));
        let dense = entropy_distance(&ModelPair { tree: &t, theta1: t1, theta2: t2 }).unwrap();
        let spectral = spectral_entropy_distance(&spec, &t1, &t2).unwrap();
        assert_relative_eq!(dense, spectral, max_relative = 1e-10);
    }

    #[test]
    fn f_t_values() {
        assert_eq!(f_t(1.0, 0.1, 0.0), 0.1);
        let (g, a) = (2.0, 0.5);
        let t = 1e-4 / a;
        let gap = (f_t(g, a, t) - 2.0 * g * a * t).abs() / (2.0 * g * a * t);
        assert!(gap < 1e-4 * 1.01 && gap > 0.0);
        assert!(f_t(g, a, 0.5) < f_t(g, a, 0.6));
        assert!(f_t(g, a, 0.5) < f_t(g, a * 1.1, 0.5));
        assert!(f_t(g, a, 0.5) < f_t(g * 1.1, a, 0.5));
    }

    #[test]
    fn rao_sum_requires_matching() {
        let fam = DenseTipSpec { d: 2, q: 0.7, t0: 0.0, m: 2 };
        let same = rao_sum_sequence(&fam, &p(0.0, 0.1, 1.0), &p(0.0, 0.1, 1.0), 6).unwrap();
        assert!(same.iter().all(|&(_, z)| z == 0.0));
        assert!(rao_sum_sequence(&fam, &p(0.0, 0.1, 1.0), &p(0.0, 0.3, 1.0), 6).is_err());
    }

    #[test]
    fn age_profile_and_histogram() {
        let star = parse_newick("(A:2,B:2,C:2);").unwrap();
        assert_eq!(age_divergence_profile(&star, &[2.0]).unwrap(), vec![(2.0, 0.0)]);
        let bal = build_symmetric_tree(&SymmetricTreeSpec::new(vec![2, 2], vec![2.0, 1.0]).unwrap());
        assert_eq!(age_divergence_profile(&bal, &[1.0]).unwrap(), vec![(1.0, 1.0)]);
        let h = age_histogram(&bal, 4).unwrap();
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![0, 0, 2, 1]);
        assert_eq!(h[3].bin_right, 2.0);
    }
}
