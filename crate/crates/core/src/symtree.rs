//! Symmetric trees: every level-`k` node has `d_k` children and age `u_k`.
//!
//! The root is the single level-1 node. Tips sit below level `m` at age 0.
//! For such trees the random-root OU correlation matrix has a closed-form
//! spectrum whose eigenvectors are block contrasts that do not depend on α.

use std::io::Write;

use nalgebra::{DMatrix, Matrix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{Node, Tree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct SymmetricTreeSpec {
    degrees: Vec<usize>,
    ages: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    m: usize,
    degrees: Vec<usize>,
    ages: Vec<f64>,
}

impl TryFrom<RawSpec> for SymmetricTreeSpec {
    type Error = Error;
    fn try_from(raw: RawSpec) -> Result<Self> {
        if raw.m != raw.degrees.len() || raw.m != raw.ages.len() {
            return Err(Error::config(
                "m",
                format!(
                    "m = {} but {} degrees and {} ages were given",
                    raw.m,
                    raw.degrees.len(),
                    raw.ages.len()
                ),
            ));
        }
        SymmetricTreeSpec::new(raw.degrees, raw.ages)
    }
}

impl From<SymmetricTreeSpec> for RawSpec {
    fn from(s: SymmetricTreeSpec) -> RawSpec {
        RawSpec {
            m: s.degrees.len(),
            degrees: s.degrees,
            ages: s.ages,
        }
    }
}

impl SymmetricTreeSpec {
    pub fn new(degrees: Vec<usize>, ages: Vec<f64>) -> Result<SymmetricTreeSpec> {
        if degrees.is_empty() {
            return Err(Error::config("degrees", "at least one level is required"));
        }
        if degrees.len() != ages.len() {
            return Err(Error::config("ages", "need exactly one age per level"));
        }
        if let Some(d) = degrees.iter().find(|&&d| d < 2) {
            return Err(Error::config("degrees", format!("every degree must be >= 2, got {d}")));
        }
        if ages.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::config("ages", "ages must be finite and > 0"));
        }
        if ages.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::config("ages", "ages must be strictly decreasing"));
        }
        degrees
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::config("degrees", "tip count overflows"))?;
        Ok(SymmetricTreeSpec { degrees, ages })
    }

    pub fn m(&self) -> usize {
        self.degrees.len()
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    /// Node ages `u_1 > … > u_m`.
    pub fn ages(&self) -> &[f64] {
        &self.ages
    }

    pub fn n_tips(&self) -> usize {
        self.degrees.iter().product()
    }

    /// `n / d_m`, the number of level-`m` nodes.
    pub fn n_tilde(&self) -> usize {
        self.n_tips() / self.degrees[self.m() - 1]
    }

    pub fn height(&self) -> f64 {
        self.ages[0]
    }

    /// Length of the edges below each level: `t_k = u_k − u_{k+1}`, `u_{m+1} = 0`.
    pub fn branch_lengths(&self) -> Vec<f64> {
        (0..self.m()).map(|k| self.ages[k] - self.age_below(k)).collect()
    }

    // Age of the children of the nodes at 0-based level `k`.
    fn age_below(&self, k: usize) -> f64 {
        self.ages.get(k + 1).copied().unwrap_or(0.0)
    }

    /// `d_{k+1}⋯d_m` for 1-based `k` (block size below a level-`k+1` node).
    fn block(&self, k: usize) -> usize {
        self.degrees[k..].iter().product()
    }

    /// Multiplicity of the level-`k` eigenvalue, `k = 0..=m`.
    pub fn multiplicity(&self, k: usize) -> usize {
        if k == 0 {
            1
        } else {
            self.degrees[..k - 1].iter().product::<usize>() * (self.degrees[k - 1] - 1)
        }
    }
}

/// Nested dense-tip family: degree `d` at every level and ages `q^k + t0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenseTipSpec {
    pub d: usize,
    pub q: f64,
    pub t0: f64,
    pub m: usize,
}

impl DenseTipSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::config("d", "degree must be >= 2"));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::config("q", "must lie in (0, 1)"));
        }
        if !(self.t0 >= 0.0 && self.t0.is_finite()) {
            return Err(Error::config("t0", "must be finite and >= 0"));
        }
        if self.m == 0 {
            return Err(Error::config("m", "must be >= 1"));
        }
        Ok(())
    }

    pub fn to_spec(&self) -> Result<SymmetricTreeSpec> {
        self.validate()?;
        let ages = (1..=self.m).map(|k| self.q.powi(k as i32) + self.t0).collect();
        SymmetricTreeSpec::new(vec![self.d; self.m], ages)
    }

    /// `d·q²`; below 1 the ages accumulate slowly enough near `t0` that
    /// (γ, α) is not separately identifiable when `t0 = 0`.
    pub fn dq2(&self) -> f64 {
        self.d as f64 * self.q * self.q
    }
}

/// Tree for a spec; tips are labelled `t1..tn` in block order.
pub fn build_symmetric_tree(spec: &SymmetricTreeSpec) -> Tree {
    let m = spec.m();
    let mut nodes = vec![Node {
        parent: None,
        children: Vec::new(),
        length: 0.0,
        label: None,
    }];
    let mut frontier = vec![0usize];
    for level in 0..m {
        let length = spec.ages[level] - spec.age_below(level);
        let mut next = Vec::with_capacity(frontier.len() * spec.degrees[level]);
        for &p in &frontier {
            for _ in 0..spec.degrees[level] {
                let id = nodes.len();
                nodes.push(Node {
                    parent: Some(p),
                    children: Vec::new(),
                    length,
                    label: None,
                });
                nodes[p].children.push(id);
                next.push(id);
            }
        }
        frontier = next;
    }
    for (i, &t) in frontier.iter().enumerate() {
        nodes[t].label = Some(format!("t{}", i + 1));
    }
    Tree::from_nodes(nodes, 0, None).expect("symmetric tree is valid")
}

/// Distinct eigenvalues `λ_0..λ_m` of the correlation matrix and their
/// multiplicities.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSystem {
    pub alpha: f64,
    pub values: Vec<f64>,
    pub multiplicities: Vec<usize>,
}

impl EigenSystem {
    /// Every eigenvalue repeated by multiplicity, in descending order.
    pub fn expanded(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (v, &k) in self.values.iter().zip(&self.multiplicities) {
            out.extend(std::iter::repeat_n(*v, k));
        }
        out.sort_by(|a, b| b.total_cmp(a));
        out
    }

    pub fn log_det(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.multiplicities)
            .map(|(v, &k)| k as f64 * v.ln())
            .sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "lambda", "multiplicity"])?;
        for (k, (v, m)) in self.values.iter().zip(&self.multiplicities).enumerate() {
            w.write_record([k.to_string(), format!("{v}"), m.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn require_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::param("alpha", format!("must be finite and > 0, got {alpha}")))
    }
}

// λ_k and dλ_k/dα for k = 0..=m. Each summand e^{-2αu_{i+1}} − e^{-2αu_i}
// is formed with expm1 so short edges keep their precision.
fn lambda_and_derivative(spec: &SymmetricTreeSpec, alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let m = spec.m();
    let mut term = vec![0.0; m];
    let mut dterm = vec![0.0; m];
    for i in 0..m {
        let hi = spec.ages[i];
        let lo = spec.age_below(i);
        let e_lo = (-2.0 * alpha * lo).exp();
        let e_hi = (-2.0 * alpha * hi).exp();
        let w = spec.block(i + 1) as f64;
        term[i] = w * e_lo * -(-2.0 * alpha * (hi - lo)).exp_m1();
        dterm[i] = w * (2.0 * hi * e_hi - 2.0 * lo * e_lo);
    }
    let mut values = vec![0.0; m + 1];
    let mut derivs = vec![0.0; m + 1];
    let (mut acc, mut dacc) = (0.0, 0.0);
    for k in (1..=m).rev() {
        acc += term[k - 1];
        dacc += dterm[k - 1];
        values[k] = acc;
        derivs[k] = dacc;
    }
    let n = spec.n_tips() as f64;
    let e_root = (-2.0 * alpha * spec.ages[0]).exp();
    values[0] = n * e_root + values[1];
    derivs[0] = -2.0 * spec.ages[0] * n * e_root + derivs[1];
    (values, derivs)
}

pub fn eigensystem(spec: &SymmetricTreeSpec, alpha: f64) -> Result<EigenSystem> {
    require_alpha(alpha)?;
    let (values, _) = lambda_and_derivative(spec, alpha);
    Ok(EigenSystem {
        alpha,
        values,
        multiplicities: (0..=spec.m()).map(|k| spec.multiplicity(k)).collect(),
    })
}

/// `Λ_k = λ_k'/λ_k` for `k = 0..=m`, differentiated analytically.
pub fn lambda_log_derivatives(spec: &SymmetricTreeSpec, alpha: f64) -> Result<Vec<f64>> {
    require_alpha(alpha)?;
    let (v, d) = lambda_and_derivative(spec, alpha);
    Ok(d.iter().zip(&v).map(|(d, v)| d / v).collect())
}

/// Orthonormal eigenbasis of the correlation matrix, columns grouped by
/// level `k = 0..=m` (Helmert contrasts between sibling blocks). Dense
/// `n × n`; intended for small trees.
pub fn eigenbasis(spec: &SymmetricTreeSpec) -> (DMatrix<f64>, Vec<usize>) {
    let n = spec.n_tips();
    let mut basis = DMatrix::zeros(n, n);
    let mut level_of_column = Vec::with_capacity(n);
    basis.column_mut(0).fill(1.0 / (n as f64).sqrt());
    level_of_column.push(0);
    let mut col = 1;
    for k in 1..=spec.m() {
        let d = spec.degrees[k - 1];
        let b = spec.block(k);
        let nodes = n / (d * b);
        for node in 0..nodes {
            let start = node * d * b;
            for j in 1..d {
                let norm = ((b * (j + j * j)) as f64).sqrt();
                for c in 0..j {
                    for r in 0..b {
                        basis[(start + c * b + r, col)] = 1.0 / norm;
                    }
                }
                for r in 0..b {
                    basis[(start + j * b + r, col)] = -(j as f64) / norm;
                }
                level_of_column.push(k);
                col += 1;
            }
        }
    }
    (basis, level_of_column)
}

/// Squared norms `Q_0..Q_m` of the projections of `y` onto each eigenspace.
/// `y` must be in the tip order of [`build_symmetric_tree`].
pub fn level_sums_of_squares(spec: &SymmetricTreeSpec, y: &[f64]) -> Result<Vec<f64>> {
    let n = spec.n_tips();
    if y.len() != n {
        return Err(Error::param("data", format!("expected {n} values, got {}", y.len())));
    }
    let m = spec.m();
    let mut q = vec![0.0; m + 1];
    let mut sums = y.to_vec();
    for k in (1..=m).rev() {
        let d = spec.degrees[k - 1];
        let b = spec.block(k) as f64;
        let mut parent = Vec::with_capacity(sums.len() / d);
        let mut qk = 0.0;
        for chunk in sums.chunks_exact(d) {
            let total: f64 = chunk.iter().sum();
            let sq: f64 = chunk.iter().map(|s| s * s).sum();
            // Within-node spread; written as a centered sum to avoid cancellation.
            let mean = total / d as f64;
            let centered: f64 = chunk.iter().map(|s| (s - mean) * (s - mean)).sum();
            debug_assert!(centered <= sq + 1e-9 * sq.abs().max(1.0));
            qk += centered / b;
            parent.push(total);
        }
        q[k] = qk;
        sums = parent;
    }
    q[0] = sums[0] * sums[0] / n as f64;
    Ok(q)
}

/// Fisher information of the REML likelihood in `(ν, α)`, `ν = γλ_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherInfo {
    pub matrix: Matrix2<f64>,
    pub det: f64,
    /// `Λ_{k,m}` for `k = 1..=m`.
    pub lambda_ratios: Vec<f64>,
    /// `q_{k,n}` for `k = 1..=m`.
    pub weights: Vec<f64>,
}

impl FisherInfo {
    pub fn inverse(&self) -> Matrix2<f64> {
        self.matrix.try_inverse().expect("Fisher information is positive definite")
    }
}

pub fn fisher_info(spec: &SymmetricTreeSpec, nu: f64, alpha: f64) -> Result<FisherInfo> {
    let m = spec.m();
    if m < 2 {
        return Err(Error::param(
            "spec",
            "alpha is not identifiable from the REML spectrum of a one-level tree",
        ));
    }
    require_alpha(alpha)?;
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::param("nu", "must be finite and > 0"));
    }
    let ratios = lambda_log_derivatives(spec, alpha)?;
    let lm = ratios[m];
    let n1 = (spec.n_tips() - 1) as f64;
    let (mut s1, mut s2) = (0.0, 0.0);
    let mut lambda_ratios = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    for (k, &r) in ratios.iter().enumerate().take(m + 1).skip(1) {
        let mult = spec.multiplicity(k) as f64;
        let delta = r - lm;
        s1 += mult * delta;
        s2 += mult * delta * delta;
        lambda_ratios.push(r);
        weights.push(mult / n1);
    }
    let matrix = Matrix2::new(n1 / (2.0 * nu * nu), s1 / (2.0 * nu), s1 / (2.0 * nu), s2 / 2.0);
    // (n−1)²/(4ν²)·var_q(Λ_K − Λ_m), computed from centered terms.
    let mean = s1 / n1;
    let var: f64 = (1..=m)
        .map(|k| {
            let d = ratios[k] - lm - mean;
            spec.multiplicity(k) as f64 / n1 * d * d
        })
        .sum();
    let det = n1 * n1 / (4.0 * nu * nu) * var;
    Ok(FisherInfo {
        matrix,
        det,
        lambda_ratios,
        weights,
    })
}

/// Asymptotic design for the α-variance limit: ages and degrees are fixed
/// except `d_1..d_s`, which grow, and optionally `d_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthFamily {
    /// Ages and the fixed degrees `d_{s+1}..d_{m−1}` (and `d_m` unless it grows).
    pub spec: SymmetricTreeSpec,
    /// Largest diverging level below `m`, 1-based.
    pub s: usize,
    pub last_degree_grows: bool,
}

/// Limit of `ñ·var(α̂)` for the REML estimator along a growth family.
pub fn v_alpha_limit(family: &GrowthFamily, alpha: f64) -> Result<f64> {
    require_alpha(alpha)?;
    let spec = &family.spec;
    let m = spec.m();
    let s = family.s;
    if m < 2 {
        return Err(Error::param("spec", "need at least two levels"));
    }
    if s < 1 || s > m - 1 {
        return Err(Error::param("s", format!("must lie in 1..={}, got {s}", m - 1)));
    }
    let d = spec.degrees();
    // Limiting age frequencies p_s..p_{m−1}.
    let tail = |from: usize| -> f64 { d[from - 1..m - 1].iter().map(|&x| x as f64).product() };
    let mut p = vec![0.0; m];
    p[s - 1] = 1.0 / tail(s + 1);
    for k in s + 1..m {
        p[k - 1] = (d[k - 1] - 1) as f64 / tail(k);
    }

    let ratios: Vec<f64> = if family.last_degree_grows {
        // With d_m → ∞ the terms carrying the factor d_m dominate λ_k for k < m.
        let top_ages = spec.ages[..m - 1].to_vec();
        let mut lam = Vec::with_capacity(m);
        for k in 1..m {
            let (mut v, mut dv) = (0.0, 0.0);
            for i in k..m {
                let hi = top_ages[i - 1];
                let lo = spec.ages[i];
                let w: f64 = d[i..m - 1].iter().map(|&x| x as f64).product();
                let e_lo = (-2.0 * alpha * lo).exp();
                let e_hi = (-2.0 * alpha * hi).exp();
                v += w * e_lo * -(-2.0 * alpha * (hi - lo)).exp_m1();
                dv += w * (2.0 * hi * e_hi - 2.0 * lo * e_lo);
            }
            lam.push(dv / v);
        }
        let um = spec.ages[m - 1];
        let e = (-2.0 * alpha * um).exp();
        lam.push(2.0 * um * e / -(-2.0 * alpha * um).exp_m1());
        lam
    } else {
        lambda_log_derivatives(spec, alpha)?[1..].to_vec()
    };
    let lm = ratios[m - 1];
    let (mut s1, mut s2) = (0.0, 0.0);
    for k in s..m {
        let delta = ratios[k - 1] - lm;
        s1 += p[k - 1] * delta;
        s2 += p[k - 1] * delta * delta;
    }
    let denom = if family.last_degree_grows {
        s2
    } else {
        s2 - s1 * s1 / d[m - 1] as f64
    };
    if !(denom > 0.0) {
        return Err(Error::Numerical("degenerate family: all Λ_k − Λ_m vanish".into()));
    }
    Ok(2.0 / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ou::{covariance, OUParams, RootMode};
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn dense_eigs(spec: &SymmetricTreeSpec, alpha: f64) -> Vec<f64> {
        let t = build_symmetric_tree(spec);
        let c = covariance(&t, &OUParams::new(0.0, alpha, 1.0).unwrap(), RootMode::Random).unwrap();
        let mut e: Vec<f64> = c.matrix.symmetric_eigenvalues().iter().copied().collect();
        e.sort_by(|a, b| b.total_cmp(a));
        e
    }

    #[test]
    fn star_eigenvalues() {
        let spec = SymmetricTreeSpec::new(vec![3], vec![1.0]).unwrap();
        let t = build_symmetric_tree(&spec);
        assert_eq!(t.n_tips(), 3);
        assert_eq!(t.height(), 1.0);
        let alpha = 0.7;
        let es = eigensystem(&spec, alpha).unwrap();
        let e = (-2.0 * alpha).exp();
        assert_relative_eq!(es.values[1], 1.0 - e, epsilon = 1e-15);
        assert_relative_eq!(es.values[0], 1.0 + 2.0 * e, epsilon = 1e-15);
        assert_eq!(es.multiplicities, vec![1, 2]);
        let dense = dense_eigs(&spec, alpha);
        for (a, b) in es.expanded().iter().zip(&dense) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_level_matches_dense_and_traces() {
        let spec = SymmetricTreeSpec::new(vec![3, 4], vec![2.0, 0.5]).unwrap();
        let es = eigensystem(&spec, 0.3).unwrap();
        let trace: f64 = es.values.iter().zip(&es.multiplicities).map(|(v, &k)| v * k as f64).sum();
        assert_relative_eq!(trace, 12.0, epsilon = 1e-12);
        assert_eq!(es.multiplicities.iter().sum::<usize>(), 12);
        assert_relative_eq!(es.values[2], 1.0 - (-2.0 * 0.3 * 0.5f64).exp(), epsilon = 1e-15);
        for (a, b) in es.expanded().iter().zip(&dense_eigs(&spec, 0.3)) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(es.values.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn eigenbasis_is_alpha_free() {
        let spec = SymmetricTreeSpec::new(vec![2, 3, 2], vec![3.0, 1.0, 0.2]).unwrap();
        let (basis, levels) = eigenbasis(&spec);
        let n = spec.n_tips();
        assert_relative_eq!(basis.transpose() * &basis, DMatrix::identity(n, n), epsilon = 1e-12);
        let t = build_symmetric_tree(&spec);
        for alpha in [0.2, 1.7] {
            let v = covariance(&t, &OUParams::new(0.0, alpha, 1.0).unwrap(), RootMode::Random)
                .unwrap()
                .matrix;
            let es = eigensystem(&spec, alpha).unwrap();
            for (c, &k) in levels.iter().enumerate() {
                let col = basis.column(c).into_owned();
                let lhs: DVector<f64> = &v * &col;
                assert_relative_eq!(lhs, col * es.values[k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn level_sums_match_projection() {
        let spec = SymmetricTreeSpec::new(vec![3, 2, 2], vec![2.0, 1.0, 0.3]).unwrap();
        let (basis, levels) = eigenbasis(&spec);
        let y: Vec<f64> = (0..12).map(|i| ((i * 37) % 11) as f64 / 3.0 - 1.0).collect();
        let q = level_sums_of_squares(&spec, &y).unwrap();
        let coords = basis.transpose() * DVector::from_vec(y.clone());
        let mut direct = [0.0; 4];
        for (c, &k) in levels.iter().enumerate() {
            direct[k] += coords[c] * coords[c];
        }
        for k in 0..4 {
            assert_relative_eq!(q[k], direct[k], epsilon = 1e-12);
        }
        let total: f64 = y.iter().map(|v| v * v).sum();
        assert_relative_eq!(q.iter().sum::<f64>(), total, epsilon = 1e-12);
    }

    #[test]
    fn derivatives_match_central_differences() {
        let spec = SymmetricTreeSpec::new(vec![2, 3, 4], vec![1.5, 0.8, 0.1]).unwrap();
        let alpha = 0.6;
        let h = 1e-6;
        let analytic = lambda_log_derivatives(&spec, alpha).unwrap();
        let up = eigensystem(&spec, alpha + h).unwrap().values;
        let dn = eigensystem(&spec, alpha - h).unwrap().values;
        let mid = eigensystem(&spec, alpha).unwrap().values;
        for k in 0..=3 {
            let fd = (up[k] - dn[k]) / (2.0 * h) / mid[k];
            assert_relative_eq!(analytic[k], fd, epsilon = 1e-7, max_relative = 1e-6);
        }
    }

    #[test]
    fn fisher_det_matches_matrix() {
        let spec = SymmetricTreeSpec::new(vec![4, 3, 5], vec![2.0, 1.0, 0.25]).unwrap();
        let f = fisher_info(&spec, 0.7, 0.4).unwrap();
        assert_relative_eq!(f.det, f.matrix.determinant(), max_relative = 1e-10);
        assert!(f.det > 0.0);
        assert!(f.lambda_ratios.windows(2).all(|w| w[0] < w[1]));
        assert_relative_eq!(f.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let one_level = SymmetricTreeSpec::new(vec![5], vec![1.0]).unwrap();
        assert!(fisher_info(&one_level, 1.0, 1.0).is_err());
    }

    #[test]
    fn v_alpha_fixed_formula_approaches_limit() {
        let ages = vec![1.0, 0.5];
        let limit = v_alpha_limit(
            &GrowthFamily {
                spec: SymmetricTreeSpec::new(vec![32, 8], ages.clone()).unwrap(),
                s: 1,
                last_degree_grows: true,
            },
            0.5,
        )
        .unwrap();
        let mut prev_gap = f64::INFINITY;
        for dm in [8, 64, 512, 4096, 1 << 16] {
            let v = v_alpha_limit(
                &GrowthFamily {
                    spec: SymmetricTreeSpec::new(vec![32, dm], ages.clone()).unwrap(),
                    s: 1,
                    last_degree_grows: false,
                },
                0.5,
            )
            .unwrap();
            assert!(v > 0.0);
            let gap = (v - limit).abs();
            assert!(gap < prev_gap);
            prev_gap = gap;
        }
        assert!(prev_gap / limit < 1e-3);
    }

    #[test]
    fn v_alpha_matches_scaled_inverse_fisher() {
        // For m = 2 with d_1 fixed, ñ·[B⁻¹]_αα has the same deterministic form.
        let spec = SymmetricTreeSpec::new(vec![32, 16], vec![1.0, 0.5]).unwrap();
        let f = fisher_info(&spec, 0.3, 0.5).unwrap();
        let from_fisher = spec.n_tilde() as f64 * f.inverse()[(1, 1)];
        let v = v_alpha_limit(
            &GrowthFamily {
                spec: spec.clone(),
                s: 1,
                last_degree_grows: false,
            },
            0.5,
        )
        .unwrap();
        // Differs only by the (ñ−1)/ñ and (n−1)/(n − ñ) finite-size factors.
        assert_relative_eq!(from_fisher, v, max_relative = 0.05);
    }

    #[test]
    fn spec_json_round_trip_and_validation() {
        let spec = SymmetricTreeSpec::new(vec![2, 2], vec![2.0, 1.0]).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(text, r#"{"m":2,"degrees":[2,2],"ages":[2.0,1.0]}"#);
        let back: SymmetricTreeSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        assert!(serde_json::from_str::<SymmetricTreeSpec>(r#"{"m":2,"degrees":[2,2],"ages":[1.0,2.0]}"#).is_err());
        assert!(serde_json::from_str::<SymmetricTreeSpec>(r#"{"m":3,"degrees":[2,2],"ages":[2.0,1.0]}"#).is_err());
        assert!(SymmetricTreeSpec::new(vec![1, 2], vec![2.0, 1.0]).is_err());
    }

    #[test]
    fn dense_tip_family() {
        let f = DenseTipSpec { d: 2, q: 0.7, t0: 0.0, m: 12 };
        let spec = f.to_spec().unwrap();
        assert_eq!(spec.n_tips(), 4096);
        assert_relative_eq!(spec.height(), 0.7, epsilon = 1e-15);
        assert_relative_eq!(f.dq2(), 0.98, epsilon = 1e-12);
        let t = build_symmetric_tree(&spec);
        assert!(t.is_ultrametric(1e-12));
        assert_eq!(t.n_tips(), 4096);
    }
}
