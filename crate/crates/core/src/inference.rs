//! GLS mean, exact random-root likelihoods and profile ML/REML fitting.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::optimize::{brent_minimize, TraceStep};
use crate::ou::{ou_correlation, OUParams};
use crate::symtree::{eigensystem, level_sums_of_squares, SymmetricTreeSpec};
use crate::tree::{distance_matrix, Tree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ml,
    Reml,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Mode> {
        match s.to_ascii_lowercase().as_str() {
            "ml" => Ok(Mode::Ml),
            "reml" => Ok(Mode::Reml),
            other => Err(Error::config("mode", format!("expected `ml` or `reml`, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Ml => "ml",
            Mode::Reml => "reml",
        })
    }
}

fn check_data(tree: &Tree, data: &[f64]) -> Result<()> {
    if data.len() != tree.n_tips() {
        return Err(Error::param(
            "data",
            format!("expected {} values, got {}", tree.n_tips(), data.len()),
        ));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("data", "values must be finite"));
    }
    Ok(())
}

fn correlation(tree: &Tree, alpha: f64) -> Result<DMatrix<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::param("alpha", format!("must be finite and > 0, got {alpha}")));
    }
    Ok(ou_correlation(&distance_matrix(tree), alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GlsMean {
    pub mu: f64,
    /// `γ/(1ᵀV⁻¹1)`; the sampling variance when `alpha_star` is the true α.
    pub var: f64,
}

/// Generalized least squares mean under the correlation `V_{α*}`.
pub fn gls_mean(data: &[f64], tree: &Tree, alpha_star: f64, gamma: f64) -> Result<GlsMean> {
    check_data(tree, data)?;
    let chol = Cholesky::new(&correlation(tree, alpha_star)?)?;
    let w = chol.solve(&vec![1.0; data.len()]);
    let denom: f64 = w.iter().sum();
    let mu = w.iter().zip(data).map(|(a, b)| a * b).sum::<f64>() / denom;
    Ok(GlsMean { mu, var: gamma / denom })
}

/// `(1ᵀV_α⁻¹1)⁻¹` for the random-root correlation matrix.
pub fn inverse_ones_quadratic(tree: &Tree, alpha: f64) -> Result<f64> {
    let chol = Cholesky::new(&correlation(tree, alpha)?)?;
    Ok(1.0 / chol.quad_form(&vec![1.0; tree.n_tips()]))
}

/// Lower bound on `var(μ̂)` from the height `T`, the shortest root-child
/// branch `t`, and the root degree `k`:
/// `(σ²/2α)·e^{−2αT}·(1 + (e^{2αt} − 1)/k)`.
pub fn mu_var_lower_bound(height: f64, t: f64, k: usize, alpha: f64, sigma2: f64) -> Result<f64> {
    if !(t > 0.0 && t <= height) {
        return Err(Error::param("t", format!("must satisfy 0 < t <= T, got t = {t}, T = {height}")));
    }
    if k < 2 {
        return Err(Error::param("k", "root degree must be >= 2"));
    }
    if !(alpha > 0.0) || !(sigma2 > 0.0) {
        return Err(Error::param("alpha", "alpha and sigma2 must be > 0"));
    }
    let gamma = sigma2 / (2.0 * alpha);
    Ok(gamma * (-2.0 * alpha * height).exp() * (1.0 + (2.0 * alpha * t).exp_m1() / k as f64))
}

/// Bound for a given tree, using its height and root geometry.
pub fn mu_var_lower_bound_for_tree(tree: &Tree, alpha: f64, sigma2: f64) -> Result<f64> {
    let (k, t) = tree.root_geometry();
    mu_var_lower_bound(tree.height(), t, k, alpha, sigma2)
}

/// Exact random-root log-likelihood.
///
/// REML is the density of `AᵀY` for an orthonormal basis `A` of the
/// complement of the all-ones vector, which does not depend on `A` and
/// reduces to a closed form in `V`.
pub fn log_likelihood(data: &[f64], tree: &Tree, params: &OUParams, mode: Mode) -> Result<f64> {
    check_data(tree, data)?;
    params.validate()?;
    let n = data.len() as f64;
    let chol = Cholesky::new(&correlation(tree, params.alpha)?)?;
    let log_det = chol.log_det();
    let gamma = params.gamma;
    match mode {
        Mode::Ml => {
            let r: Vec<f64> = data.iter().map(|y| y - params.mu).collect();
            let q = chol.quad_form(&r);
            Ok(-0.5 * (n * (2.0 * PI * gamma).ln() + log_det + q / gamma))
        }
        Mode::Reml => {
            if data.len() < 2 {
                return Err(Error::param("data", "REML needs at least two tips"));
            }
            let w = chol.solve(&vec![1.0; data.len()]);
            let ones_q: f64 = w.iter().sum();
            let mu = w.iter().zip(data).map(|(a, b)| a * b).sum::<f64>() / ones_q;
            let r: Vec<f64> = data.iter().map(|y| y - mu).collect();
            let q = chol.quad_form(&r);
            Ok(-0.5 * ((n - 1.0) * (2.0 * PI * gamma).ln() + log_det + ones_q.ln() - n.ln() + q / gamma))
        }
    }
}

/// REML log-likelihood computed literally from a complement basis
/// (`n × (n−1)`, orthonormal columns orthogonal to the all-ones vector).
pub fn reml_log_likelihood_with_basis(
    data: &[f64],
    tree: &Tree,
    params: &OUParams,
    basis: &DMatrix<f64>,
) -> Result<f64> {
    check_data(tree, data)?;
    let n = data.len();
    if basis.nrows() != n || basis.ncols() + 1 != n {
        return Err(Error::param("basis", "must be n x (n-1)"));
    }
    let v = correlation(tree, params.alpha)? * params.gamma;
    let cov = basis.transpose() * v * basis;
    let z = basis.transpose() * DVector::from_column_slice(data);
    let chol = Cholesky::new(&cov)?;
    let q = chol.quad_form(z.as_slice());
    let m = (n - 1) as f64;
    Ok(-0.5 * (m * (2.0 * PI).ln() + chol.log_det() + q))
}

/// Helmert basis of the complement of the all-ones vector.
pub fn helmert_basis(n: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n.saturating_sub(1));
    for j in 1..n {
        let norm = ((j * (j + 1)) as f64).sqrt();
        for i in 0..j {
            a[(i, j - 1)] = 1.0 / norm;
        }
        a[(j, j - 1)] = -(j as f64) / norm;
    }
    a
}

/// Profile of the likelihood over α with μ and γ maximized out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Profile {
    pub loglik: f64,
    pub gamma: f64,
    pub mu: f64,
}

/// A data set on a tree for which the α-profile can be evaluated.
pub trait ProfileModel {
    fn n(&self) -> usize;
    /// Height used to scale the α search range.
    fn height(&self) -> f64;
    fn profile(&self, alpha: f64, mode: Mode) -> Result<Profile>;
}

fn finish_profile(n: usize, quad: f64, log_det_term: f64, mu: f64, mode: Mode) -> Result<Profile> {
    let dof = match mode {
        Mode::Ml => n as f64,
        Mode::Reml => (n - 1) as f64,
    };
    let gamma = quad / dof;
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Numerical(format!(
            "degenerate data: profiled gamma = {gamma} (are all tip values equal?)"
        )));
    }
    let loglik = -0.5 * (dof * (2.0 * PI * gamma).ln() + log_det_term + dof);
    if !loglik.is_finite() {
        return Err(Error::Numerical("non-finite log-likelihood".into()));
    }
    Ok(Profile { loglik, gamma, mu })
}

/// Dense backend: one Cholesky of the `n × n` correlation per α.
pub struct DenseModel {
    distances: DMatrix<f64>,
    data: Vec<f64>,
    height: f64,
}

impl DenseModel {
    pub fn new(tree: &Tree, data: &[f64]) -> Result<DenseModel> {
        check_data(tree, data)?;
        Ok(DenseModel {
            distances: distance_matrix(tree),
            data: data.to_vec(),
            height: tree.height(),
        })
    }

    /// Same tree, different data; reuses the distance matrix.
    pub fn with_data(&self, data: &[f64]) -> Result<DenseModel> {
        if data.len() != self.data.len() {
            return Err(Error::param("data", "length differs from the tree's tip count"));
        }
        Ok(DenseModel {
            distances: self.distances.clone(),
            data: data.to_vec(),
            height: self.height,
        })
    }
}

impl ProfileModel for DenseModel {
    fn n(&self) -> usize {
        self.data.len()
    }

    fn height(&self) -> f64 {
        self.height
    }

    fn profile(&self, alpha: f64, mode: Mode) -> Result<Profile> {
        let chol = Cholesky::new(&ou_correlation(&self.distances, alpha))?;
        DenseFactor::new(chol).profile(&self.data, mode)
    }
}

/// A factored correlation matrix with `V⁻¹1` cached, shared by every data
/// set profiled at the same α.
struct DenseFactor {
    chol: Cholesky,
    w: Vec<f64>,
    ones_q: f64,
}

impl DenseFactor {
    fn new(chol: Cholesky) -> DenseFactor {
        let w = chol.solve(&vec![1.0; chol.dim()]);
        let ones_q = w.iter().sum();
        DenseFactor { chol, w, ones_q }
    }

    fn profile(&self, data: &[f64], mode: Mode) -> Result<Profile> {
        let n = data.len();
        let mu = self.w.iter().zip(data).map(|(a, b)| a * b).sum::<f64>() / self.ones_q;
        let r: Vec<f64> = data.iter().map(|y| y - mu).collect();
        let quad = self.chol.quad_form(&r);
        let log_det_term = match mode {
            Mode::Ml => self.chol.log_det(),
            Mode::Reml => self.chol.log_det() + self.ones_q.ln() - (n as f64).ln(),
        };
        finish_profile(n, quad, log_det_term, mu, mode)
    }
}

/// Spectral backend for symmetric trees; data in the tip order of
/// [`crate::symtree::build_symmetric_tree`].
pub struct SpectralModel {
    spec: SymmetricTreeSpec,
    level_ss: Vec<f64>,
    mean: f64,
}

impl SpectralModel {
    pub fn new(spec: &SymmetricTreeSpec, data: &[f64]) -> Result<SpectralModel> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("data", "values must be finite"));
        }
        // Level sums of squares are taken about the mean so the k ≥ 1 terms
        // do not inherit round-off from a large common offset.
        let mean = data.iter().sum::<f64>() / data.len().max(1) as f64;
        let centered: Vec<f64> = data.iter().map(|y| y - mean).collect();
        let level_ss = level_sums_of_squares(spec, &centered)?;
        Ok(SpectralModel {
            spec: spec.clone(),
            level_ss,
            mean,
        })
    }

    pub fn spec(&self) -> &SymmetricTreeSpec {
        &self.spec
    }
}

impl ProfileModel for SpectralModel {
    fn n(&self) -> usize {
        self.spec.n_tips()
    }

    fn height(&self) -> f64 {
        self.spec.height()
    }

    fn profile(&self, alpha: f64, mode: Mode) -> Result<Profile> {
        let es = eigensystem(&self.spec, alpha)?;
        let quad: f64 = (1..es.values.len()).map(|k| self.level_ss[k] / es.values[k]).sum();
        let upper: f64 = (1..es.values.len())
            .map(|k| es.multiplicities[k] as f64 * es.values[k].ln())
            .sum();
        let log_det_term = match mode {
            Mode::Ml => upper + es.values[0].ln(),
            Mode::Reml => upper,
        };
        finish_profile(self.n(), quad, log_det_term, self.mean, mode)
    }
}

/// Points of the coarse log-α grid that precedes the Brent refinement.
pub const ALPHA_GRID_POINTS: usize = 49;
/// Search range for α is `[ALPHA_LO/T, ALPHA_HI/T]`.
pub const ALPHA_LO: f64 = 1e-8;
pub const ALPHA_HI: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub mode: Mode,
    /// GLS mean at α̂.
    pub mu_hat: Option<f64>,
    pub gamma_hat: f64,
    pub alpha_hat: f64,
    pub sigma2_hat: f64,
    pub loglik: f64,
    pub evaluations: usize,
    /// Final α bracket of the refinement.
    pub bracket: (f64, f64),
    /// α̂ within one refinement step of a search bound.
    pub boundary: bool,
    /// Refinement trace in `ln α`.
    pub trace: Vec<TraceStep>,
}

impl FitResult {
    pub fn params(&self) -> OUParams {
        OUParams {
            mu: self.mu_hat.unwrap_or(0.0),
            alpha: self.alpha_hat,
            gamma: self.gamma_hat,
        }
    }
}

fn check_fit_size(n: usize, mode: Mode) -> Result<()> {
    let min_n = match mode {
        Mode::Ml => 3,
        Mode::Reml => 2,
    };
    if n < min_n {
        return Err(Error::param("data", format!("{mode} fitting needs at least {min_n} tips, got {n}")));
    }
    Ok(())
}

/// `ln α` grid: first point, last point, spacing.
fn log_alpha_grid(height: f64) -> Result<(f64, f64, f64)> {
    if !(height > 0.0) {
        return Err(Error::InvalidTree("tree height must be > 0".into()));
    }
    let x_lo = (ALPHA_LO / height).ln();
    let x_hi = (ALPHA_HI / height).ln();
    Ok((x_lo, x_hi, (x_hi - x_lo) / (ALPHA_GRID_POINTS - 1) as f64))
}

/// Brent refinement between the neighbours of grid point `best.0`.
fn refine<M: ProfileModel + ?Sized>(model: &M, mode: Mode, best: (usize, f64)) -> Result<FitResult> {
    let (x_lo, x_hi, step) = log_alpha_grid(model.height())?;
    let i = best.0;
    let lo = x_lo + step * i.saturating_sub(1) as f64;
    let hi = (x_lo + step * (i + 1) as f64).min(x_hi);
    let min = brent_minimize(|x| Ok(-model.profile(x.exp(), mode)?.loglik), lo, hi, 1e-10, 200)?;
    // The grid point itself may beat the refinement on a flat profile.
    let x_hat = if -min.fx >= best.1 { min.x } else { x_lo + step * i as f64 };
    let (b_lo, b_hi) = min.trace.last().map_or((lo, hi), |s| (s.lo, s.hi));
    // One grid step is the half-width of the refinement bracket; an estimate
    // that close to a bound is indistinguishable from the bound itself on the
    // flat profiles where it happens.
    let boundary = x_hat - x_lo <= step || x_hi - x_hat <= step;
    let alpha_hat = x_hat.exp();
    let prof = model.profile(alpha_hat, mode)?;
    Ok(FitResult {
        mode,
        mu_hat: Some(prof.mu),
        gamma_hat: prof.gamma,
        alpha_hat,
        sigma2_hat: 2.0 * alpha_hat * prof.gamma,
        loglik: prof.loglik,
        evaluations: ALPHA_GRID_POINTS + min.evaluations + 1,
        bracket: (b_lo.exp(), b_hi.exp()),
        boundary,
        trace: min.trace,
    })
}

fn grid_best(lls: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, ll) in lls.enumerate() {
        if ll > best.1 {
            best = (i, ll);
        }
    }
    best
}

/// Profile maximization over `ln α`: grid search, then Brent refinement
/// between the neighbours of the best grid point.
pub fn fit_model<M: ProfileModel + ?Sized>(model: &M, mode: Mode) -> Result<FitResult> {
    check_fit_size(model.n(), mode)?;
    let (x_lo, _, step) = log_alpha_grid(model.height())?;
    let mut lls = Vec::with_capacity(ALPHA_GRID_POINTS);
    for i in 0..ALPHA_GRID_POINTS {
        lls.push(model.profile((x_lo + step * i as f64).exp(), mode)?.loglik);
    }
    refine(model, mode, grid_best(lls.into_iter()))
}

/// Fits many data sets on one tree with the dense backend. The grid stage
/// factors each correlation matrix once for all data sets; results equal
/// those of [`fit`] one by one. A failure on one data set does not affect
/// the others.
pub fn fit_dense_batch(tree: &Tree, datasets: &[Vec<f64>], mode: Mode) -> Result<Vec<Result<FitResult>>> {
    check_fit_size(tree.n_tips(), mode)?;
    for d in datasets {
        check_data(tree, d)?;
    }
    let distances = distance_matrix(tree);
    let (x_lo, _, step) = log_alpha_grid(tree.height())?;
    let mut grid: Vec<Vec<Result<f64>>> = (0..datasets.len()).map(|_| Vec::new()).collect();
    for i in 0..ALPHA_GRID_POINTS {
        let factor = DenseFactor::new(Cholesky::new(&ou_correlation(&distances, (x_lo + step * i as f64).exp()))?);
        for (d, g) in datasets.iter().zip(grid.iter_mut()) {
            g.push(factor.profile(d, mode).map(|p| p.loglik));
        }
    }
    let height = tree.height();
    Ok(datasets
        .iter()
        .zip(grid)
        .map(|(d, g)| {
            let lls: Vec<f64> = g.into_iter().collect::<Result<_>>()?;
            let model = DenseModel {
                distances: distances.clone(),
                data: d.clone(),
                height,
            };
            refine(&model, mode, grid_best(lls.into_iter()))
        })
        .collect())
}

/// Fits the random-root OU model to one data set with the dense backend.
pub fn fit(data: &[f64], tree: &Tree, mode: Mode) -> Result<FitResult> {
    fit_model(&DenseModel::new(tree, data)?, mode)
}

/// Exact `var(μ̂)` on a star with `n/2` tips at depth `t1` and `n/2` at
/// depth `t2` (random root), from the Woodbury form of `V⁻¹`.
pub fn star_two_depth_variance(n: usize, t1: f64, t2: f64, alpha: f64, gamma: f64) -> Result<f64> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::param("n", "must be even and >= 2"));
    }
    if !(t1 > 0.0 && t2 > 0.0) {
        return Err(Error::param("t", "depths must be > 0"));
    }
    if !(alpha > 0.0 && gamma > 0.0) {
        return Err(Error::param("alpha", "alpha and gamma must be > 0"));
    }
    let a = (-alpha * t1).exp();
    let b = (-alpha * t2).exp();
    let ia = 1.0 / -(-2.0 * alpha * t1).exp_m1();
    let ib = 1.0 / -(-2.0 * alpha * t2).exp_m1();
    let h = n as f64 / 2.0;
    let num = 1.0 + h * (a * a * ia + b * b * ib);
    let den = h * (ia + ib) + h * h * ia * ib * (a - b) * (a - b);
    Ok(gamma * num / den)
}

/// The star used by [`star_two_depth_variance`], tips `a1..` then `b1..`.
pub fn two_depth_star(n: usize, t1: f64, t2: f64) -> Result<Tree> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::param("n", "must be even and >= 2"));
    }
    let h = n / 2;
    let tips: Vec<String> = (1..=h)
        .map(|i| format!("a{i}:{t1}"))
        .chain((1..=h).map(|i| format!("b{i}:{t2}")))
        .collect();
    crate::tree::parse_newick(&format!("({});", tips.join(",")))
}
