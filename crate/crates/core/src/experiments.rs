//! Seeded simulation studies with CSV output.
//!
//! Every run is a pure function of its config: per-replicate seeds are
//! derived from the master seed and the replicate's indices, parallel work is
//! merged in index order, and each output row carries a hash of the config
//! (and of the tree file, when one is used). Column layouts are listed in
//! `docs/output_schema.md`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inference::{fit_dense_batch, fit_model, mu_var_lower_bound_for_tree, FitResult, Mode, SpectralModel};
use crate::micro::{
    age_divergence_profile, age_histogram, entropy_distance, rao_sum_sequence, spectral_entropy_distance, ModelPair,
};
use crate::ou::{simulate_tips, OUParams, RootMode};
use crate::symtree::{build_symmetric_tree, fisher_info, v_alpha_limit, DenseTipSpec, GrowthFamily, SymmetricTreeSpec};
use crate::tree::{parse_newick, subsample_nested, Tree, DEFAULT_ULTRAMETRIC_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeSource {
    /// Path to a Newick file.
    Newick(PathBuf),
    Symmetric(SymmetricTreeSpec),
    DenseTip(DenseTipSpec),
}

/// A tree ready for use, with its symmetric spec when it has one (tips are
/// then in block order).
#[derive(Debug, Clone)]
pub struct LoadedTree {
    pub tree: Tree,
    pub spec: Option<SymmetricTreeSpec>,
    pub dense_tip: Option<DenseTipSpec>,
    /// Bytes that identify the tree beyond the config itself.
    fingerprint: String,
}

impl TreeSource {
    pub fn load(&self) -> Result<LoadedTree> {
        match self {
            TreeSource::Newick(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::config("tree", format!("cannot read {}: {e}", path.display())))?;
                let tree = parse_newick(&text)?;
                tree.require_ultrametric(DEFAULT_ULTRAMETRIC_TOL)?;
                Ok(LoadedTree {
                    tree,
                    spec: None,
                    dense_tip: None,
                    fingerprint: text,
                })
            }
            TreeSource::Symmetric(spec) => Ok(LoadedTree {
                tree: build_symmetric_tree(spec),
                spec: Some(spec.clone()),
                dense_tip: None,
                fingerprint: String::new(),
            }),
            TreeSource::DenseTip(dt) => {
                let spec = dt.to_spec().map_err(|e| Error::config("tree.dense_tip", e.to_string()))?;
                Ok(LoadedTree {
                    tree: build_symmetric_tree(&spec),
                    spec: Some(spec),
                    dense_tip: Some(*dt),
                    fingerprint: String::new(),
                })
            }
        }
    }
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the job at `indices` under `master`; distinct index tuples give
/// unrelated streams.
pub fn derive_seed(master: u64, indices: &[u64]) -> u64 {
    indices
        .iter()
        .fold(splitmix64(master), |acc, &i| splitmix64(acc ^ splitmix64(i.wrapping_add(0x5851_f42d_4c95_7f2d))))
}

/// Tag used in place of a replicate index for the subsampling stream.
const SUBSAMPLE_STREAM: u64 = u64::MAX;

fn config_hash<T: Serialize>(config: &T, fingerprint: &str) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config)?);
    h.update([0u8]);
    h.update(fingerprint.as_bytes());
    Ok(hex::encode(h.finalize())[..16].to_string())
}

fn parse_raw<T: for<'de> Deserialize<'de>>(json: &str) -> Result<T> {
    serde_json::from_str(json).map_err(|e| {
        let msg = e.to_string();
        // serde names the offending field in its message; surface it.
        let field = msg
            .split('`')
            .nth(1)
            .map_or_else(|| "config".to_string(), str::to_string);
        Error::config(field, msg)
    })
}

fn required<T>(value: Option<T>, field: &str) -> Result<T> {
    value.ok_or_else(|| Error::config(field, "is required"))
}

fn check_params(params: &OUParams) -> Result<()> {
    params.validate().map_err(|e| Error::config("params", e.to_string()))?;
    if !(params.alpha > 0.0) {
        return Err(Error::config("params.alpha", "must be > 0 for the random-root model"));
    }
    Ok(())
}

fn default_params() -> OUParams {
    OUParams {
        mu: 0.0,
        alpha: 0.1,
        gamma: 1.0,
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperimentConfig {
    tree: Option<TreeSource>,
    params: Option<OUParams>,
    sequences: Option<usize>,
    replicates: Option<usize>,
    sizes: Option<Vec<usize>>,
    seed: Option<u64>,
    mode: Option<Mode>,
    out_dir: Option<PathBuf>,
}

/// Nested-subsample design: `sequences` independent nested chains of trees
/// with the given sizes, and `replicates` simulated data sets per tree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub tree: TreeSource,
    pub params: OUParams,
    pub sequences: usize,
    pub replicates: usize,
    /// Strictly descending tip counts.
    pub sizes: Vec<usize>,
    pub seed: u64,
    pub mode: Mode,
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub const DEFAULT_SEQUENCES: usize = 10;
    pub const DEFAULT_REPLICATES: usize = 50;

    /// Defaults: μ = 0, γ = 1, α = 0.1 (σ² = 0.2), ML fits.
    pub fn new(tree: TreeSource, sizes: Vec<usize>, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            tree,
            params: default_params(),
            sequences: Self::DEFAULT_SEQUENCES,
            replicates: Self::DEFAULT_REPLICATES,
            sizes,
            seed,
            mode: Mode::Ml,
            out_dir: None,
        }
    }

    pub fn from_json(json: &str) -> Result<ExperimentConfig> {
        let raw: RawExperimentConfig = parse_raw(json)?;
        let c = ExperimentConfig {
            tree: required(raw.tree, "tree")?,
            params: raw.params.unwrap_or_else(default_params),
            sequences: raw.sequences.unwrap_or(Self::DEFAULT_SEQUENCES),
            replicates: raw.replicates.unwrap_or(Self::DEFAULT_REPLICATES),
            sizes: required(raw.sizes, "sizes")?,
            seed: required(raw.seed, "seed")?,
            mode: raw.mode.unwrap_or(Mode::Ml),
            out_dir: raw.out_dir,
        };
        c.validate()?;
        Ok(c)
    }

    /// Checks that do not need the tree.
    pub fn validate(&self) -> Result<()> {
        check_params(&self.params)?;
        if self.replicates == 0 {
            return Err(Error::config("replicates", "must be >= 1"));
        }
        if self.sequences == 0 {
            return Err(Error::config("sequences", "must be >= 1"));
        }
        if self.sizes.is_empty() {
            return Err(Error::config("sizes", "at least one size is required"));
        }
        if self.sizes.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::config("sizes", "must be strictly descending"));
        }
        let min = if self.mode == Mode::Ml { 3 } else { 2 };
        if *self.sizes.last().unwrap() < min {
            return Err(Error::config("sizes", format!("{} fits need at least {min} tips", self.mode)));
        }
        Ok(())
    }
}

/// One fitted replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub config_hash: String,
    pub sequence: usize,
    pub size_index: usize,
    pub n_tips: usize,
    pub replicate: usize,
    pub seed: u64,
    /// `ok`, or the error message of a failed fit.
    pub status: String,
    pub mu_hat: Option<f64>,
    pub gamma_hat: Option<f64>,
    pub alpha_hat: Option<f64>,
    pub sigma2_hat: Option<f64>,
    pub loglik: Option<f64>,
    pub boundary_flag: Option<bool>,
    /// Lower bound on var(μ̂) for this replicate's tree at the true parameters.
    pub mu_var_bound: f64,
}

impl FitRow {
    fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Per-size summary. Log-α statistics use non-boundary fits only; the rest
/// use every successful fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config_hash: String,
    pub size_index: usize,
    pub n_tips: usize,
    pub fits: usize,
    pub failures: usize,
    pub boundary_fraction: f64,
    pub mean_mu_hat: f64,
    pub sd_mu_hat: f64,
    pub var_mu_hat: f64,
    pub mean_gamma_hat: f64,
    pub sd_gamma_hat: f64,
    pub mean_alpha_hat: f64,
    pub sd_alpha_hat: f64,
    pub mean_sigma2_hat: f64,
    pub sd_sigma2_hat: f64,
    pub sd_log_alpha_hat: f64,
    pub cor_log_alpha_log_gamma: f64,
    pub mean_mu_var_bound: f64,
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance (denominator `n − 1`).
pub fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return f64::NAN;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    if x.len() != y.len() || x.len() < 2 {
        return f64::NAN;
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Recomputes the summary of one size from its raw rows.
pub fn summarize_size(config_hash: &str, size_index: usize, rows: &[&FitRow]) -> SummaryRow {
    let ok: Vec<&FitRow> = rows.iter().copied().filter(|r| r.ok()).collect();
    let col = |f: fn(&FitRow) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|r| f(r)).collect() };
    let mu = col(|r| r.mu_hat);
    let gamma = col(|r| r.gamma_hat);
    let alpha = col(|r| r.alpha_hat);
    let sigma2 = col(|r| r.sigma2_hat);
    let interior: Vec<&FitRow> = ok.iter().copied().filter(|r| r.boundary_flag == Some(false)).collect();
    let log_alpha: Vec<f64> = interior.iter().filter_map(|r| r.alpha_hat).map(f64::ln).collect();
    let log_gamma: Vec<f64> = interior.iter().filter_map(|r| r.gamma_hat).map(f64::ln).collect();
    let boundary = ok.iter().filter(|r| r.boundary_flag == Some(true)).count();
    let bounds: Vec<f64> = rows.iter().map(|r| r.mu_var_bound).collect();
    SummaryRow {
        config_hash: config_hash.to_string(),
        size_index,
        n_tips: rows.first().map_or(0, |r| r.n_tips),
        fits: ok.len(),
        failures: rows.len() - ok.len(),
        boundary_fraction: if ok.is_empty() { f64::NAN } else { boundary as f64 / ok.len() as f64 },
        mean_mu_hat: mean(&mu),
        sd_mu_hat: variance(&mu).sqrt(),
        var_mu_hat: variance(&mu),
        mean_gamma_hat: mean(&gamma),
        sd_gamma_hat: variance(&gamma).sqrt(),
        mean_alpha_hat: mean(&alpha),
        sd_alpha_hat: variance(&alpha).sqrt(),
        mean_sigma2_hat: mean(&sigma2),
        sd_sigma2_hat: variance(&sigma2).sqrt(),
        sd_log_alpha_hat: variance(&log_alpha).sqrt(),
        cor_log_alpha_log_gamma: correlation(&log_alpha, &log_gamma),
        mean_mu_var_bound: mean(&bounds),
    }
}

#[derive(Debug, Clone)]
pub struct SubsampleOutcome {
    pub config: ExperimentConfig,
    pub config_hash: String,
    /// Ordered by sequence, then size, then replicate.
    pub rows: Vec<FitRow>,
    pub summary: Vec<SummaryRow>,
}

fn row_from_fit(base: FitRow, fit: Result<FitResult>) -> FitRow {
    match fit {
        Ok(f) => FitRow {
            status: "ok".into(),
            mu_hat: f.mu_hat,
            gamma_hat: Some(f.gamma_hat),
            alpha_hat: Some(f.alpha_hat),
            sigma2_hat: Some(f.sigma2_hat),
            loglik: Some(f.loglik),
            boundary_flag: Some(f.boundary),
            ..base
        },
        Err(e) => {
            log::warn!(
                "fit failed (sequence {}, size {}, replicate {}): {e}",
                base.sequence,
                base.n_tips,
                base.replicate
            );
            FitRow {
                status: e.to_string(),
                ..base
            }
        }
    }
}

fn simulate_one(tree: &Tree, params: &OUParams, seed: u64) -> Result<Vec<f64>> {
    let y = simulate_tips(tree, params, RootMode::Random, 1, seed)?;
    Ok(y.row(0).iter().copied().collect())
}

/// Fits the random-root model to simulated data on nested subsamples.
///
/// The full-size tree of a symmetric or dense-tip source is fitted with the
/// closed-form spectrum; every other tree uses dense factorizations.
pub fn run_subsample_experiment(config: &ExperimentConfig) -> Result<SubsampleOutcome> {
    config.validate()?;
    let source = config.tree.load()?;
    let n = source.tree.n_tips();
    if config.sizes[0] > n {
        return Err(Error::config("sizes", format!("largest size {} exceeds the tree's {n} tips", config.sizes[0])));
    }
    let hash = config_hash(config, &source.fingerprint)?;
    let params = config.params;
    let sigma2 = params.sigma2();

    let trees: Vec<Vec<Tree>> = (0..config.sequences)
        .map(|s| {
            subsample_nested(&source.tree, &config.sizes, derive_seed(config.seed, &[s as u64, SUBSAMPLE_STREAM]))
                .map_err(|e| match e {
                    Error::Config { reason, .. } => Error::config("sizes", reason),
                    other => other,
                })
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..config.sequences)
        .flat_map(|s| (0..config.sizes.len()).map(move |k| (s, k)))
        .collect();
    let blocks: Vec<Vec<FitRow>> = jobs
        .par_iter()
        .map(|&(s, k)| -> Result<Vec<FitRow>> {
            let full_spectral = config.sizes[k] == n && source.spec.is_some();
            // The spectral backend needs block tip order, which the source
            // tree has by construction.
            let tree = if full_spectral { &source.tree } else { &trees[s][k] };
            let bound = mu_var_lower_bound_for_tree(tree, params.alpha, sigma2)?;
            let seeds: Vec<u64> = (0..config.replicates)
                .map(|r| derive_seed(config.seed, &[s as u64, k as u64, r as u64]))
                .collect();
            let data: Vec<Vec<f64>> = seeds.iter().map(|&sd| simulate_one(tree, &params, sd)).collect::<Result<_>>()?;
            let fits: Vec<Result<FitResult>> = if full_spectral {
                let spec = source.spec.as_ref().unwrap();
                data.iter()
                    .map(|y| fit_model(&SpectralModel::new(spec, y)?, config.mode))
                    .collect()
            } else {
                fit_dense_batch(tree, &data, config.mode)?
            };
            Ok(fits
                .into_iter()
                .zip(&seeds)
                .enumerate()
                .map(|(r, (fit, &seed))| {
                    let base = FitRow {
                        config_hash: hash.clone(),
                        sequence: s,
                        size_index: k,
                        n_tips: tree.n_tips(),
                        replicate: r,
                        seed,
                        status: String::new(),
                        mu_hat: None,
                        gamma_hat: None,
                        alpha_hat: None,
                        sigma2_hat: None,
                        loglik: None,
                        boundary_flag: None,
                        mu_var_bound: bound,
                    };
                    row_from_fit(base, fit)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let rows: Vec<FitRow> = blocks.into_iter().flatten().collect();
    let summary = (0..config.sizes.len())
        .map(|k| {
            let of_size: Vec<&FitRow> = rows.iter().filter(|r| r.size_index == k).collect();
            summarize_size(&hash, k, &of_size)
        })
        .collect();
    Ok(SubsampleOutcome {
        config: config.clone(),
        config_hash: hash,
        rows,
        summary,
    })
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Headers are written even when there are no rows.
fn write_rows_with_header<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_config<T: Serialize>(dir: &Path, config: &T, hash: &str) -> Result<()> {
    #[derive(Serialize)]
    struct Stamped<'a, T> {
        config_hash: &'a str,
        #[serde(flatten)]
        config: &'a T,
    }
    let text = serde_json::to_string_pretty(&Stamped { config_hash: hash, config })?;
    fs::write(dir.join("config.json"), text + "\n")?;
    Ok(())
}

impl SubsampleOutcome {
    /// Writes `config.json`, `fits.csv` and `summary.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_config(dir, &self.config, &self.config_hash)?;
        write_rows(&dir.join("fits.csv"), &self.rows)?;
        write_rows(&dir.join("summary.csv"), &self.summary)?;
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStudyConfig {
    degrees: Option<Vec<usize>>,
    ages: Option<Vec<f64>>,
    last_degrees: Option<Vec<usize>>,
    gamma: Option<f64>,
    alpha: Option<f64>,
    replicates: Option<usize>,
    seed: Option<u64>,
    s: Option<usize>,
    out_dir: Option<PathBuf>,
}

/// REML study on a symmetric family in which only the last degree `d_m`
/// varies over a grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymtreeStudyConfig {
    /// `d_1..d_{m−1}`.
    pub degrees: Vec<usize>,
    /// `u_1 > … > u_m`.
    pub ages: Vec<f64>,
    pub last_degrees: Vec<usize>,
    pub gamma: f64,
    pub alpha: f64,
    pub replicates: usize,
    pub seed: u64,
    /// Level up to which degrees are treated as diverging in the α-variance
    /// limit; `m − 1` when absent.
    pub s: Option<usize>,
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
}

impl SymtreeStudyConfig {
    pub fn from_json(json: &str) -> Result<SymtreeStudyConfig> {
        let raw: RawStudyConfig = parse_raw(json)?;
        let c = SymtreeStudyConfig {
            degrees: required(raw.degrees, "degrees")?,
            ages: required(raw.ages, "ages")?,
            last_degrees: required(raw.last_degrees, "last_degrees")?,
            gamma: required(raw.gamma, "gamma")?,
            alpha: required(raw.alpha, "alpha")?,
            replicates: required(raw.replicates, "replicates")?,
            seed: required(raw.seed, "seed")?,
            s: raw.s,
            out_dir: raw.out_dir,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ages.len() < 2 {
            return Err(Error::config("ages", "need m >= 2 levels"));
        }
        if self.degrees.len() + 1 != self.ages.len() {
            return Err(Error::config("degrees", "must list d_1..d_{m-1}, one fewer than the ages"));
        }
        if self.last_degrees.is_empty() {
            return Err(Error::config("last_degrees", "at least one value is required"));
        }
        if self.replicates == 0 {
            return Err(Error::config("replicates", "must be >= 1"));
        }
        check_params(&OUParams {
            mu: 0.0,
            alpha: self.alpha,
            gamma: self.gamma,
        })?;
        for &d in &self.last_degrees {
            self.spec_for(d)?;
        }
        let m = self.ages.len();
        if let Some(s) = self.s {
            if s < 1 || s > m - 1 {
                return Err(Error::config("s", format!("must lie in 1..={}", m - 1)));
            }
        }
        Ok(())
    }

    pub fn spec_for(&self, last_degree: usize) -> Result<SymmetricTreeSpec> {
        let mut d = self.degrees.clone();
        d.push(last_degree);
        SymmetricTreeSpec::new(d, self.ages.clone()).map_err(|e| Error::config("degrees", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub config_hash: String,
    pub grid_index: usize,
    pub last_degree: usize,
    pub n_tips: usize,
    pub replicate: usize,
    pub seed: u64,
    pub status: String,
    pub mu_hat: Option<f64>,
    pub gamma_hat: Option<f64>,
    pub alpha_hat: Option<f64>,
    /// `γ̂(1 − e^{−2α̂t_m})`.
    pub nu_hat: Option<f64>,
    pub loglik: Option<f64>,
    pub boundary_flag: Option<bool>,
}

/// Per-grid-point comparison of empirical REML variances with their
/// reference values, over all successful fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummaryRow {
    pub config_hash: String,
    pub grid_index: usize,
    pub last_degree: usize,
    pub n_tips: usize,
    pub n_tilde: usize,
    pub fits: usize,
    pub failures: usize,
    pub boundary_fraction: f64,
    pub nu_true: f64,
    /// Sample variance of `√n(ν̂ − ν)`.
    pub n_var_nu: f64,
    pub eight_nu2: f64,
    pub ratio_nu: f64,
    /// `n·(I⁻¹)_νν` from the finite-n Fisher information.
    pub fisher_n_var_nu: f64,
    /// Sample variance of `√ñ(α̂ − α)`.
    pub n_tilde_var_alpha: f64,
    pub v_alpha_limit: f64,
    pub ratio_alpha: f64,
    pub fisher_n_tilde_var_alpha: f64,
    /// `cor(log γ̂, log(1 − e^{−2α̂t_m}))`.
    pub cor_log_gamma_log_scale: f64,
}

#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub config: SymtreeStudyConfig,
    pub config_hash: String,
    pub rows: Vec<StudyRow>,
    pub summary: Vec<StudySummaryRow>,
}

pub fn run_symtree_reml_study(config: &SymtreeStudyConfig) -> Result<StudyOutcome> {
    config.validate()?;
    let hash = config_hash(config, "")?;
    let params = OUParams {
        mu: 0.0,
        alpha: config.alpha,
        gamma: config.gamma,
    };
    let m = config.ages.len();
    let t_m = config.ages[m - 1];
    let scale = |alpha: f64| -(-2.0 * alpha * t_m).exp_m1();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (g, &d_last) in config.last_degrees.iter().enumerate() {
        let spec = config.spec_for(d_last)?;
        let tree = build_symmetric_tree(&spec);
        let block: Vec<StudyRow> = (0..config.replicates)
            .into_par_iter()
            .map(|r| -> Result<StudyRow> {
                let seed = derive_seed(config.seed, &[g as u64, r as u64]);
                let y = simulate_one(&tree, &params, seed)?;
                let mut row = StudyRow {
                    config_hash: hash.clone(),
                    grid_index: g,
                    last_degree: d_last,
                    n_tips: spec.n_tips(),
                    replicate: r,
                    seed,
                    status: "ok".into(),
                    mu_hat: None,
                    gamma_hat: None,
                    alpha_hat: None,
                    nu_hat: None,
                    loglik: None,
                    boundary_flag: None,
                };
                match fit_model(&SpectralModel::new(&spec, &y)?, Mode::Reml) {
                    Ok(f) => {
                        row.mu_hat = f.mu_hat;
                        row.gamma_hat = Some(f.gamma_hat);
                        row.alpha_hat = Some(f.alpha_hat);
                        row.nu_hat = Some(f.gamma_hat * scale(f.alpha_hat));
                        row.loglik = Some(f.loglik);
                        row.boundary_flag = Some(f.boundary);
                    }
                    Err(e) => {
                        log::warn!("REML fit failed (d_m = {d_last}, replicate {r}): {e}");
                        row.status = e.to_string();
                    }
                }
                Ok(row)
            })
            .collect::<Result<_>>()?;

        let ok: Vec<&StudyRow> = block.iter().filter(|r| r.status == "ok").collect();
        let n = spec.n_tips() as f64;
        let n_tilde = spec.n_tilde() as f64;
        let nu_true = config.gamma * scale(config.alpha);
        let nu: Vec<f64> = ok.iter().filter_map(|r| r.nu_hat).collect();
        let alpha: Vec<f64> = ok.iter().filter_map(|r| r.alpha_hat).collect();
        let log_gamma: Vec<f64> = ok.iter().filter_map(|r| r.gamma_hat).map(f64::ln).collect();
        let log_scale: Vec<f64> = alpha.iter().map(|&a| scale(a).ln()).collect();
        let boundary = ok.iter().filter(|r| r.boundary_flag == Some(true)).count();
        let family = GrowthFamily {
            spec: spec.clone(),
            s: config.s.unwrap_or(m - 1),
            last_degree_grows: true,
        };
        let v_limit = v_alpha_limit(&family, config.alpha)?;
        let fisher_inv = fisher_info(&spec, nu_true, config.alpha)?.inverse();
        let n_var_nu = n * variance(&nu);
        let n_tilde_var_alpha = n_tilde * variance(&alpha);
        let eight_nu2 = 8.0 * nu_true * nu_true;
        summary.push(StudySummaryRow {
            config_hash: hash.clone(),
            grid_index: g,
            last_degree: d_last,
            n_tips: spec.n_tips(),
            n_tilde: spec.n_tilde(),
            fits: ok.len(),
            failures: block.len() - ok.len(),
            boundary_fraction: if ok.is_empty() { f64::NAN } else { boundary as f64 / ok.len() as f64 },
            nu_true,
            n_var_nu,
            eight_nu2,
            ratio_nu: n_var_nu / eight_nu2,
            fisher_n_var_nu: n * fisher_inv[(0, 0)],
            n_tilde_var_alpha,
            v_alpha_limit: v_limit,
            ratio_alpha: n_tilde_var_alpha / v_limit,
            fisher_n_tilde_var_alpha: n_tilde * fisher_inv[(1, 1)],
            cor_log_gamma_log_scale: correlation(&log_gamma, &log_scale),
        });
        rows.extend(block);
    }
    Ok(StudyOutcome {
        config: config.clone(),
        config_hash: hash,
        rows,
        summary,
    })
}

impl StudyOutcome {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_config(dir, &self.config, &self.config_hash)?;
        write_rows(&dir.join("fits.csv"), &self.rows)?;
        write_rows(&dir.join("summary.csv"), &self.summary)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaPair {
    pub theta1: OUParams,
    pub theta2: OUParams,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMicroConfig {
    tree: Option<TreeSource>,
    pairs: Option<Vec<ThetaPair>>,
    bins: Option<usize>,
    t_grid: Option<Vec<f64>>,
    m_max: Option<usize>,
    nested_sizes: Option<Vec<usize>>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MicroConfig {
    pub tree: TreeSource,
    pub pairs: Vec<ThetaPair>,
    pub bins: usize,
    /// Ages at which the divergence profile is evaluated; 21 evenly spaced
    /// points on `[0, T]` when empty.
    pub t_grid: Vec<f64>,
    /// Largest depth of the Rao sums (dense-tip sources only).
    pub m_max: usize,
    /// Optional nested subtrees on which distances are also reported.
    pub nested_sizes: Vec<usize>,
    pub seed: Option<u64>,
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
}

impl MicroConfig {
    pub const DEFAULT_BINS: usize = 20;
    pub const DEFAULT_M_MAX: usize = 30;

    pub fn new(tree: TreeSource, pairs: Vec<ThetaPair>) -> MicroConfig {
        MicroConfig {
            tree,
            pairs,
            bins: Self::DEFAULT_BINS,
            t_grid: Vec::new(),
            m_max: Self::DEFAULT_M_MAX,
            nested_sizes: Vec::new(),
            seed: None,
            out_dir: None,
        }
    }

    pub fn from_json(json: &str) -> Result<MicroConfig> {
        let raw: RawMicroConfig = parse_raw(json)?;
        let c = MicroConfig {
            tree: required(raw.tree, "tree")?,
            pairs: required(raw.pairs, "pairs")?,
            bins: raw.bins.unwrap_or(Self::DEFAULT_BINS),
            t_grid: raw.t_grid.unwrap_or_default(),
            m_max: raw.m_max.unwrap_or(Self::DEFAULT_M_MAX),
            nested_sizes: raw.nested_sizes.unwrap_or_default(),
            seed: raw.seed,
            out_dir: raw.out_dir,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::config("pairs", "at least one pair is required"));
        }
        for p in &self.pairs {
            check_params(&p.theta1).map_err(|e| Error::config("pairs.theta1", e.to_string()))?;
            check_params(&p.theta2).map_err(|e| Error::config("pairs.theta2", e.to_string()))?;
        }
        if self.bins == 0 {
            return Err(Error::config("bins", "must be >= 1"));
        }
        if self.m_max < 2 {
            return Err(Error::config("m_max", "must be >= 2"));
        }
        if !self.nested_sizes.is_empty() && self.seed.is_none() {
            return Err(Error::config("seed", "is required when nested_sizes is given"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub config_hash: String,
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub config_hash: String,
    pub t: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub config_hash: String,
    pub pair: usize,
    /// 0 for the full tree, `k` for the `k`-th nested subtree.
    pub tree_index: usize,
    pub n_tips: usize,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaoRow {
    pub config_hash: String,
    pub pair: usize,
    pub m: usize,
    pub z_m: f64,
}

#[derive(Debug, Clone)]
pub struct MicroReport {
    pub config: MicroConfig,
    pub config_hash: String,
    pub histogram: Vec<HistogramRow>,
    pub profile: Vec<ProfileRow>,
    pub distances: Vec<DistanceRow>,
    /// Only for dense-tip sources and pairs matched on the family's
    /// microergodic functional.
    pub rao_sums: Vec<RaoRow>,
}

pub fn micro_report(config: &MicroConfig) -> Result<MicroReport> {
    config.validate()?;
    let source = config.tree.load()?;
    let hash = config_hash(config, &source.fingerprint)?;
    let tree = &source.tree;

    let histogram = age_histogram(tree, config.bins)?
        .into_iter()
        .map(|b| HistogramRow {
            config_hash: hash.clone(),
            bin_left: b.bin_left,
            bin_right: b.bin_right,
            count: b.count,
        })
        .collect();
    let grid: Vec<f64> = if config.t_grid.is_empty() {
        (0..=20).map(|i| tree.height() * i as f64 / 20.0).collect()
    } else {
        config.t_grid.clone()
    };
    let profile = age_divergence_profile(tree, &grid)?
        .into_iter()
        .map(|(t, value)| ProfileRow {
            config_hash: hash.clone(),
            t,
            value,
        })
        .collect();

    let nested = if config.nested_sizes.is_empty() {
        Vec::new()
    } else {
        subsample_nested(tree, &config.nested_sizes, config.seed.unwrap())?
    };
    let mut distances = Vec::new();
    for (p, pair) in config.pairs.iter().enumerate() {
        let full = match &source.spec {
            Some(spec) => spectral_entropy_distance(spec, &pair.theta1, &pair.theta2)?,
            None => entropy_distance(&ModelPair {
                tree,
                theta1: pair.theta1,
                theta2: pair.theta2,
            })?,
        };
        distances.push(DistanceRow {
            config_hash: hash.clone(),
            pair: p,
            tree_index: 0,
            n_tips: tree.n_tips(),
            r: full,
        });
        for (k, sub) in nested.iter().enumerate() {
            distances.push(DistanceRow {
                config_hash: hash.clone(),
                pair: p,
                tree_index: k + 1,
                n_tips: sub.n_tips(),
                r: entropy_distance(&ModelPair {
                    tree: sub,
                    theta1: pair.theta1,
                    theta2: pair.theta2,
                })?,
            });
        }
    }

    let mut rao_sums = Vec::new();
    if let Some(family) = &source.dense_tip {
        for (p, pair) in config.pairs.iter().enumerate() {
            match rao_sum_sequence(family, &pair.theta1, &pair.theta2, config.m_max) {
                Ok(seq) => rao_sums.extend(seq.into_iter().map(|(m, z_m)| RaoRow {
                    config_hash: hash.clone(),
                    pair: p,
                    m,
                    z_m,
                })),
                Err(Error::InvalidParameter { name: "theta", reason }) => {
                    log::info!("pair {p}: no Rao sums ({reason})");
                }
                Err(e) => return Err(e),
            }
        }
    }

    Ok(MicroReport {
        config: config.clone(),
        config_hash: hash,
        histogram,
        profile,
        distances,
        rao_sums,
    })
}

impl MicroReport {
    /// Writes `config.json`, `age_histogram.csv`, `age_divergence.csv`,
    /// `distances.csv` and `rao_sums.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_config(dir, &self.config, &self.config_hash)?;
        write_rows_with_header(&dir.join("age_histogram.csv"), &["config_hash", "bin_left", "bin_right", "count"], &self.histogram)?;
        write_rows_with_header(&dir.join("age_divergence.csv"), &["config_hash", "t", "value"], &self.profile)?;
        write_rows_with_header(&dir.join("distances.csv"), &["config_hash", "pair", "tree_index", "n_tips", "r"], &self.distances)?;
        write_rows_with_header(&dir.join("rao_sums.csv"), &["config_hash", "pair", "m", "z_m"], &self.rao_sums)?;
        Ok(())
    }
}
