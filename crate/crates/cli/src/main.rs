use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ou_tree::experiments::{
    micro_report, run_subsample_experiment, run_symtree_reml_study, ExperimentConfig, MicroConfig, SymtreeStudyConfig,
    TreeSource,
};
use ou_tree::inference::{fit_model, inverse_ones_quadratic, mu_var_lower_bound_for_tree, DenseModel, Mode, SpectralModel};
use ou_tree::ou::{read_tip_data_csv, simulate_tips, write_tip_data_csv};
use ou_tree::symtree::eigensystem;
use ou_tree::{DenseTipSpec, Error, OUParams, RootMode, SymmetricTreeSpec};

/// Worker count for replicate-level parallelism.
const WORKERS_ENV: &str = "OU_TREE_WORKERS";

#[derive(Parser)]
#[command(name = "ou-tree", version, about = "Ornstein-Uhlenbeck models on ultrametric trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate tip data under the OU model.
    Simulate(SimulateArgs),
    /// Fit the random-root model by profile ML or REML.
    Fit(FitArgs),
    /// Lower bound and exact value of var(mu_hat) at given parameters.
    Bound(BoundArgs),
    /// Nested-subsample simulation experiment.
    SubsampleExperiment(ExperimentArgs),
    /// REML study on a symmetric family with a growing last degree.
    SymtreeStudy(StudyArgs),
    /// Node-age and entropy-distance diagnostics for parameter pairs.
    MicroReport(MicroArgs),
}

#[derive(Args, Clone)]
struct TreeArgs {
    /// Ultrametric tree in Newick format.
    #[arg(long, conflicts_with = "spec")]
    tree: Option<PathBuf>,
    /// Symmetric or dense-tip tree spec: inline JSON or a path to a JSON file.
    #[arg(long)]
    spec: Option<String>,
}

#[derive(Args)]
struct ParamArgs {
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    mu: f64,
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    gamma: f64,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    tree: TreeArgs,
    #[command(flatten)]
    params: ParamArgs,
    /// Condition on this root value instead of drawing it.
    #[arg(long, allow_hyphen_values = true)]
    y0: Option<f64>,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long)]
    seed: u64,
    /// Directory for data.csv; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    tree: TreeArgs,
    /// CSV with tip labels as header, one data set per row.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "ml")]
    mode: Mode,
    /// Directory for fits.csv; JSON lines on stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundArgs {
    #[command(flatten)]
    tree: TreeArgs,
    #[command(flatten)]
    params: ParamArgs,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON config; the flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    tree: TreeArgs,
    #[arg(long, allow_hyphen_values = true)]
    mu: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    sequences: Option<usize>,
    /// Comma-separated, strictly descending.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MicroArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    tree: TreeArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for bad input, 3 for numerical failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(err) if !err.is_config_error() => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config { field: WORKERS_ENV.into(), reason: format!("not a worker count: `{v}`") })?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Bound(a) => bound(a),
        Command::SubsampleExperiment(a) => subsample_experiment(a),
        Command::SymtreeStudy(a) => symtree_study(a),
        Command::MicroReport(a) => micro(a),
    }
}

fn read_json_arg(arg: &str) -> anyhow::Result<String> {
    if arg.trim_start().starts_with('{') {
        Ok(arg.to_string())
    } else {
        fs::read_to_string(arg).with_context(|| format!("reading spec file {arg}"))
    }
}

fn parse_spec(arg: &str) -> anyhow::Result<TreeSource> {
    let text = read_json_arg(arg)?;
    if let Ok(spec) = serde_json::from_str::<SymmetricTreeSpec>(&text) {
        return Ok(TreeSource::Symmetric(spec));
    }
    match serde_json::from_str::<DenseTipSpec>(&text) {
        Ok(dt) => {
            dt.validate()?;
            Ok(TreeSource::DenseTip(dt))
        }
        Err(_) => Err(Error::Config {
            field: "spec".into(),
            reason: "expected a symmetric spec {m, degrees, ages} or a dense-tip spec {d, q, t0, m}".into(),
        }
        .into()),
    }
}

impl TreeArgs {
    fn source(&self) -> anyhow::Result<Option<TreeSource>> {
        match (&self.tree, &self.spec) {
            (Some(p), _) => Ok(Some(TreeSource::Newick(p.clone()))),
            (None, Some(s)) => parse_spec(s).map(Some),
            (None, None) => Ok(None),
        }
    }

    fn require(&self) -> anyhow::Result<TreeSource> {
        match self.source()? {
            Some(s) => Ok(s),
            None => Err(Error::Config { field: "tree".into(), reason: "give --tree or --spec".into() }.into()),
        }
    }
}

impl ParamArgs {
    fn params(&self) -> anyhow::Result<OUParams> {
        Ok(OUParams::new(self.mu, self.alpha, self.gamma)?)
    }
}

fn simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let loaded = a.tree.require()?.load()?;
    let mode = match a.y0 {
        Some(y0) => RootMode::Fixed { y0 },
        None => RootMode::Random,
    };
    let data = simulate_tips(&loaded.tree, &a.params.params()?, mode, a.reps, a.seed)?;
    let labels = loaded.tree.tip_labels();
    match a.out {
        Some(dir) => {
            fs::create_dir_all(&dir)?;
            write_tip_data_csv(&labels, &data, fs::File::create(dir.join("data.csv"))?)?;
        }
        None => write_tip_data_csv(&labels, &data, io::stdout().lock())?,
    }
    Ok(())
}

fn fit(a: FitArgs) -> anyhow::Result<()> {
    let loaded = a.tree.require()?.load()?;
    let file = fs::File::open(&a.data).with_context(|| format!("opening {}", a.data.display()))?;
    let (labels, data) = read_tip_data_csv(file)?;
    // Columns in the tree's tip order.
    let tips = loaded.tree.tip_labels();
    let columns: Vec<usize> = tips
        .iter()
        .map(|t| labels.iter().position(|l| l == t).ok_or_else(|| Error::MissingTip(t.clone())))
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::with_capacity(data.nrows());
    for r in 0..data.nrows() {
        let y: Vec<f64> = columns.iter().map(|&c| data[(r, c)]).collect();
        let f = match &loaded.spec {
            Some(spec) => fit_model(&SpectralModel::new(spec, &y)?, a.mode)?,
            None => fit_model(&DenseModel::new(&loaded.tree, &y)?, a.mode)?,
        };
        rows.push(f);
    }
    match a.out {
        Some(dir) => {
            fs::create_dir_all(&dir)?;
            let mut w = fs::File::create(dir.join("fits.csv"))?;
            writeln!(w, "replicate,mode,mu_hat,gamma_hat,alpha_hat,sigma2_hat,loglik,boundary_flag")?;
            for (r, f) in rows.iter().enumerate() {
                writeln!(
                    w,
                    "{r},{},{},{},{},{},{},{}",
                    f.mode,
                    f.mu_hat.map_or(String::new(), |v| v.to_string()),
                    f.gamma_hat,
                    f.alpha_hat,
                    f.sigma2_hat,
                    f.loglik,
                    f.boundary
                )?;
            }
        }
        None => {
            let mut out = io::stdout().lock();
            for (r, f) in rows.iter().enumerate() {
                let v = serde_json::json!({
                    "replicate": r,
                    "mode": f.mode,
                    "mu_hat": f.mu_hat,
                    "gamma_hat": f.gamma_hat,
                    "alpha_hat": f.alpha_hat,
                    "sigma2_hat": f.sigma2_hat,
                    "loglik": f.loglik,
                    "boundary": f.boundary,
                    "bracket": f.bracket,
                    "evaluations": f.evaluations,
                });
                writeln!(out, "{v}")?;
            }
        }
    }
    Ok(())
}

fn bound(a: BoundArgs) -> anyhow::Result<()> {
    let loaded = a.tree.require()?.load()?;
    let p = a.params.params()?;
    if p.alpha.is_nan() || p.alpha <= 0.0 {
        bail!(Error::Config { field: "alpha".into(), reason: "must be > 0".into() });
    }
    let tree = &loaded.tree;
    let lower = mu_var_lower_bound_for_tree(tree, p.alpha, p.sigma2())?;
    // For symmetric trees the all-ones vector is the level-0 eigenvector.
    let exact = match &loaded.spec {
        Some(spec) => p.gamma * eigensystem(spec, p.alpha)?.values[0] / spec.n_tips() as f64,
        None => p.gamma * inverse_ones_quadratic(tree, p.alpha)?,
    };
    let v = serde_json::json!({
        "n_tips": tree.n_tips(),
        "height": tree.height(),
        "mu_var_lower_bound": lower,
        "mu_var_gls": exact,
    });
    println!("{v}");
    Ok(())
}

fn read_config(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Config { field: "config".into(), reason: format!("cannot read {}: {e}", path.display()) }.into()
    })
}

fn out_dir(flag: Option<PathBuf>, config: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    flag.or(config)
        .ok_or_else(|| Error::Config { field: "out_dir".into(), reason: "give --out or set out_dir".into() }.into())
}

fn subsample_experiment(a: ExperimentArgs) -> anyhow::Result<()> {
    let flag_tree = a.tree.source()?;
    let mut c = match &a.config {
        Some(p) => ExperimentConfig::from_json(&read_config(p)?)?,
        None => {
            let tree = flag_tree
                .clone()
                .ok_or_else(|| Error::Config { field: "tree".into(), reason: "give --config, --tree or --spec".into() })?;
            let sizes = a
                .sizes
                .clone()
                .ok_or_else(|| Error::Config { field: "sizes".into(), reason: "is required".into() })?;
            let seed = a.seed.ok_or_else(|| Error::Config { field: "seed".into(), reason: "is required".into() })?;
            ExperimentConfig::new(tree, sizes, seed)
        }
    };
    if let Some(t) = flag_tree {
        c.tree = t;
    }
    if let Some(v) = a.mu {
        c.params.mu = v;
    }
    if let Some(v) = a.alpha {
        c.params.alpha = v;
    }
    if let Some(v) = a.gamma {
        c.params.gamma = v;
    }
    if let Some(v) = a.reps {
        c.replicates = v;
    }
    if let Some(v) = a.sequences {
        c.sequences = v;
    }
    if let Some(v) = a.sizes {
        c.sizes = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.mode {
        c.mode = v;
    }
    let dir = out_dir(a.out, c.out_dir.clone())?;
    let outcome = run_subsample_experiment(&c)?;
    outcome.write(&dir)?;
    log::info!("wrote {} fits to {}", outcome.rows.len(), dir.display());
    Ok(())
}

fn symtree_study(a: StudyArgs) -> anyhow::Result<()> {
    let mut c = SymtreeStudyConfig::from_json(&read_config(&a.config)?)?;
    if let Some(v) = a.reps {
        c.replicates = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    let dir = out_dir(a.out, c.out_dir.clone())?;
    let outcome = run_symtree_reml_study(&c)?;
    outcome.write(&dir)?;
    Ok(())
}

fn micro(a: MicroArgs) -> anyhow::Result<()> {
    let mut c = MicroConfig::from_json(&read_config(&a.config)?)?;
    if let Some(t) = a.tree.source()? {
        c.tree = t;
    }
    if a.seed.is_some() {
        c.seed = a.seed;
    }
    let dir = out_dir(a.out, c.out_dir.clone())?;
    micro_report(&c)?.write(&dir)?;
    Ok(())
}
