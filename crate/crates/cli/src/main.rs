//! `fdsampler`: train, evaluate and verify sampling-time control policies.
//!
//! Exit codes: 0 on success, 1 on invalid input, 2 when a verification fails.
//! Set `FDSAMPLER_VERBOSE=1` to print per-epoch progress to stderr.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fdiv_sampler::config::ExperimentConfig;
use fdiv_sampler::divergence::DivergenceKind;
use fdiv_sampler::mdp::{rollout_batch, SamplingEnv, Trajectory};
use fdiv_sampler::metrics::{final_samples, HistogramGrid, MetricReport};
use fdiv_sampler::oracle::{integrator_order, ratio_fidelity};
use fdiv_sampler::policy::SamplingPolicy;
use fdiv_sampler::ratio::DiscriminatorTraining;
use fdiv_sampler::rng::{derive_seed, stream_rng, StreamTag};
use fdiv_sampler::snapshot::{DiscriminatorSnapshot, PolicyRole, PolicySnapshot};
use fdiv_sampler::tabular::gradcheck_suite;
use fdiv_sampler::target::GaussianMixture;
use fdiv_sampler::train::{metrics_csv, train_with_progress};

#[derive(Parser, Debug)]
#[command(name = "fdsampler", version, about = "Occupancy-matching control policies for diffusion samplers")]
struct Cli {
    /// Worker threads for parallel rollouts; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a policy and write snapshots plus a metrics log to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate samples from a policy snapshot and report metrics.
    Sample {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Samples CSV destination.
        #[arg(long, default_value = "samples.csv")]
        out: PathBuf,
    },
    /// Recompute metrics of a policy snapshot against the target of a config.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare the policy-gradient estimator with finite differences on random tabular problems.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Metrics of a policy at several temperatures, one CSV row per temperature.
    SweepTemp {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
        betas: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check the sampler and the ratio estimator against closed-form answers.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Invalid(String),
    Verification(String),
}

impl From<fdiv_sampler::Error> for Failure {
    fn from(e: fdiv_sampler::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn verbose() -> bool {
    std::env::var("FDSAMPLER_VERBOSE").is_ok_and(|v| !v.is_empty() && v != "0")
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    std::fs::write(path, text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn train(config: &Path, out: &Path, seed: Option<u64>) -> CmdResult {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(out).map_err(|e| Failure::Invalid(format!("{}: {e}", out.display())))?;
    let loud = verbose();
    let outcome = train_with_progress(&cfg, |m| {
        if loud {
            eprintln!("{}", m.csv_row());
        }
    })?;
    write_file(&out.join("metrics.csv"), &metrics_csv(&outcome.metrics))?;
    write_file(&out.join("config.toml"), &cfg.to_toml()?)?;
    PolicySnapshot::new(&outcome.policy, PolicyRole::Policy, &cfg)?.save(&out.join("policy.json"))?;
    PolicySnapshot::new(&outcome.ema, PolicyRole::Ema, &cfg)?.save(&out.join("ema.json"))?;
    DiscriminatorSnapshot::new(&outcome.discriminator, &cfg)?.save(&out.join("discriminator.json"))?;
    println!("wrote {}", out.display());
    Ok(())
}

struct Loaded {
    cfg: ExperimentConfig,
    env: SamplingEnv,
    policy: SamplingPolicy,
}

fn load_policy(path: &Path) -> Result<Loaded, Failure> {
    let snap = PolicySnapshot::load(path)?;
    let env = snap.config.build_env()?;
    Ok(Loaded { cfg: snap.config, env, policy: snap.policy })
}

fn check_sampling_args(n: usize, beta: f64) -> CmdResult {
    if n < 2 {
        return Err(Failure::Invalid("need at least 2 samples".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Failure::Invalid(format!("temperature must be positive, got {beta}")));
    }
    Ok(())
}

fn report(cfg: &ExperimentConfig, target: &GaussianMixture, trajectories: &[Trajectory]) -> Result<MetricReport, Failure> {
    let expert = target.sample_expert(0.0, cfg.eval.n_expert, &mut stream_rng(cfg.seed, StreamTag::Evaluation, 0))?;
    let [lo, hi] = cfg.eval.histogram_range;
    let grid = HistogramGrid::uniform(target.dim(), lo, hi, cfg.eval.histogram_bins);
    Ok(MetricReport::evaluate(trajectories, &expert, target, &grid)?)
}

fn report_text(r: &MetricReport) -> String {
    format!(
        "energy_distance = {}\nhistogram_kl = {}\nclass_tv = {}\nmean_nfe = {}\nn_samples = {}\n",
        r.energy_distance, r.histogram_kl, r.class_tv, r.mean_nfe, r.n_samples
    )
}

fn sample(policy: &Path, n: usize, beta: f64, seed: u64, out: &Path) -> CmdResult {
    check_sampling_args(n, beta)?;
    let l = load_policy(policy)?;
    let target = l.cfg.target_mixture()?;
    let trajs = rollout_batch(&l.env, &l.policy, beta, n, derive_seed(seed, StreamTag::Evaluation, 1))?;
    let mut csv = String::new();
    let d = target.dim();
    let k = target.num_components();
    let header: Vec<String> = (0..d).map(|i| format!("x{i}")).chain((0..k).map(|c| format!("p_class{c}"))).collect();
    csv.push_str(&header.join(","));
    csv.push('\n');
    for x in final_samples(&trajs) {
        let post = target.class_posterior(&x, 0.0)?;
        let row: Vec<String> = x.iter().chain(&post).map(|v| v.to_string()).collect();
        let _ = writeln!(csv, "{}", row.join(","));
    }
    write_file(out, &csv)?;
    print!("{}", report_text(&report(&l.cfg, &target, &trajs)?));
    Ok(())
}

fn eval(policy: &Path, config: &Path, n: usize, beta: f64, seed: u64) -> CmdResult {
    check_sampling_args(n, beta)?;
    let l = load_policy(policy)?;
    let cfg = ExperimentConfig::load(config)?;
    let target = cfg.target_mixture()?;
    if target.dim() != l.env.dim() {
        return Err(Failure::Invalid("config target and policy differ in dimension".into()));
    }
    let trajs = rollout_batch(&l.env, &l.policy, beta, n, derive_seed(seed, StreamTag::Evaluation, 1))?;
    print!("{}", report_text(&report(&cfg, &target, &trajs)?));
    Ok(())
}

fn gradcheck(cases: usize, seed: u64, tol: f64) -> CmdResult {
    if cases == 0 {
        return Err(Failure::Invalid("need at least one case".into()));
    }
    let results = gradcheck_suite(cases, seed)?;
    let mut failed = 0;
    println!("states,actions,horizon,divergence,max_abs_error,pass");
    for c in &results {
        let pass = c.max_abs_error <= tol;
        failed += usize::from(!pass);
        let kind = match c.kind {
            DivergenceKind::Kl => "kl",
            DivergenceKind::Rkl => "rkl",
        };
        println!("{},{},{},{kind},{:e},{pass}", c.states, c.actions, c.horizon, c.max_abs_error);
    }
    if failed > 0 {
        return Err(Failure::Verification(format!("{failed} of {} gradient checks exceed {tol:e}", results.len())));
    }
    Ok(())
}

fn sweep_temp(policy: &Path, betas: &[f64], n: usize, seed: u64) -> CmdResult {
    if betas.is_empty() {
        return Err(Failure::Invalid("no temperatures given".into()));
    }
    let l = load_policy(policy)?;
    let target = l.cfg.target_mixture()?;
    println!("beta,{}", MetricReport::CSV_HEADER);
    for beta in betas {
        check_sampling_args(n, *beta)?;
        let trajs = rollout_batch(&l.env, &l.policy, *beta, n, derive_seed(seed, StreamTag::Evaluation, 1))?;
        println!("{beta},{}", report(&l.cfg, &target, &trajs)?.csv_row());
    }
    Ok(())
}

fn oracle_check(seed: u64) -> CmdResult {
    let mut failures = Vec::new();
    let order = integrator_order(0.5, 0.05, 5.0, 3.0, 16, 3)?;
    for (name, ratios, band) in [("heun", order.heun_ratios(), (2.5, 6.0)), ("euler", order.euler_ratios(), (1.5, 3.0))] {
        let ok = ratios.iter().all(|r| (band.0..=band.1).contains(r));
        println!("{name} error ratios per step halving: {ratios:?} (expected in [{}, {}])", band.0, band.1);
        if !ok {
            failures.push(format!("{name} convergence order"));
        }
    }
    let p = GaussianMixture::new(vec![0.5, 0.5], vec![vec![-1.0], vec![1.0]], vec![vec![0.25], vec![0.25]])?;
    let q = GaussianMixture::new(vec![0.7, 0.3], vec![vec![-0.5], vec![1.5]], vec![vec![0.5], vec![0.3]])?;
    let opts = DiscriminatorTraining { iters: 2000, batch: 512, lr: 1e-2, label_smoothing: 0.0, ..Default::default() };
    let err = ratio_fidelity(&p, &q, 10_000, &[32, 32], &opts, (-4.0, 4.0), &mut stream_rng(seed, StreamTag::Discriminator, 0))?;
    println!("discriminator mean |logit error| on the high-density region: {err} (expected < 0.15)");
    if !(err < 0.15) {
        failures.push("ratio estimator fidelity".to_string());
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(failures.join(", ")))
    }
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Train { config, out, seed } => train(&config, &out, seed),
        Command::Sample { policy, n, beta, seed, out } => sample(&policy, n, beta, seed, &out),
        Command::Eval { policy, config, n, beta, seed } => eval(&policy, &config, n, beta, seed),
        Command::Gradcheck { cases, seed, tol } => gradcheck(cases, seed, tol),
        Command::SweepTemp { policy, betas, n, seed } => sweep_temp(&policy, &betas, n, seed),
        Command::OracleCheck { seed } => oracle_check(seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        builder = builder.num_threads(t);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(2)
        }
    }
}
