use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use adaptnet::cli::{flag_pairs, resolve_config, run, Command, OUT_DIR_ENV};
use adaptnet::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adaptnet", version, about = "Adaptive finite element experiments driven classically or by ReLU recurrent networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve, estimate, Dörfler-mark, refine
    AdaptClassical(Flags),
    /// The same loop with estimate and mark done by the network ADAPTIVE
    AdaptRnn(Flags),
    /// Uniform refinement
    Uniform(Flags),
    /// Greedy refinement of a gradient surrogate
    Greedy(Flags),
    /// Monte-Carlo greedy refinement with a stop set
    GreedyStochastic(Flags),
    /// Learned maximum-strategy marking (fixture weights or SPSA)
    TrainMaxstrategy(Flags),
    /// Train the marking network while refining
    TrainOnTheJob(Flags),
    /// Measure the error of the squaring and product networks
    VerifyBlocks(Flags),
}

/// Every key may also come from the `key = value` file given by --config; flags win.
#[derive(Args)]
struct Flags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    theta: Option<String>,
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    eps_tol: Option<String>,
    #[arg(long)]
    max_elements: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    form: Option<String>,
    #[arg(long)]
    f: Option<String>,
    #[arg(long)]
    threads: Option<String>,
    #[arg(long)]
    initial_refinements: Option<String>,
    #[arg(long)]
    draws: Option<String>,
    #[arg(long)]
    points: Option<String>,
    #[arg(long)]
    m: Option<String>,
    #[arg(long)]
    surrogate: Option<String>,
    #[arg(long)]
    n_train: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    init_gain: Option<String>,
    #[arg(long)]
    fixture: Option<String>,
    #[arg(long)]
    spsa_iterations: Option<String>,
    #[arg(long)]
    rho_bound: Option<String>,
    #[arg(long)]
    samples: Option<String>,
    #[arg(long)]
    svg: Option<String>,
}

impl Flags {
    fn pairs(self) -> (Option<PathBuf>, Vec<(String, String)>) {
        let m = BTreeMap::from([
            ("domain", self.domain),
            ("theta", self.theta),
            ("eps", self.eps),
            ("eps_tol", self.eps_tol),
            ("max_elements", self.max_elements),
            ("seed", self.seed),
            ("out_dir", self.out_dir),
            ("form", self.form),
            ("f", self.f),
            ("threads", self.threads),
            ("initial_refinements", self.initial_refinements),
            ("draws", self.draws),
            ("points", self.points),
            ("m", self.m),
            ("surrogate", self.surrogate),
            ("n_train", self.n_train),
            ("steps", self.steps),
            ("init_gain", self.init_gain),
            ("fixture", self.fixture),
            ("spsa_iterations", self.spsa_iterations),
            ("rho_bound", self.rho_bound),
            ("samples", self.samples),
            ("svg", self.svg),
        ]);
        (self.config, flag_pairs(m))
    }
}

fn main_inner() -> Result<(), Error> {
    let cli = Cli::parse();
    let (command, flags) = match cli.cmd {
        Cmd::AdaptClassical(f) => (Command::AdaptClassical, f),
        Cmd::AdaptRnn(f) => (Command::AdaptRnn, f),
        Cmd::Uniform(f) => (Command::Uniform, f),
        Cmd::Greedy(f) => (Command::Greedy, f),
        Cmd::GreedyStochastic(f) => (Command::GreedyStochastic, f),
        Cmd::TrainMaxstrategy(f) => (Command::TrainMaxstrategy, f),
        Cmd::TrainOnTheJob(f) => (Command::TrainOnTheJob, f),
        Cmd::VerifyBlocks(f) => (Command::VerifyBlocks, f),
    };
    let (config, pairs) = flags.pairs();
    let text = config.map(std::fs::read_to_string).transpose()?;
    let env = std::env::var(OUT_DIR_ENV).ok();
    let cfg = resolve_config(command, text.as_deref(), env.as_deref(), &pairs)?;
    if let Some(t) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    }
    let rep = run(&cfg)?;
    for l in &rep.lines {
        println!("{l}");
    }
    for f in &rep.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
