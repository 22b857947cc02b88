//! Command implementations for the `privagg` binary.
//!
//! Every command writes CSV to stdout (or `--out`) and returns the process
//! exit code. Diagnostics go to stderr.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use privagg::adversary::{self, AttackOutcome, LinkExposure};
use privagg::analysis::{self, Curve, DisclosureModel};
use privagg::config::AdversaryKind;
use privagg::cpda::{self, Scheme};
use privagg::rng::{self, Stream};
use privagg::{ConfigError, NodeId, RoundOutcome, ScenarioConfig, Transcript};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_REFUSED: i32 = 2;
pub const EXIT_ABORTED: i32 = 3;

pub const ATTACK_HEADER: [&str; 6] = [
    "model",
    "target",
    "disclosed_value",
    "true_value",
    "exact",
    "defense_triggered",
];
pub const CURVE_HEADER: [&str; 5] = [
    "b",
    "p_cpda_formula",
    "p_ours_formula",
    "p_ours_empirical",
    "trials",
];
pub const BENCH_HEADER: [&str; 5] = [
    "scheme",
    "n_nodes",
    "op_count",
    "wall_ns_median",
    "repetitions",
];

#[derive(Debug, Parser)]
#[command(name = "privagg", version, about = "Secure-sum aggregation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario and write its transcript.
    Run(RunArgs),
    /// Run an attack against a scenario and emit one CSV row per target.
    Attack(AttackArgs),
    /// Sweep the disclosure-probability curves.
    Curve(CurveArgs),
    /// Count operations and time the aggregation kernels.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Transcript destination; defaults to `<config>.transcript.log`.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelFlag {
    SemiHonest,
    Collusion,
    ServerProbe,
    LinkCompromise,
}

impl ModelFlag {
    fn name(self) -> &'static str {
        match self {
            ModelFlag::SemiHonest => "semi-honest",
            ModelFlag::Collusion => "collusion",
            ModelFlag::ServerProbe => "server-probe",
            ModelFlag::LinkCompromise => "link-compromise",
        }
    }
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Attack to run; defaults to the config's `adversary`.
    #[arg(long, value_enum)]
    pub model: Option<ModelFlag>,
    /// Collusion target; every interior source when absent.
    #[arg(long)]
    pub target: Option<u32>,
    /// Coalition for the semi-honest model, e.g. `1,3`.
    #[arg(long, value_delimiter = ',')]
    pub nodes: Vec<u32>,
    /// Link-break probability for link compromise.
    #[arg(long)]
    pub b: Option<f64>,
    /// Disable the initiator's probe check.
    #[arg(long)]
    pub no_defense: bool,
    /// CSV destination; stdout when absent.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    /// Minimum cluster size.
    #[arg(long, default_value_t = 3)]
    pub pc: usize,
    /// Maximum cluster size.
    #[arg(long, default_value_t = 5)]
    pub dmax: usize,
    /// P(k=m) for m = pc..=dmax; uniform when absent.
    #[arg(long, value_delimiter = ',')]
    pub cluster_dist: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.0)]
    pub b_min: f64,
    #[arg(long, default_value_t = 1.0)]
    pub b_max: f64,
    #[arg(long, default_value_t = 0.05)]
    pub b_step: f64,
    /// Monte Carlo trials per grid point for the ring scheme; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub trials: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeFlag {
    Ours,
    Cpda,
    Both,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value_t = SchemeFlag::Both)]
    pub scheme: SchemeFlag,
    /// Sizes as a list of `n` or `lo-hi`; defaults to 2-50 for ours and
    /// 3-5 for cpda.
    #[arg(long)]
    pub sizes: Option<String>,
    #[arg(long, default_value_t = 31)]
    pub repetitions: usize,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

/// Parses arguments and runs the command. Usage errors exit 1 so that 2 and
/// 3 stay reserved for round outcomes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
    }
}

pub fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Attack(a) => cmd_attack(&a),
        Command::Curve(a) => cmd_curve(&a),
        Command::Bench(a) => cmd_bench(&a),
    }
}

fn load(args: &ScenarioArgs) -> Result<ScenarioConfig, ConfigError> {
    let mut config = ScenarioConfig::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(
            std::fs::File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        ),
        None => Box::new(std::io::stdout().lock()),
    })
}

pub fn default_transcript_path(config: &Path) -> PathBuf {
    config.with_extension("transcript.log")
}

pub fn exit_code(outcome: Option<&RoundOutcome>) -> i32 {
    match outcome {
        Some(RoundOutcome::Sum(_)) => EXIT_OK,
        Some(RoundOutcome::Refused) => EXIT_REFUSED,
        Some(RoundOutcome::Aborted(_)) | None => EXIT_ABORTED,
    }
}

pub fn cmd_run(args: &RunArgs) -> Result<i32> {
    let config = load(&args.scenario)?;
    let transcript = privagg::run_scenario(&config)?;
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| default_transcript_path(&args.scenario.config));
    std::fs::write(&path, transcript.to_log())
        .with_context(|| format!("cannot write {}", path.display()))?;

    let outcome = transcript.final_outcome();
    let (label, sum) = match outcome {
        Some(RoundOutcome::Sum(s)) => ("sum", s.get().to_string()),
        Some(RoundOutcome::Refused) => ("refused", String::new()),
        Some(RoundOutcome::Aborted(why)) => {
            eprintln!("round aborted: {why}");
            ("aborted", String::new())
        }
        None => ("aborted", String::new()),
    };
    let mut w = csv::Writer::from_writer(std::io::stdout().lock());
    w.write_record(["outcome", "sum", "rounds"])?;
    w.write_record([label, &sum, &transcript.rounds.len().to_string()])?;
    w.flush()?;
    Ok(exit_code(outcome))
}

struct AttackRow {
    target: Option<NodeId>,
    disclosed: Option<u64>,
    truth: Option<u64>,
    defense_triggered: bool,
}

fn rows_for(
    targets: impl IntoIterator<Item = NodeId>,
    outcome: &AttackOutcome,
    transcript_inputs: &std::collections::BTreeMap<NodeId, u64>,
) -> Vec<AttackRow> {
    targets
        .into_iter()
        .map(|t| AttackRow {
            target: Some(t),
            disclosed: outcome.disclosed.get(&t).copied(),
            truth: transcript_inputs.get(&t).copied(),
            defense_triggered: outcome.defense_triggered,
        })
        .collect()
}

fn resolve_model(args: &AttackArgs, config: &ScenarioConfig) -> Result<ModelFlag> {
    if let Some(m) = args.model {
        return Ok(m);
    }
    Ok(match config.adversary {
        AdversaryKind::SemiHonest => ModelFlag::SemiHonest,
        AdversaryKind::Collusion => ModelFlag::Collusion,
        AdversaryKind::ServerProbe => ModelFlag::ServerProbe,
        AdversaryKind::LinkCompromise => ModelFlag::LinkCompromise,
        AdversaryKind::None => {
            bail!("no attack model: pass --model or set `adversary` in the config")
        }
    })
}

fn last_round(t: &Transcript) -> usize {
    t.rounds.len().saturating_sub(1)
}

pub fn cmd_attack(args: &AttackArgs) -> Result<i32> {
    let config = load(&args.scenario)?;
    let model = resolve_model(args, &config)?;
    let rows = match model {
        ModelFlag::ServerProbe => {
            let defense = config.probe_defense && !args.no_defense;
            let inputs = config.resolve_values();
            let mut rows = Vec::new();
            for i in 1..=config.n_sources {
                let id = NodeId(i);
                let outcome = adversary::run_server_probe(&config, Some(id), defense)?;
                rows.extend(rows_for(
                    [id],
                    &outcome,
                    &[(id, inputs[i as usize - 1])].into_iter().collect(),
                ));
            }
            rows
        }
        ModelFlag::Collusion => {
            let transcript = privagg::run_scenario(&config)?;
            let round = last_round(&transcript);
            let targets = match args.target.or(config.adversary_target) {
                Some(t) => vec![NodeId(t)],
                None => adversary::interior_targets(&transcript, round),
            };
            let mut rows = Vec::new();
            for t in targets {
                let outcome = adversary::run_collusion_attack(&transcript, round, t)?;
                rows.extend(rows_for([t], &outcome, &transcript.inputs));
            }
            rows
        }
        ModelFlag::SemiHonest => {
            let nodes = if args.nodes.is_empty() {
                &config.adversary_nodes
            } else {
                &args.nodes
            };
            if nodes.is_empty() {
                bail!("semi-honest model needs --nodes or `adversary_nodes`");
            }
            let coalition: BTreeSet<NodeId> = nodes.iter().map(|&n| NodeId(n)).collect();
            let transcript = privagg::run_scenario(&config)?;
            let round = last_round(&transcript);
            let outcome = adversary::run_coalition_attack(&transcript, round, &coalition)?;
            let others = transcript
                .inputs
                .keys()
                .copied()
                .filter(|n| !coalition.contains(n));
            rows_for(others, &outcome, &transcript.inputs)
        }
        ModelFlag::LinkCompromise => {
            let b = args.b.unwrap_or(config.link_break_prob);
            if !(0.0..=1.0).contains(&b) {
                return Err(
                    ConfigError::field("link_break_prob", format!("{b} outside [0, 1]")).into(),
                );
            }
            let transcript = privagg::run_scenario(&config)?;
            let exposure = LinkExposure::new(&transcript, last_round(&transcript))?;
            let outcome = exposure.trial(b, &mut rng::derive(config.seed, Stream::Trials, 0));
            let targets: Vec<NodeId> = exposure.candidates().collect();
            rows_for(targets, &outcome, &transcript.inputs)
        }
    };

    let mut w = csv::Writer::from_writer(sink(args.out.as_deref())?);
    w.write_record(ATTACK_HEADER)?;
    for row in &rows {
        let opt = |v: Option<u64>| v.map_or_else(String::new, |v| v.to_string());
        let exact = row.disclosed.is_some() && row.disclosed == row.truth;
        w.write_record([
            model.name().to_string(),
            row.target.map_or_else(String::new, |t| t.0.to_string()),
            opt(row.disclosed),
            opt(row.truth),
            exact.to_string(),
            row.defense_triggered.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(EXIT_OK)
}

/// Number of points in `min..=max` at spacing `step`, or an error when the
/// step does not divide the range.
pub fn grid_count(min: f64, max: f64, step: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&min) || !(0.0..=1.0).contains(&max) || min > max {
        bail!("invalid grid: need 0 <= b-min <= b-max <= 1, got [{min}, {max}]");
    }
    if !(step.is_finite() && step > 0.0) {
        bail!("invalid grid: b-step must be positive, got {step}");
    }
    let intervals = (max - min) / step;
    let rounded = intervals.round();
    if (intervals - rounded).abs() > 1e-9 * rounded.max(1.0) {
        bail!("invalid grid: b-step {step} does not divide [{min}, {max}]");
    }
    Ok(rounded as usize + 1)
}

pub fn cmd_curve(args: &CurveArgs) -> Result<i32> {
    let count = grid_count(args.b_min, args.b_max, args.b_step)?;
    let grid = analysis::linear_grid(args.b_min, args.b_max, count);
    let model = match &args.cluster_dist {
        Some(dist) => DisclosureModel::new(0.0, args.pc, args.dmax, dist.clone()),
        None => DisclosureModel::uniform(0.0, args.pc, args.dmax),
    }?;
    let cluster = analysis::sweep_curve(Curve::Cluster(&model), &grid, 0, args.seed)?;
    let ours = analysis::sweep_curve(Curve::Ours, &grid, args.trials, args.seed)?;

    let mut w = csv::Writer::from_writer(sink(args.out.as_deref())?);
    w.write_record(CURVE_HEADER)?;
    for (c, o) in cluster.iter().zip(&ours) {
        w.write_record([
            c.b.to_string(),
            c.p_formula.to_string(),
            o.p_formula.to_string(),
            o.p_empirical.map_or_else(String::new, |p| p.to_string()),
            o.trials.map_or_else(String::new, |t| t.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(EXIT_OK)
}

/// Parses `3,5-7` into `[3, 5, 6, 7]`.
pub fn parse_sizes(spec: &str) -> Result<Vec<usize>> {
    let mut sizes = Vec::new();
    for part in spec.split(',').map(str::trim) {
        match part.split_once('-') {
            Some((lo, hi)) => {
                let lo: usize = lo
                    .trim()
                    .parse()
                    .with_context(|| format!("invalid size `{part}`"))?;
                let hi: usize = hi
                    .trim()
                    .parse()
                    .with_context(|| format!("invalid size `{part}`"))?;
                if lo > hi {
                    bail!("invalid size range `{part}`");
                }
                sizes.extend(lo..=hi);
            }
            None => sizes.push(
                part.parse()
                    .with_context(|| format!("invalid size `{part}`"))?,
            ),
        }
    }
    Ok(sizes)
}

pub fn cmd_bench(args: &BenchArgs) -> Result<i32> {
    if args.repetitions == 0 {
        bail!("repetitions must be at least 1");
    }
    let schemes: &[Scheme] = match args.scheme {
        SchemeFlag::Ours => &[Scheme::Ours],
        SchemeFlag::Cpda => &[Scheme::Cpda],
        SchemeFlag::Both => &[Scheme::Ours, Scheme::Cpda],
    };
    let explicit = args.sizes.as_deref().map(parse_sizes).transpose()?;
    let mut plan = Vec::new();
    for &scheme in schemes {
        let sizes = match &explicit {
            Some(s) => s.clone(),
            None => match scheme {
                Scheme::Ours => (2..=50).collect(),
                Scheme::Cpda => (cpda::MIN_CLUSTER..=cpda::MAX_CLUSTER).collect(),
            },
        };
        let (min, max) = scheme.size_range();
        if let Some(&bad) = sizes.iter().find(|n| !(min..=max).contains(*n)) {
            bail!("size {bad} outside the supported range for {scheme}");
        }
        plan.extend(sizes.into_iter().map(|n| (scheme, n)));
    }

    let mut w = csv::Writer::from_writer(sink(args.out.as_deref())?);
    w.write_record(BENCH_HEADER)?;
    for (scheme, n) in plan {
        let r = cpda::benchmark_kernel(scheme, n, args.repetitions)?;
        w.write_record([
            r.scheme.to_string(),
            r.n_nodes.to_string(),
            r.op_count.to_string(),
            r.wall_ns_median.to_string(),
            r.repetitions.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(EXIT_OK)
}
