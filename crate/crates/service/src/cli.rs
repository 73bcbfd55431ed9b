//! `prescribe` command line: the offline pipeline and the server.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use prescribe_core::eventlog::{
    annotate, drop_activities, filter_variants, parse_log, read_annotated, split, write_annotated, write_log,
    CsvFormat, DEFAULT_MIN_VARIANT_FRACTION,
};
use prescribe_core::logeval::{render_rq1, render_rq2, rq1_report, rq2_prefix_analysis, write_rq2_series};
use prescribe_core::mdp::{build_mdp_with, load_mdp, save_mdp, to_dot, BuildOptions};
use prescribe_core::rl::{
    customary_policy, load_policy, policy_iteration, random_policy, save_policy, write_diagnostics, PolicyArtifact,
    PolicyIterationConfig,
};
use prescribe_core::scenarios::synthetic::{generate_synthetic_log, Template};
use prescribe_core::simeval::{compare_policies, render_table, DEFAULT_CASES};
use prescribe_core::{AnnotatedLog, Mdp, ScenarioSpec};
use serde::Deserialize;

use crate::api::{router, AppState};
use crate::recommender::ArtifactPaths;

#[derive(Debug, Parser)]
#[command(name = "prescribe", version, about = "Next-activity recommendations learned from event logs")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Master seed for every randomized step.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Bundled scenario name (`fines`, `loans`) or path to a scenario TOML.
    #[arg(long, global = true)]
    pub scenario: Option<String>,
    /// TOML file with defaults for the options below.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse, filter, annotate and split a CSV event log.
    Preprocess(PreprocessArgs),
    /// Compile an annotated log into an MDP artifact.
    BuildMdp(BuildArgs),
    /// Learn a policy on an MDP.
    Train(TrainArgs),
    /// Simulate policies on a (test) MDP.
    Simulate(SimulateArgs),
    /// Evaluate a policy against a held-out annotated log.
    Evaluate(EvaluateArgs),
    /// Serve recommendations over HTTP.
    Serve(ServeArgs),
    /// Write a synthetic log with a known optimal policy.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Column layout (TOML). Defaults to `<input>.format.toml` when present.
    #[arg(long)]
    pub format: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub min_variant_fraction: Option<f64>,
    /// Share of traces in the training part; 1 keeps the whole log.
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Annotated log (JSON lines).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a Graphviz rendering.
    #[arg(long)]
    pub dot: Option<PathBuf>,
    /// Leave attenuated reward terms unscaled.
    #[arg(long)]
    pub no_reliability: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Optimal,
    Customary,
    Random,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub mdp: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = KindArg::Optimal)]
    pub kind: KindArg,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Per-iteration diagnostics (JSON lines).
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub mdp: PathBuf,
    /// Policy artifact; repeat to compare several.
    #[arg(long, required = true)]
    pub policy: Vec<PathBuf>,
    #[arg(long)]
    pub cases: Option<usize>,
    /// Write the reports as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Question {
    Rq1,
    Rq2,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(value_enum)]
    pub question: Question,
    /// Annotated test log (JSON lines).
    #[arg(long)]
    pub log: PathBuf,
    /// MDP the policy was trained on.
    #[arg(long)]
    pub mdp: PathBuf,
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long)]
    pub max_prefix: Option<usize>,
    /// Leave each trace out of its own prefix estimate.
    #[arg(long)]
    pub exclude_self: bool,
    /// Write `<prefix>.delta.tsv` and `<prefix>.count.tsv` (rq2).
    #[arg(long)]
    pub series: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub mdp: PathBuf,
    #[arg(long)]
    pub policy: PathBuf,
    /// MDP for what-if projections, typically built from the test log.
    #[arg(long)]
    pub sim_mdp: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value = "fines")]
    pub template: Template,
    #[arg(long)]
    pub traces: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the hidden MDP and its optimal policy as artifacts with
    /// this path prefix.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

/// Defaults read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub scenario: Option<String>,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub simulate: SimulateConfig,
    pub evaluate: EvaluateConfig,
    pub serve: ServeConfig,
    pub generate: GenerateConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub min_variant_fraction: Option<f64>,
    pub train_fraction: Option<f64>,
    pub format: Option<CsvFormat>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: Option<usize>,
    pub max_iters: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub cases: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub max_prefix: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub bind: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub traces: Option<usize>,
}

const DEFAULT_TRAIN_FRACTION: f64 = 0.6;
const DEFAULT_MAX_PREFIX: usize = 20;
const DEFAULT_TRACES: usize = 1000;
const DEFAULT_BIND: &str = "127.0.0.1:8080";

struct Ctx {
    seed: u64,
    scenario: Option<String>,
    config: Config,
}

impl Ctx {
    fn new(global: &Global) -> Result<Ctx> {
        let config: Config = match &global.config {
            Some(p) => toml::from_str(&read_text(p)?).with_context(|| format!("invalid config `{}`", p.display()))?,
            None => Config::default(),
        };
        Ok(Ctx {
            seed: global.seed.or(config.seed).unwrap_or(0),
            scenario: global.scenario.clone().or_else(|| config.scenario.clone()),
            config,
        })
    }

    /// The selected scenario, or `fallback` (the artifact's own) when none
    /// was given.
    fn spec(&self, fallback: Option<&str>) -> Result<ScenarioSpec> {
        let name = self.scenario.as_deref().or(fallback).unwrap_or("fines");
        ScenarioSpec::load(name).with_context(|| format!("cannot load scenario `{name}`"))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("cannot read `{}`", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read `{}`", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create `{}`", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot write `{}`", path.display()))?))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

fn load_mdp_file(path: &Path) -> Result<Mdp> {
    load_mdp(&read_bytes(path)?).with_context(|| format!("invalid MDP artifact `{}`", path.display()))
}

fn load_policy_file(path: &Path) -> Result<PolicyArtifact> {
    load_policy(&read_bytes(path)?).with_context(|| format!("invalid policy artifact `{}`", path.display()))
}

fn load_annotated(path: &Path) -> Result<AnnotatedLog> {
    let f = File::open(path).with_context(|| format!("cannot read `{}`", path.display()))?;
    read_annotated(BufReader::new(f)).with_context(|| format!("invalid annotated log `{}`", path.display()))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".format.toml");
    PathBuf::from(s)
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(&cli.global)?;
    match cli.command {
        Command::Preprocess(a) => preprocess(&ctx, a),
        Command::BuildMdp(a) => build(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Simulate(a) => simulate(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Serve(a) => serve(&ctx, a),
        Command::Generate(a) => generate(&ctx, a),
    }
}

fn preprocess(ctx: &Ctx, a: PreprocessArgs) -> Result<()> {
    let spec = ctx.spec(None)?;
    let cfg = &ctx.config.preprocess;
    let format = match a.format.clone().or_else(|| Some(sidecar(&a.input)).filter(|p| p.exists())) {
        Some(p) => toml::from_str(&read_text(&p)?).with_context(|| format!("invalid format `{}`", p.display()))?,
        None => cfg.format.clone().unwrap_or_default(),
    };
    let raw = parse_log(File::open(&a.input).with_context(|| format!("cannot read `{}`", a.input.display()))?, &format)
        .with_context(|| format!("cannot parse `{}`", a.input.display()))?;
    let read = raw.len();
    let min_fraction = a.min_variant_fraction.or(cfg.min_variant_fraction).unwrap_or(DEFAULT_MIN_VARIANT_FRACTION);
    let log = filter_variants(drop_activities(raw, &spec.excluded_activities), min_fraction);
    if log.is_empty() {
        bail!("no traces left after filtering {read} traces at min-variant-fraction {min_fraction}");
    }
    let spec = spec.calibrated(&log).into_owned();
    let annotated_to = |log, name: &str| -> Result<usize> {
        let out = annotate(log, &spec)?;
        let path = a.out_dir.join(name);
        let mut w = create(&path)?;
        write_annotated(&out, &mut w)?;
        w.flush()?;
        Ok(out.len())
    };
    let fraction = a.train_fraction.or(cfg.train_fraction).unwrap_or(DEFAULT_TRAIN_FRACTION);
    if fraction >= 1.0 {
        let n = annotated_to(&log, "train.jsonl")?;
        println!("read {read} traces, kept {n}, wrote {}", a.out_dir.join("train.jsonl").display());
    } else {
        let (train, test) = split(&log, fraction, ctx.seed)?;
        let n_train = annotated_to(&train, "train.jsonl")?;
        let n_test = annotated_to(&test, "test.jsonl")?;
        println!("read {read} traces, kept {}, train {n_train}, test {n_test}", log.len());
    }
    write_file(&a.out_dir.join("scenario.toml"), spec.to_toml().as_bytes())?;
    Ok(())
}

fn build(ctx: &Ctx, a: BuildArgs) -> Result<()> {
    let log = load_annotated(&a.input)?;
    let spec = ctx.spec(Some(&log.scenario_id))?;
    let (mdp, report) = build_mdp_with(&log, &spec, BuildOptions { apply_reliability: !a.no_reliability })?;
    write_file(&a.out, &save_mdp(&mdp))?;
    if let Some(dot) = &a.dot {
        write_file(dot, to_dot(&mdp).as_bytes())?;
    }
    let s = mdp.stats();
    println!(
        "{} states, {} actions, {} edges from {} traces ({} skipped); fingerprint {}",
        s.states,
        s.actions,
        s.edges,
        report.traces,
        report.skipped,
        mdp.fingerprint()
    );
    Ok(())
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let mdp = load_mdp_file(&a.mdp)?;
    let artifact = match a.kind {
        KindArg::Customary => PolicyArtifact::untrained(customary_policy(&mdp)),
        KindArg::Random => PolicyArtifact::untrained(random_policy(&mdp)),
        KindArg::Optimal => {
            let defaults = PolicyIterationConfig::default();
            let cfg = PolicyIterationConfig {
                episodes_per_eval: a.episodes.or(ctx.config.train.episodes).unwrap_or(defaults.episodes_per_eval),
                max_iters: a.max_iters.or(ctx.config.train.max_iters).unwrap_or(defaults.max_iters),
                seed: ctx.seed,
                ..defaults
            };
            let training = policy_iteration(&mdp, &cfg)?;
            if let Some(path) = &a.diagnostics {
                let mut w = create(path)?;
                write_diagnostics(&training.iterations, &mut w)?;
                w.flush()?;
            }
            println!(
                "{} after {} iterations",
                if training.converged { "converged" } else { "stopped without converging" },
                training.iterations.len()
            );
            PolicyArtifact::from_training(&mdp, &training, &cfg)
        }
    };
    write_file(&a.out, &save_policy(&artifact))?;
    println!(
        "{} policy over {} states written to {}",
        artifact.policy.kind,
        artifact.policy.choices.len(),
        a.out.display()
    );
    Ok(())
}

fn outcome_label(spec: &ScenarioSpec) -> &'static str {
    if spec.scenario_id == "loans" {
        "offer accepted"
    } else if spec.scenario_id == "fines" {
        "full payment"
    } else {
        "outcome"
    }
}

fn simulate(ctx: &Ctx, a: SimulateArgs) -> Result<()> {
    let mdp = load_mdp_file(&a.mdp)?;
    let policies = a.policy.iter().map(|p| load_policy_file(p).map(|x| x.policy)).collect::<Result<Vec<_>>>()?;
    let n = a.cases.or(ctx.config.simulate.cases).unwrap_or(DEFAULT_CASES);
    let reports = compare_policies(&mdp, &policies, n, ctx.seed)?;
    let spec = ctx.spec(Some(mdp.scenario_id()))?;
    print!("{}", render_table(&reports, outcome_label(&spec)));
    for r in reports.iter().filter(|r| r.fallback_states > 0) {
        println!(
            "{}: {} test states not covered, {} fallback decisions",
            r.policy_kind, r.fallback_states, r.fallback_visits
        );
    }
    if let Some(path) = &a.json {
        write_file(path, serde_json::to_string_pretty(&reports)?.as_bytes())?;
    }
    Ok(())
}

fn evaluate(ctx: &Ctx, a: EvaluateArgs) -> Result<()> {
    let log = load_annotated(&a.log)?;
    let mdp = load_mdp_file(&a.mdp)?;
    let policy = load_policy_file(&a.policy)?.policy;
    let spec = ctx.spec(Some(&log.scenario_id))?;
    let json = match a.question {
        Question::Rq1 => {
            let r = rq1_report(&log, &policy, &mdp, &spec)?;
            print!("{}", render_rq1(&r, outcome_label(&spec)));
            serde_json::to_string_pretty(&r)?
        }
        Question::Rq2 => {
            let max_prefix = a.max_prefix.or(ctx.config.evaluate.max_prefix).unwrap_or(DEFAULT_MAX_PREFIX);
            let r = rq2_prefix_analysis(&log, &policy, &mdp, &spec, max_prefix, !a.exclude_self)?;
            print!("{}", render_rq2(&r));
            if let Some(prefix) = &a.series {
                let with = |ext: &str| {
                    let mut s = prefix.as_os_str().to_owned();
                    s.push(ext);
                    PathBuf::from(s)
                };
                let (mut d, mut c) = (create(&with(".delta.tsv"))?, create(&with(".count.tsv"))?);
                write_rq2_series(&r, &mut d, &mut c)?;
                d.flush()?;
                c.flush()?;
            }
            serde_json::to_string_pretty(&r)?
        }
    };
    if let Some(path) = &a.json {
        write_file(path, json.as_bytes())?;
    }
    Ok(())
}

fn serve(ctx: &Ctx, a: ServeArgs) -> Result<()> {
    let paths = ArtifactPaths { mdp: a.mdp, policy: a.policy, sim_mdp: a.sim_mdp, scenario: ctx.scenario.clone() };
    let state = AppState::load(paths)?;
    let bind = a.bind.or_else(|| ctx.config.serve.bind.clone()).unwrap_or_else(|| DEFAULT_BIND.to_string());
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind).await.with_context(|| format!("cannot bind `{bind}`"))?;
        log::info!("serving {} on {}", state.snapshot().scenario_id(), listener.local_addr()?);
        println!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn generate(ctx: &Ctx, a: GenerateArgs) -> Result<()> {
    let n = a.traces.or(ctx.config.generate.traces).unwrap_or(DEFAULT_TRACES);
    let (log, truth) = generate_synthetic_log(a.template, n, ctx.seed);
    let mut w = create(&a.out)?;
    let format = write_log(&log, &mut w)?;
    w.flush()?;
    write_file(&sidecar(&a.out), toml::to_string(&format)?.as_bytes())?;
    if let Some(prefix) = &a.truth {
        let with = |ext: &str| {
            let mut s = prefix.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        write_file(&with(".mdp"), &save_mdp(&truth.mdp))?;
        write_file(&with(".policy"), &save_policy(&PolicyArtifact::untrained(truth.optimal.clone())))?;
    }
    println!("{n} {} traces written to {}; optimal value {:.4}", a.template, a.out.display(), truth.optimal_value);
    Ok(())
}
