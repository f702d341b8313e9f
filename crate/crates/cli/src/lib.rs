//! The `segloop` command.
//!
//! Settings for each subcommand start from built-in defaults, are overlaid by
//! the JSON file given with `--config`, then by flags. The merged settings are
//! echoed to `<out>/resolved_config.json`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use segloop_core::checkpoint;
use segloop_core::clinician::{Decision, SessionView, SimulatedClinician, Strategy};
use segloop_core::codec::mask_to_png;
use segloop_core::data::{self, generate_synthetic, load_dataset, Dataset, SynthConfig};
use segloop_core::engine::{derive_seed, read_journal, replay};
use segloop_core::eval::{
    evaluate_interactive, export_space_stats, median, run_ablation, run_strategy_comparison, EvalConfig,
};
use segloop_core::parallel::{set_execution, Execution};
use segloop_core::train::{train, JsonLinesSink, TrainConfig};
use segloop_core::{AnnotatedCase, Model, ModelConfig, Rle, Session, SessionConfig, SessionMode, SessionStatus};
use segloop_service::ServiceConfig;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint";

#[derive(Debug, Parser)]
#[command(name = "segloop", version, about = "Interactive segmentation with an adaptive sampling space")]
pub struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON settings for the subcommand; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH", env = "MEDUHIP_CKPT")]
    checkpoint: Option<PathBuf>,
    /// Run data-parallel work on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic multi-annotator dataset.
    Synth,
    /// Train a model (both phases) and write `<out>/checkpoint`.
    Train {
        /// Dataset manifest or its directory.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run simulated-clinician sessions on the test split; Dice trajectories and NoC.
    Eval {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        mode: Option<SessionMode>,
        /// Annotators fused into the ground truth.
        #[arg(long)]
        fusion_size: Option<usize>,
        /// NoC Dice threshold; repeatable. Without one, the frozen median Dice after 3 interactions is used.
        #[arg(long = "threshold")]
        thresholds: Vec<f64>,
    },
    /// Mean Dice after 3 interactions per strategy and fusion size.
    Compare {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Repeatable; all strategies when absent.
        #[arg(long = "strategy")]
        strategies: Vec<Strategy>,
    },
    /// Dice with each combination of online updates switched on.
    Ablate {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<Strategy>,
    },
    /// Draws from each clinician's final sampling space and its divergence from the initial one.
    SpaceStats {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        mode: Option<SessionMode>,
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Replay a session journal and write the final mask.
    Replay {
        #[arg(long, value_name = "PATH")]
        journal: PathBuf,
    },
    /// Start the HTTP session service.
    Serve {
        #[arg(long, env = "MEDUHIP_ADDR")]
        addr: Option<SocketAddr>,
        #[arg(long, value_name = "DIR")]
        journal_dir: Option<PathBuf>,
        /// Static annotator UI served under /ui.
        #[arg(long, value_name = "DIR")]
        ui_dir: Option<PathBuf>,
        /// Dataset whose cases sessions can open by id.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

/// A mistake in the invocation rather than a failure while running.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}\n\n{}", Cli::command().render_usage());
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    if g.sequential {
        set_execution(Execution::Sequential);
    }
    let file = match &g.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{} is not valid JSON: {e}", path.display())))?
        }
        None => Value::Object(Map::new()),
    };
    let mut flags = Overrides::default();
    flags.set("checkpoint", g.checkpoint.as_ref());
    match cli.command {
        Command::Synth => synth(g, &file),
        Command::Train { dataset } => {
            let mut flags = Overrides::default();
            flags.set("dataset", dataset);
            flags.set("train.seed", g.seed);
            flags.set("model.init_seed", g.seed);
            run_train(g, resolve(&file, flags)?)
        }
        Command::Eval { dataset, strategy, mode, fusion_size, thresholds } => {
            flags.set("dataset", dataset);
            flags.set("strategy", strategy);
            flags.set("mode", mode);
            flags.set("fusion_size", fusion_size);
            flags.set("thresholds", (!thresholds.is_empty()).then_some(thresholds));
            flags.set("seed", g.seed);
            run_eval(g, resolve(&file, flags)?)
        }
        Command::Compare { dataset, strategies } => {
            flags.set("dataset", dataset);
            flags.set("strategies", (!strategies.is_empty()).then_some(strategies));
            flags.set("seed", g.seed);
            run_compare(g, resolve(&file, flags)?)
        }
        Command::Ablate { dataset, strategy } => {
            flags.set("dataset", dataset);
            flags.set("strategy", strategy);
            flags.set("seed", g.seed);
            run_ablate(g, resolve(&file, flags)?)
        }
        Command::SpaceStats { dataset, strategy, mode, draws } => {
            flags.set("dataset", dataset);
            flags.set("strategy", strategy);
            flags.set("mode", mode);
            flags.set("draws", draws);
            flags.set("seed", g.seed);
            run_space_stats(g, resolve(&file, flags)?)
        }
        Command::Replay { journal } => {
            flags.set("journal", Some(journal));
            run_replay(g, resolve(&file, flags)?)
        }
        Command::Serve { addr, journal_dir, ui_dir, dataset } => {
            flags.set("addr", addr);
            flags.set("journal_dir", journal_dir.or_else(|| g.out.as_ref().map(|o| o.join("journals"))));
            flags.set("ui_dir", ui_dir);
            flags.set("dataset", dataset);
            flags.set("session.seed", g.seed);
            run_serve(g, resolve(&file, flags)?)
        }
    }
}

// ----- settings layering ------------------------------------------------------

/// Flag values to lay over the file, keyed by dotted path.
#[derive(Default)]
struct Overrides(Vec<(&'static str, Value)>);

impl Overrides {
    fn set<T: Serialize>(&mut self, path: &'static str, value: Option<T>) {
        if let Some(v) = value {
            self.0.push((path, serde_json::to_value(v).expect("flag values serialise")));
        }
    }
}

/// Lays `over` onto `base`. Keys absent from a non-empty object in `base` are rejected.
fn merge(base: &mut Value, over: Value, at: &str) -> anyhow::Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let open = b.is_empty();
            for (k, v) in o {
                let here = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None if open => {
                        b.insert(k, v);
                    }
                    None => return Err(usage(format!("unknown setting {here:?}"))),
                }
            }
        }
        (slot, v) => *slot = v,
    }
    Ok(())
}

fn resolve<T: Default + Serialize + DeserializeOwned>(file: &Value, flags: Overrides) -> anyhow::Result<T> {
    let mut v = serde_json::to_value(T::default())?;
    merge(&mut v, file.clone(), "")?;
    for (path, value) in flags.0 {
        let mut slot = &mut v;
        for key in path.split('.') {
            let map = slot.as_object_mut().ok_or_else(|| anyhow!("internal: {path} does not name a setting"))?;
            slot = map.entry(key).or_insert(Value::Null);
        }
        *slot = value;
    }
    serde_json::from_value(v).map_err(|e| usage(format!("bad settings: {e}")))
}

fn out_dir(g: &Global) -> anyhow::Result<&Path> {
    let out = g.out.as_deref().ok_or_else(|| usage("--out <DIR> is required"))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn echo<T: Serialize>(out: &Path, settings: &T) -> anyhow::Result<()> {
    fs::write(out.join(RESOLVED_CONFIG), serde_json::to_string_pretty(settings)? + "\n")?;
    Ok(())
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn need<'a>(v: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    v.as_deref().ok_or_else(|| usage(format!("{flag} is required (flag or config file)")))
}

/// A dataset directory stands for its manifest.
fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(data::MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn open_dataset(path: &Option<PathBuf>) -> anyhow::Result<Dataset> {
    let manifest = manifest_path(need(path, "--dataset")?);
    load_dataset(&manifest).with_context(|| format!("loading dataset {}", manifest.display()))
}

fn open_model(path: &Option<PathBuf>) -> anyhow::Result<(Arc<Model>, String)> {
    let path = need(path, "--checkpoint")?;
    let (model, sha) = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    log::info!("checkpoint {} sha256 {sha}", path.display());
    Ok((Arc::new(model), sha))
}

/// Session settings for `model`, with `overrides` applied by name.
fn session_config(model: &Model, overrides: &Map<String, Value>) -> anyhow::Result<SessionConfig> {
    let mut v = serde_json::to_value(SessionConfig::for_model(model))?;
    merge(&mut v, Value::Object(overrides.clone()), "session")?;
    let cfg: SessionConfig = serde_json::from_value(v).map_err(|e| usage(format!("bad session settings: {e}")))?;
    cfg.validate(model).map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn limited(cases: Vec<&AnnotatedCase>, max: Option<usize>) -> Vec<&AnnotatedCase> {
    cases.into_iter().take(max.unwrap_or(usize::MAX)).collect()
}

// ----- subcommands ----------------------------------------------------------------

fn synth(g: &Global, file: &Value) -> anyhow::Result<()> {
    let mut flags = Overrides::default();
    flags.set("seed", g.seed);
    let cfg: SynthConfig = resolve(file, flags)?;
    let out = out_dir(g)?;
    echo(out, &cfg)?;
    let manifest = generate_synthetic(&cfg, out)?;
    log::info!("{} cases written to {}", manifest.entries.len(), out.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct TrainSettings {
    dataset: Option<PathBuf>,
    model: ModelConfig,
    train: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { dataset: None, model: ModelConfig::compact(), train: TrainConfig::default() }
    }
}

fn run_train(g: &Global, s: TrainSettings) -> anyhow::Result<()> {
    let dataset = open_dataset(&s.dataset)?;
    s.model.validate().map_err(|e| usage(e.to_string()))?;
    s.train.validate().map_err(|e| usage(e.to_string()))?;
    let out = out_dir(g)?;
    echo(out, &s)?;
    let model = Model::init(s.model.clone())?;
    log::info!("{} parameters, {} training cases", model.parameter_count(), dataset.train().len());
    let mut log_file = BufWriter::new(File::create(out.join("loss.jsonl"))?);
    let result = train(model, &dataset.train(), &s.train, &mut JsonLinesSink(&mut log_file));
    log_file.flush()?;
    let ckpt = out.join(CHECKPOINT_FILE);
    match result {
        Ok((model, report)) => {
            let sha = checkpoint::save(&model, &ckpt)?;
            write(out.join("train_report.json"), serde_json::to_string_pretty(&report)?)?;
            log::info!("checkpoint {} sha256 {sha}", ckpt.display());
            Ok(())
        }
        Err(d) => {
            checkpoint::save(&d.last_good, &ckpt)?;
            Err(anyhow!("training diverged ({}); last good parameters saved to {}", d.error, ckpt.display()))
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct EvalSettings {
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    strategy: Strategy,
    mode: SessionMode,
    fusion_size: usize,
    interactions: usize,
    /// Empty: the frozen median Dice after 3 interactions.
    thresholds: Vec<f64>,
    /// Overrides of individual session settings.
    session: Map<String, Value>,
    max_cases: Option<usize>,
    seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            dataset: None,
            checkpoint: None,
            strategy: Strategy::LastWrong,
            mode: SessionMode::Adaptive,
            fusion_size: 1,
            interactions: 6,
            thresholds: Vec::new(),
            session: Map::new(),
            max_cases: None,
            seed: 0,
        }
    }
}

fn run_eval(g: &Global, s: EvalSettings) -> anyhow::Result<()> {
    let (model, sha) = open_model(&s.checkpoint)?;
    let dataset = open_dataset(&s.dataset)?;
    let cases = limited(dataset.test(), s.max_cases);
    let mut cfg = EvalConfig::new(s.strategy, s.mode, session_config(&model, &s.session)?);
    cfg.fusion_size = s.fusion_size;
    cfg.interactions = s.interactions;
    cfg.seed = s.seed;
    cfg.thresholds = s.thresholds.clone();
    let out = out_dir(g)?;
    if cfg.thresholds.is_empty() {
        let frozen = EvalConfig { mode: SessionMode::Frozen, interactions: cfg.interactions.max(3), ..cfg.clone() };
        let report = evaluate_interactive(&model, &cases, &frozen)?;
        let t = median(&report.trajectories.iter().map(|t| t.after(3)).collect::<Vec<_>>());
        log::info!("NoC threshold from the frozen baseline: {t:.4}");
        cfg.thresholds = vec![t];
    }
    echo(out, &json!({ "settings": s, "resolved_thresholds": cfg.thresholds, "checkpoint_sha256": sha }))?;
    let report = evaluate_interactive(&model, &cases, &cfg)?;
    let mut csv = String::from("case_id");
    for k in 0..report.mean_dice.len() {
        csv.push_str(&format!(",dice_{k}"));
    }
    csv.push('\n');
    for t in &report.trajectories {
        csv.push_str(&t.case_id);
        for d in &t.dice {
            csv.push_str(&format!(",{d:.6}"));
        }
        csv.push('\n');
    }
    write(out.join("dice.csv"), csv)?;
    write(out.join("eval_report.json"), serde_json::to_string_pretty(&report)?)?;
    for (t, nocs) in &report.noc {
        let v: Vec<f64> = nocs.iter().map(|&n| f64::from(n)).collect();
        log::info!("NoC@{t}: median {}", median(&v));
    }
    log::info!("mean Dice by iteration: {:?}", report.mean_dice);
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct CompareSettings {
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    strategies: Vec<Strategy>,
    modes: Vec<SessionMode>,
    interactions: usize,
    session: Map<String, Value>,
    max_cases: Option<usize>,
    seed: u64,
}

impl Default for CompareSettings {
    fn default() -> Self {
        Self {
            dataset: None,
            checkpoint: None,
            strategies: Strategy::ALL.to_vec(),
            modes: vec![SessionMode::Adaptive, SessionMode::Frozen],
            interactions: 3,
            session: Map::new(),
            max_cases: None,
            seed: 0,
        }
    }
}

fn mode_name(mode: SessionMode) -> &'static str {
    match mode {
        SessionMode::Adaptive => "adaptive",
        SessionMode::Frozen => "frozen",
    }
}

fn run_compare(g: &Global, s: CompareSettings) -> anyhow::Result<()> {
    let (model, sha) = open_model(&s.checkpoint)?;
    let dataset = open_dataset(&s.dataset)?;
    let cases = limited(dataset.test(), s.max_cases);
    let session = session_config(&model, &s.session)?;
    let out = out_dir(g)?;
    echo(out, &json!({ "settings": s, "checkpoint_sha256": sha }))?;
    for &mode in &s.modes {
        let mut base = EvalConfig::new(Strategy::LastWrong, mode, session.clone());
        base.interactions = s.interactions;
        base.seed = s.seed;
        let table = run_strategy_comparison(&model, &cases, &s.strategies, &base)?;
        write(out.join(format!("compare_{}.csv", mode_name(mode))), table.to_csv())?;
        write(out.join(format!("compare_{}.json", mode_name(mode))), serde_json::to_string_pretty(&table)?)?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct AblateSettings {
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    strategy: Strategy,
    interactions: usize,
    session: Map<String, Value>,
    max_cases: Option<usize>,
    seed: u64,
}

impl Default for AblateSettings {
    fn default() -> Self {
        Self {
            dataset: None,
            checkpoint: None,
            strategy: Strategy::LastWrong,
            interactions: 3,
            session: Map::new(),
            max_cases: None,
            seed: 0,
        }
    }
}

fn run_ablate(g: &Global, s: AblateSettings) -> anyhow::Result<()> {
    let (model, sha) = open_model(&s.checkpoint)?;
    let dataset = open_dataset(&s.dataset)?;
    let cases = limited(dataset.test(), s.max_cases);
    let mut base = EvalConfig::new(s.strategy, SessionMode::Adaptive, session_config(&model, &s.session)?);
    base.interactions = s.interactions;
    base.seed = s.seed;
    let out = out_dir(g)?;
    echo(out, &json!({ "settings": s, "checkpoint_sha256": sha }))?;
    let table = run_ablation(&model, &cases, &base)?;
    write(out.join("ablation.csv"), table.to_csv())?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct SpaceStatsSettings {
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    strategy: Strategy,
    mode: SessionMode,
    /// Test cases to run; every annotator of each case becomes one clinician.
    cases: usize,
    draws: usize,
    session: Map<String, Value>,
    seed: u64,
}

impl Default for SpaceStatsSettings {
    fn default() -> Self {
        Self {
            dataset: None,
            checkpoint: None,
            strategy: Strategy::LastWrong,
            mode: SessionMode::Adaptive,
            cases: 5,
            draws: 4000,
            session: Map::new(),
            seed: 0,
        }
    }
}

fn run_space_stats(g: &Global, s: SpaceStatsSettings) -> anyhow::Result<()> {
    let (model, sha) = open_model(&s.checkpoint)?;
    let dataset = open_dataset(&s.dataset)?;
    let base = session_config(&model, &s.session)?;
    let out = out_dir(g)?;
    echo(out, &json!({ "settings": s, "checkpoint_sha256": sha }))?;
    let mut sessions = Vec::new();
    for (i, case) in dataset.test().into_iter().take(s.cases).enumerate() {
        for (a, (id, mask)) in case.annotator_ids().iter().zip(case.annotations()).enumerate() {
            let label = format!("{}:{id}", case.case_id());
            let cfg = SessionConfig { seed: derive_seed(s.seed, i as u64, a as u64), ..base.clone() };
            let mut session = Session::create(label.clone(), Arc::clone(&model), case.image().clone(), cfg, s.mode)?;
            let clinician = SimulatedClinician::new(s.strategy, mask.clone(), id.as_str(), derive_seed(s.seed, 0xC1, i as u64));
            while let Some(view) = SessionView::of(&session) {
                match clinician.next_event(&view)? {
                    Decision::Event(ev) => {
                        session.apply_selection(ev)?;
                    }
                    Decision::Done => break,
                }
            }
            sessions.push((label, session));
        }
    }
    if sessions.is_empty() {
        return Err(anyhow!("the test split is empty"));
    }
    let refs: Vec<(&str, &Session)> = sessions.iter().map(|(l, s)| (l.as_str(), s)).collect();
    let stats = export_space_stats(&refs, s.draws, s.seed)?;
    write(out.join("space_draws.csv"), stats.draws_csv())?;
    write(out.join("space_kl.csv"), stats.kl_csv())?;
    Ok(())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct ReplaySettings {
    journal: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
}

fn run_replay(g: &Global, s: ReplaySettings) -> anyhow::Result<()> {
    let (model, sha) = open_model(&s.checkpoint)?;
    let path = need(&s.journal, "--journal")?;
    let records = read_journal(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))?;
    if let Some(segloop_core::engine::JournalRecord::Header { checkpoint_sha256: Some(theirs), .. }) = records.first() {
        if *theirs != sha {
            log::warn!("journal was recorded against checkpoint {theirs}, replaying with {sha}");
        }
    }
    let mut session = replay(model, &records)?;
    let mask = match session.status() {
        SessionStatus::Expired => session.last_soft().ok_or_else(|| anyhow!("journal has no prediction"))?.binarized().clone(),
        _ => session.accept()?,
    };
    let out = out_dir(g)?;
    echo(out, &json!({ "settings": s, "checkpoint_sha256": sha }))?;
    write(out.join("mask.png"), mask_to_png(&mask)?)?;
    write(out.join("mask.rle.json"), serde_json::to_string(&Rle::encode(&mask))? + "\n")?;
    log::info!("session {} replayed through iteration {}", session.id(), session.iteration());
    Ok(())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct ServeSettings {
    checkpoint: Option<PathBuf>,
    #[serde(flatten)]
    service: ServiceConfig,
}

fn run_serve(g: &Global, mut s: ServeSettings) -> anyhow::Result<()> {
    s.service.dataset = s.service.dataset.as_deref().map(manifest_path);
    let ckpt = need(&s.checkpoint, "--checkpoint")?.to_path_buf();
    match &g.out {
        Some(_) => echo(out_dir(g)?, &s)?,
        None => log::info!("resolved settings: {}", serde_json::to_string(&s)?),
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(segloop_service::serve(&ckpt, s.service))
}
