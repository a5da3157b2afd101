//! Command-line entry points: `synth`, `train`, `eval`, `ablate`, `selftest`.
//!
//! Exit codes: 0 on success, 1 when a verification check or a run fails,
//! 2 for usage and configuration errors.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::datagen::{dataset_digest, load_dataset, save_dataset, synth_domains, DomainDataset, SynthSpec};
use crate::error::{Error, Result};
use crate::metalearn::{load_checkpoint, save_checkpoint, train_until, Checkpoint, MetaConfig, StepStats, TrainState};
use crate::metrics::{attention_maps, pgm};
use crate::nets::{NetConfig, Network};
use crate::protocol::{evaluate, leave_one_out, run_ablation, AblationPlan, VALIDATION_FRACTION};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const DEFAULT_CHECKPOINT_EVERY: u64 = 500;

#[derive(Debug, Parser)]
#[command(name = "metadg", version, about = "Meta-learned domain generalization for real-vs-attack classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain dataset.
    Synth {
        /// Dataset spec JSON; the built-in four-domain spec when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on every domain except the configured leave-out domain.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from this checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score one domain with a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config naming the dataset.
        #[arg(long)]
        config: PathBuf,
        /// Domain to score; the config's leave-out domain when omitted.
        #[arg(long)]
        domain: Option<String>,
        /// Defaults to `<checkpoint>/eval-<domain>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write one attention map per sample.
        #[arg(long)]
        attention: bool,
    },
    /// Compare every training variant across seeds and leave-out domains.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Run the numerical self-checks.
    Selftest {
        /// Write the report as JSON here as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A complete, reproducible run description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub meta: MetaConfig,
    /// Directory written by `synth`. Exactly one of `dataset` and `synth` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Generate the data in memory instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Domain withheld from training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leave_out: Option<String>,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub ablation: AblationPlan,
}

fn default_checkpoint_every() -> u64 {
    DEFAULT_CHECKPOINT_EVERY
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.meta.validate()?;
        match (&self.dataset, &self.synth) {
            (Some(_), None) => {}
            (None, Some(spec)) => spec.validate()?,
            _ => return Err(Error::Config("set exactly one of `dataset` and `synth`".into())),
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    /// Loads or generates the domains, adapted to the network's input.
    pub fn domains(&self) -> Result<Vec<DomainDataset>> {
        let raw = match (&self.dataset, &self.synth) {
            (Some(dir), _) => load_dataset(dir)?,
            (None, Some(spec)) => synth_domains(spec)?,
            (None, None) => return Err(Error::Config("no dataset configured".into())),
        };
        fit_to_net(raw, &self.net)
    }

    pub fn leave_out(&self) -> Result<&str> {
        self.leave_out.as_deref().ok_or_else(|| Error::Config("`leave_out` is required".into()))
    }
}

/// Checks every domain against the network's input and depth-map shapes,
/// adding HSV channels when the network expects six.
pub fn fit_to_net(domains: Vec<DomainDataset>, net: &NetConfig) -> Result<Vec<DomainDataset>> {
    let [c, h, w] = net.input_shape;
    domains
        .into_iter()
        .map(|d| {
            let [dc, dh, dw] = d.image_shape;
            let d = if (dc, c) == (3, 6) && (dh, dw) == (h, w) { d.with_hsv()? } else { d };
            if d.image_shape != net.input_shape || d.depth_shape != net.depth_map_size() {
                return Err(Error::Config(format!(
                    "{:?} preset expects input {:?} and depth {:?}; domain `{}` has {:?} and {:?}",
                    net.preset,
                    net.input_shape,
                    net.depth_map_size(),
                    d.name(),
                    d.image_shape,
                    d.depth_shape
                )));
            }
            Ok(d)
        })
        .collect()
}

/// What a successful command concluded.
#[derive(Debug, PartialEq)]
pub enum Outcome {
    Done,
    ChecksFailed(Vec<String>),
}

pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(Outcome::Done) => EXIT_OK,
        Ok(Outcome::ChecksFailed(_)) => EXIT_FAILURE,
        Err(Error::Config(_) | Error::Json { .. } | Error::Io { .. } | Error::Format { .. }) => EXIT_USAGE,
        Err(_) => EXIT_FAILURE,
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = run(cli.command);
    match &result {
        Err(e) => eprintln!("error: {e}"),
        Ok(Outcome::ChecksFailed(names)) => eprintln!("failed checks: {}", names.join(", ")),
        Ok(Outcome::Done) => {}
    }
    exit_code(&result)
}

pub fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::Synth { config, out } => synth(config.as_deref(), &out),
        Command::Train { config, out, checkpoint } => {
            let mut cfg = RunConfig::load(&config)?;
            if out.is_some() {
                cfg.out = out;
            }
            train(&cfg, checkpoint.as_deref()).map(|_| Outcome::Done)
        }
        Command::Eval { checkpoint, config, domain, out, attention } => {
            let cfg = RunConfig::load(&config)?;
            eval(&cfg, &checkpoint, domain.as_deref(), out.as_deref(), attention)
        }
        Command::Ablate { config, out, seeds } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(n) = seeds {
                cfg.ablation.seeds = n;
            }
            if out.is_some() {
                cfg.out = out;
            }
            ablate(&cfg)
        }
        Command::Selftest { out } => selftest(out.as_deref()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.into(), source: e })?;
    write_file(path, text + "\n")
}

pub fn synth(config: Option<&Path>, out: &Path) -> Result<Outcome> {
    let spec = match config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<SynthSpec>(&text).map_err(|e| Error::Json { path: path.into(), source: e })?
        }
        None => SynthSpec::default(),
    };
    let domains = synth_domains(&spec)?;
    save_dataset(&domains, out)?;
    for d in &domains {
        println!(
            "{:<10} real {:>4}  attack {:>4}  input {:?}  depth {:?}  seed {}",
            d.name(),
            d.count(1),
            d.count(0),
            d.image_shape,
            d.depth_shape,
            d.spec.seed
        );
    }
    println!("sha256 {}", dataset_digest(&domains));
    Ok(Outcome::Done)
}

pub const LOSS_HISTORY_HEADER: &str = "iter,objective,cls_objective,depth_objective,inner_updates,val_index";

fn history_row(s: &StepStats) -> String {
    format!(
        "{},{:.17e},{:.17e},{:.17e},{},{}",
        s.iter, s.objective, s.cls_objective, s.depth_objective, s.inner_updates, s.val_index
    )
}

/// Checkpoint directory for iteration `iter` under `out`.
pub fn checkpoint_dir(out: &Path, iter: u64) -> PathBuf {
    out.join("checkpoints").join(format!("iter_{iter:06}"))
}

/// Trains, checkpointing every `checkpoint_every` iterations and at the end
/// (`<out>/checkpoint`), then scores the leave-out domain into `<out>`.
/// Returns the final state.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainState> {
    let out = cfg.out.clone().ok_or_else(|| Error::Config("no output directory (`out` or --out)".into()))?;
    let domains = cfg.domains()?;
    let split = leave_one_out(&domains, cfg.leave_out()?)?;
    let net = Network::new(cfg.net.clone())?;
    create_dir(&out)?;
    write_json(&out.join("config.json"), cfg)?;

    let mut state = match resume {
        Some(dir) => {
            let ckpt = load_checkpoint(dir)?;
            let same_meta = MetaConfig { iters: cfg.meta.iters, ..ckpt.meta.clone() } == cfg.meta;
            if ckpt.net != cfg.net || !same_meta {
                return Err(Error::Config(format!(
                    "checkpoint {} was written by a different configuration",
                    dir.display()
                )));
            }
            ckpt.state
        }
        None => TrainState::new(&net, &cfg.meta),
    };

    let history_path = out.join("loss_history.csv");
    let mut history = if resume.is_some() && history_path.exists() {
        OpenOptions::new().append(true).open(&history_path).map_err(|e| Error::io(&history_path, e))?
    } else {
        let mut f = File::create(&history_path).map_err(|e| Error::io(&history_path, e))?;
        writeln!(f, "{LOSS_HISTORY_HEADER}").map_err(|e| Error::io(&history_path, e))?;
        f
    };

    let save = |state: &TrainState, dir: &Path| {
        save_checkpoint(&Checkpoint { net: cfg.net.clone(), meta: cfg.meta.clone(), state: state.clone() }, dir)
    };
    let start = Instant::now();
    let log_every = cfg.checkpoint_every.min(100);
    train_until(&net, &mut state, &split.train, &cfg.meta, |state, stats| {
        writeln!(history, "{}", history_row(stats)).map_err(|e| Error::io(&history_path, e))?;
        if stats.iter % log_every == 0 {
            eprintln!(
                "iter {:>6}  objective {:.5}  cls {:.5}  depth {:.5}  {:.1}s",
                stats.iter,
                stats.objective,
                stats.cls_objective,
                stats.depth_objective,
                start.elapsed().as_secs_f64()
            );
        }
        if stats.iter % cfg.checkpoint_every == 0 {
            save(state, &checkpoint_dir(&out, stats.iter))?;
        }
        Ok(())
    })?;
    save(&state, &out.join("checkpoint"))?;

    let report = evaluate(&net, &state.params, &split.validation, &split.target)?;
    report.write(&out)?;
    println!(
        "{}: hter {:.4} (oracle {:.4})  auc {:.4}",
        split.target.name(),
        report.hter,
        report.hter_oracle,
        report.auc
    );
    Ok(state)
}

/// Scores `domain` (default: the leave-out domain) with the checkpoint at
/// `ckpt_dir`. The threshold comes from the validation tails of every other
/// domain.
pub fn eval(
    cfg: &RunConfig,
    ckpt_dir: &Path,
    domain: Option<&str>,
    out: Option<&Path>,
    attention: bool,
) -> Result<Outcome> {
    let ckpt = load_checkpoint(ckpt_dir)?;
    let net = Network::new(ckpt.net.clone())?;
    let raw = RunConfig { net: ckpt.net.clone(), ..cfg.clone() };
    let domains = raw.domains()?;
    let name = match domain {
        Some(d) => d,
        None => cfg.leave_out()?,
    };
    let split = leave_one_out(&domains, name)?;
    let report = evaluate(&net, &ckpt.state.params, &split.validation, &split.target)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| ckpt_dir.join(format!("eval-{name}")));
    report.write(&out)?;
    println!(
        "{name}: hter {:.4} (oracle {:.4})  auc {:.4}  threshold {:.4}",
        report.hter, report.hter_oracle, report.auc, report.eer_threshold
    );

    if attention {
        let dir = out.join("attention");
        create_dir(&dir)?;
        let batch = split.target.full_batch()?;
        let maps = attention_maps(&net, &ckpt.state.params, &batch.x)?;
        for (i, (map, s)) in maps.iter().zip(&split.target.samples).enumerate() {
            let kind = if s.y == 1 { "real" } else { "attack" };
            write_file(&dir.join(format!("{i:04}_{kind}.pgm")), pgm(map)?)?;
        }
        println!("wrote {} attention maps to {}", maps.len(), dir.display());
    }
    Ok(Outcome::Done)
}

pub fn ablate(cfg: &RunConfig) -> Result<Outcome> {
    let domains = cfg.domains()?;
    let mut plan = cfg.ablation.clone();
    if plan.leave_out.is_empty() {
        if let Some(d) = &cfg.leave_out {
            plan.leave_out.push(d.clone());
        }
    }
    let result = run_ablation(&cfg.net, &cfg.meta, &domains, &plan, |c| {
        eprintln!("{:<12} {:<10} seed {:>3}  hter {:.4}  auc {:.4}", c.variant, c.leave_out, c.seed, c.hter, c.auc);
    })?;
    let csv = result.to_csv();
    print!("{csv}");
    println!("dataset sha256 {}", result.dataset_sha256);
    println!("thresholds from the last {:.0}% of each source class", VALIDATION_FRACTION * 100.0);
    if let Some(out) = &cfg.out {
        create_dir(out)?;
        write_file(&out.join("ablation.csv"), csv)?;
        write_json(&out.join("ablation.json"), &result)?;
        write_json(&out.join("config.json"), cfg)?;
    }
    Ok(Outcome::Done)
}

pub fn selftest(out: Option<&Path>) -> Result<Outcome> {
    let start = Instant::now();
    let checks = verify::run_all()?;
    for c in &checks {
        println!("{c}");
    }
    let failed: Vec<String> = checks.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect();
    println!("{} checks, {} failed, {:.1}s", checks.len(), failed.len(), start.elapsed().as_secs_f64());
    if let Some(path) = out {
        write_json(path, &checks)?;
    }
    Ok(if failed.is_empty() { Outcome::Done } else { Outcome::ChecksFailed(failed) })
}
