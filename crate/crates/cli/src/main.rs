//! `emoe`: fixture generation, training, evaluation, tracking and
//! visualization.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure, 1 anything else.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emoe_core::checkpoint;
use emoe_core::config::RunConfig;
use emoe_core::eventrep::{generate_fixture, load_sample, CropSettings, Dataset, FixtureOptions, MANIFEST_FILE};
use emoe_core::objective::lr_at_epoch;
use emoe_core::trackloop::{evaluate_dataset, track_sequence, train, write_results};
use emoe_core::viz::visualize;
use emoe_core::{Error, Tracker};

const CHECKPOINT_FILE: &str = "checkpoint.emoe";
const LOSS_LOG_FILE: &str = "loss.jsonl";
const CONFIG_FILE: &str = "config.toml";
const METRICS_FILE: &str = "metrics.txt";

#[derive(Parser)]
#[command(name = "emoe", version, about = "RGB + event single-object tracker with eMoE prompt tuning")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic RGB + event fixture.
    Fixture(FixtureArgs),
    /// Train the trainable groups and write a checkpoint and loss log.
    Train(TrainArgs),
    /// Track every sequence and report SR / PR / NPR.
    Eval(EvalArgs),
    /// Track one sequence and print per-frame boxes.
    Track(TrackArgs),
    /// Export attention, score and expert maps for one sample.
    Viz(VizArgs),
}

#[derive(Args)]
struct FixtureArgs {
    /// Defaults to 0 (or EMOE_SEED when set).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 8)]
    sequences: usize,
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long, default_value_t = 160)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing fixture.
    #[arg(long)]
    force: bool,
}

/// Options that override the config file.
#[derive(Args, Clone, Default)]
struct ModelOverrides {
    /// TOML run configuration; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of experts K (labels keep their first K attributes).
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    insert_interval: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Decode from CRM-fused search tokens instead of the mean of modalities.
    #[arg(long)]
    crm_feeds_head: bool,
    #[arg(long)]
    header_unfrozen: bool,
    /// Disable the eMoE blocks.
    #[arg(long)]
    no_emoe: bool,
    /// Disable the CRM branch.
    #[arg(long)]
    no_crm: bool,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    o: ModelOverrides,
    /// Fixture directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, loss log and config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Add per-attribute sub-reports.
    #[arg(long)]
    per_attribute: bool,
    /// Directory for per-sequence results files.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Expected number of experts; fails if the checkpoint differs.
    #[arg(long)]
    experts: Option<usize>,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    sequence: String,
    /// Results file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    sequence: String,
    #[arg(long, default_value_t = 1)]
    frame: usize,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::ConfigMismatch(_) => 2,
        Error::Data(_) | Error::AlreadyExists(_) | Error::Image { .. } | Error::Checkpoint(_) | Error::Shape(_) => 3,
        Error::Io { .. } => 3,
        Error::NonFinite { .. } => 4,
        Error::State(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Command::Fixture(a) => cmd_fixture(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Track(a) => cmd_track(a),
        Command::Viz(a) => cmd_viz(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn env_seed() -> Result<Option<u64>, Error> {
    let mut c = RunConfig::default();
    match std::env::var_os("EMOE_SEED") {
        Some(_) => {
            c.apply_env()?;
            Ok(Some(c.seed))
        }
        None => Ok(None),
    }
}

fn cmd_fixture(a: FixtureArgs) -> Result<(), Error> {
    let seed = a.seed.or(env_seed()?).unwrap_or(0);
    let opts = FixtureOptions {
        seed,
        num_sequences: a.sequences,
        frames_per_seq: a.frames,
        image_size: a.size,
        force: a.force,
    };
    let m = generate_fixture(&a.out, &opts)?;
    println!("{} ({} sequences)", a.out.join(MANIFEST_FILE).display(), m.sequences.len());
    Ok(())
}

/// Defaults, then the config file, then `EMOE_SEED`, then flags.
fn resolve_config(o: &ModelOverrides) -> Result<RunConfig, Error> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(k) = o.experts {
        cfg.emoe.num_experts = k;
    }
    if let Some(i) = o.insert_interval {
        cfg.emoe.insert_interval = i;
    }
    if let Some(t) = o.tau {
        cfg.crm.tau = t;
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = o.steps_per_epoch {
        cfg.train.steps_per_epoch = s;
    }
    if let Some(lr) = o.lr {
        cfg.optim.lr = lr;
    }
    cfg.crm.feeds_head |= o.crm_feeds_head;
    cfg.model.header_unfrozen |= o.header_unfrozen;
    if o.no_emoe {
        cfg.model.use_emoe = false;
    }
    if o.no_crm {
        cfg.model.use_crm = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_fixture(dir: &Path) -> Result<(), Error> {
    if dir.join(MANIFEST_FILE).is_file() {
        Ok(())
    } else {
        Err(Error::Data(format!("no fixture at {} (missing {MANIFEST_FILE})", dir.display())))
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn cmd_train(a: TrainArgs) -> Result<(), Error> {
    let cfg = resolve_config(&a.o)?;
    require_fixture(&a.data)?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    if ckpt.exists() && !a.force {
        return Err(Error::AlreadyExists(ckpt));
    }
    let mut tracker = Tracker::new(cfg.clone())?;
    let data = Dataset::open(&a.data, cfg.emoe.num_experts)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Data(format!("cannot create {}: {e}", a.out.display())))?;
    write_file(&a.out.join(CONFIG_FILE), &cfg.to_toml_string())?;
    let log_path = a.out.join(LOSS_LOG_FILE);
    let f = fs::File::create(&log_path).map_err(|e| Error::Data(format!("cannot create {}: {e}", log_path.display())))?;
    let mut log = BufWriter::new(f);
    let spe = cfg.train.steps_per_epoch;
    let mut log_err = None;
    let report = train(&mut tracker, &data, |step, l| {
        let epoch = (step - 1) / spe + 1;
        let mut rec = serde_json::json!({
            "step": step,
            "epoch": epoch,
            "lr": lr_at_epoch(&cfg.optim, epoch, cfg.train.epochs),
        });
        for (k, v) in l.components() {
            rec[format!("loss/{k}")] = serde_json::json!(v);
        }
        if let Err(e) = writeln!(log, "{rec}") {
            log_err.get_or_insert(e);
        }
        if step % spe == 0 {
            eprintln!("step {step}: loss {:.4}", l.total);
        }
    })?;
    log.flush().map_err(|e| Error::Data(format!("cannot write {}: {e}", log_path.display())))?;
    if let Some(e) = log_err {
        return Err(Error::Data(format!("cannot write {}: {e}", log_path.display())));
    }
    checkpoint::save(&ckpt, &tracker)?;
    if let Some((epoch, sr)) = report.best_epoch.and_then(|e| report.validation.iter().find(|v| v.0 == e)) {
        println!("best validation SR = {sr:.6} (epoch {epoch})");
    }
    println!("{}", ckpt.display());
    Ok(())
}

fn load_checkpoint(path: &Path, experts: Option<usize>) -> Result<Tracker, Error> {
    let t = checkpoint::load(path)?;
    if let Some(k) = experts {
        if k != t.cfg.emoe.num_experts {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {} experts but {k} were requested",
                t.cfg.emoe.num_experts
            )));
        }
    }
    Ok(t)
}

fn cmd_eval(a: EvalArgs) -> Result<(), Error> {
    let t = load_checkpoint(&a.checkpoint, a.experts)?;
    require_fixture(&a.data)?;
    let data = Dataset::open(&a.data, t.cfg.emoe.num_experts)?;
    let (results, report) = evaluate_dataset(&t, &data)?;
    if let Some(dir) = &a.results {
        write_results(dir, &results)?;
        write_file(&dir.join(METRICS_FILE), &report.to_text(a.per_attribute))?;
    }
    print!("{}", report.to_text(a.per_attribute));
    Ok(())
}

fn open_sequence(data: &Path, k: usize, name: &str) -> Result<emoe_core::eventrep::Sequence, Error> {
    require_fixture(data)?;
    let ds = Dataset::open(data, k)?;
    ds.sequences
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Data(format!("no sequence named {name}")))
}

fn cmd_track(a: TrackArgs) -> Result<(), Error> {
    let t = load_checkpoint(&a.checkpoint, None)?;
    let seq = open_sequence(&a.data, t.cfg.emoe.num_experts, &a.sequence)?;
    let r = track_sequence(&t, &seq)?;
    match &a.out {
        Some(p) => write_file(p, &r.to_text()),
        None => {
            print!("{}", r.to_text());
            Ok(())
        }
    }
}

fn cmd_viz(a: VizArgs) -> Result<(), Error> {
    let t = load_checkpoint(&a.checkpoint, None)?;
    let seq = open_sequence(&a.data, t.cfg.emoe.num_experts, &a.sequence)?;
    let crop = CropSettings::from_config(&t.cfg);
    let sample = load_sample(&seq, 0, a.frame, &crop, None)?;
    let out = visualize(&t, &sample, &a.out)?;
    for p in &out.images {
        println!("{}", p.display());
    }
    println!("{}", out.gating_file.display());
    Ok(())
}
