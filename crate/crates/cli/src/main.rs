//! `mres`: evaluation, training, data-engine runs, corpus statistics and
//! group-assignment export.
//!
//! Exit status is 0 on success, 1 on runtime failure and 2 on usage or
//! configuration errors.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mres_core::dataset::{
    compute_stats, default_data_root, load_benchmark, tokenize, BenchmarkSplit, SplitName, Vocabulary, WordVocab,
};
use mres_core::engine::{
    load_manifest, manifest_base, run_engine, serve, BackendRole, BackendSuite, BackendsConfig, EngineError,
    EngineSink,
};
use mres_core::eval::{evaluate, ModelPredictor, OraclePredictor, Predictor, PredictionsPredictor, SettingSelection};
use mres_core::model::{
    group_assignment, import_weights, load_checkpoint, GroupAssignment, GroupLevel, UniRes,
};
use mres_core::synthetic::{engine_fixture, fixture_set, toy_set};
use mres_core::training::{fit, prepare_examples, FitOptions, TrainConfig, TrainError, TrainMode, TrainState};

/// Usage or configuration problem; maps to exit status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_status(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            if matches!(e, TrainError::InvalidConfig(_) | TrainError::ConfigParse { .. }) {
                return 2;
            }
        }
        if let Some(e) = cause.downcast_ref::<EngineError>() {
            if matches!(e, EngineError::MissingBackend(_) | EngineError::Config(_)) {
                return 2;
            }
        }
    }
    1
}

#[derive(Parser)]
#[command(name = "mres", version, about = "Multi-granularity referring segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a model, a predictions file or the oracle on a benchmark split.
    Eval(EvalArgs),
    /// Train from a `key = value` config file.
    Train(TrainArgs),
    /// Run the grounding-data engine over an image manifest.
    Engine(EngineArgs),
    /// Corpus statistics for a split.
    Stats(StatsArgs),
    /// Export the patch-to-group assignment for one image.
    Groups(GroupsArgs),
    /// Write the synthetic fixtures used by the tests.
    #[command(hide = true)]
    Synth(SynthArgs),
    /// Serve one stub backend over the stdio line protocol.
    #[command(hide = true)]
    BackendServe(ServeArgs),
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Dataset root; defaults to $MRES_DATA_ROOT.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    split: String,
    /// object_only, part_only, object_and_part or all.
    #[arg(long, default_value = "all")]
    setting: String,
    /// Checkpoint file, predictions `.jsonl`, or `oracle`.
    #[arg(long)]
    checkpoint: String,
    #[arg(long, default_value_t = 0.35)]
    threshold: f32,
    /// JSON report path; the table goes next to it with a `.txt` extension.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset root; defaults to $MRES_DATA_ROOT.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Epoch checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Pretrain,
    Finetune,
}

#[derive(clap::Args)]
struct EngineArgs {
    /// JSON-lines manifest of images and object boxes.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    backends: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct StatsArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    split: String,
    /// Directory for `stats.json` and `part_categories.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct GroupsArgs {
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    checkpoint: Option<PathBuf>,
    /// Initialize untrained weights from a training config instead.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value = "low")]
    level: String,
    #[arg(long, default_value = "object")]
    expression: String,
    /// `.png` writes a colored grid; anything else writes CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Fixture,
    Toy,
    Engine,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ServeArgs {
    #[arg(long)]
    backends: PathBuf,
    #[arg(long)]
    role: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Eval(a) => cmd_eval(a),
        Command::Train(a) => cmd_train(a),
        Command::Engine(a) => cmd_engine(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Groups(a) => cmd_groups(a),
        Command::Synth(a) => cmd_synth(a),
        Command::BackendServe(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} `{}` not found", path.display())))
    }
}

fn data_root(flag: Option<PathBuf>) -> Result<PathBuf> {
    let root = flag
        .or_else(default_data_root)
        .ok_or_else(|| usage("no dataset given; pass --dataset or set MRES_DATA_ROOT"))?;
    if !root.is_dir() {
        return Err(usage(format!("dataset root `{}` is not a directory", root.display())));
    }
    Ok(root)
}

fn load_split(root: &Path, split: &str) -> Result<BenchmarkSplit> {
    let name: SplitName = split.parse().map_err(|e| usage(format!("{e}")))?;
    load_benchmark(root, name).with_context(|| format!("loading split `{split}` from {}", root.display()))
}

fn dataset_name(root: &Path) -> String {
    root.canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| root.display().to_string())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let root = data_root(a.dataset)?;
    let selection: SettingSelection = a.setting.parse().map_err(usage)?;
    if !(0.0..=1.0).contains(&a.threshold) {
        bail!(usage(format!("threshold {} is outside [0, 1]", a.threshold)));
    }
    let split = load_split(&root, &a.split)?;
    let predictor: Box<dyn Predictor> = if a.checkpoint == "oracle" {
        Box::new(OraclePredictor)
    } else {
        let path = PathBuf::from(&a.checkpoint);
        require_file(&path, "checkpoint")?;
        if path.extension().is_some_and(|e| e == "jsonl") {
            Box::new(PredictionsPredictor::load(&path)?)
        } else {
            let (model, ckpt) = load_checkpoint::<f32>(&path, None)?;
            Box::new(ModelPredictor {
                model,
                vocab: ckpt.vocab.unwrap_or_else(|| WordVocab::from_words(Vec::new())),
                id: path.display().to_string(),
            })
        }
    };
    let report = evaluate(&dataset_name(&root), &root, &split, predictor.as_ref(), selection, a.threshold)?;
    let table = report.to_table();
    let json = serde_json::to_string_pretty(&report)? + "\n";
    if let Some(out) = &a.out {
        write_text(out, &json)?;
        write_text(&out.with_extension("txt"), &table)?;
    } else {
        print!("{json}");
    }
    print!("{table}");
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    require_file(&a.config, "config")?;
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mode = a.mode.map(|m| match m {
        ModeArg::Pretrain => TrainMode::Pretrain,
        ModeArg::Finetune => TrainMode::Finetune,
    });
    let mut cfg = TrainConfig::parse(&text, mode).with_context(|| format!("in {}", a.config.display()))?;
    if let Some(out) = a.out {
        cfg.out_dir = out;
    }
    let config_dir = a.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let relative = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { config_dir.join(p) };

    let root = data_root(a.dataset)?;
    let split = load_split(&root, &cfg.split)?;

    let (mut model, vocab, resume) = match (&a.resume, &cfg.init_checkpoint) {
        (Some(path), _) => {
            require_file(path, "resume checkpoint")?;
            let (model, ckpt) = load_checkpoint::<f32>(path, None)?;
            let state: TrainState = serde_json::from_value(
                ckpt.train_state.clone().ok_or_else(|| usage(format!("{} has no training state", path.display())))?,
            )?;
            let vocab = ckpt.vocab.ok_or_else(|| usage(format!("{} has no vocabulary", path.display())))?;
            (model, vocab, Some(state))
        }
        (None, Some(init)) => {
            let init = relative(init);
            require_file(&init, "init checkpoint")?;
            let (model, ckpt) = load_checkpoint::<f32>(&init, None)?;
            let vocab = ckpt.vocab.ok_or_else(|| usage(format!("{} has no vocabulary", init.display())))?;
            (model, vocab, None)
        }
        (None, None) => {
            let vocab = WordVocab::from_expressions(split.samples.iter().map(|s| s.expression.as_str()));
            cfg.model.vocab_size = vocab.size();
            (UniRes::<f32>::new(cfg.model.clone(), cfg.seed)?, vocab, None)
        }
    };
    cfg.model = model.config().clone();
    if let (Some(manifest), None) = (&cfg.import_manifest, &resume) {
        let manifest = relative(manifest);
        require_file(&manifest, "import manifest")?;
        let r = import_weights(&mut model, &manifest)?;
        eprintln!("imported {} tensors, {} untouched, {} unused", r.imported.len(), r.untouched.len(), r.unused.len());
    }

    let examples = prepare_examples(&split, &root, &vocab, &cfg.model, cfg.full_res_supervision)?;
    let out_dir = cfg.out_dir.clone();
    let outcome = fit(
        &mut model,
        &examples,
        &cfg,
        FitOptions {
            out_dir: Some(out_dir.clone()),
            vocab: Some(vocab),
            resume,
        },
    )?;
    let summary = serde_json::json!({
        "out_dir": out_dir.display().to_string(),
        "steps": outcome.state.step,
        "epochs": outcome.state.epoch,
        "final_loss": outcome.log.last().map(|e| e.loss),
        "checkpoints": outcome.checkpoints.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    println!("{summary}");
    Ok(())
}

fn cmd_engine(a: EngineArgs) -> Result<()> {
    require_file(&a.images, "image manifest")?;
    require_file(&a.backends, "backends config")?;
    let config = BackendsConfig::load(&a.backends)?;
    let backends = BackendSuite::from_config(&config)?;
    let inputs = load_manifest(&a.images)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let create = |name: &str| -> Result<BufWriter<File>> {
        let path = a.out.join(name);
        Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
    };
    let (mut kept, mut dropped, mut failed) = (create("records.jsonl")?, create("dropped.jsonl")?, create("failed.jsonl")?);
    let report = run_engine(
        &inputs,
        &manifest_base(&a.images),
        &backends,
        &mut EngineSink {
            kept: &mut kept,
            dropped: Some(&mut dropped),
            failed: Some(&mut failed),
        },
    )?;
    for w in [&mut kept, &mut dropped, &mut failed] {
        w.flush()?;
    }
    let json = serde_json::to_string_pretty(&report)? + "\n";
    write_text(&a.out.join("report.json"), &json)?;
    print!("{json}");
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let root = data_root(a.dataset)?;
    let split = load_split(&root, &a.split)?;
    if split.is_empty() {
        bail!("split `{}` has no samples", a.split);
    }
    let stats = compute_stats(&split);
    let json = serde_json::to_string_pretty(&stats)? + "\n";
    if let Some(dir) = &a.out {
        write_text(&dir.join("stats.json"), &json)?;
        let mut csv = String::from("part_category,expressions\n");
        for (cat, n) in &stats.expressions_per_category {
            csv.push_str(&format!("{cat},{n}\n"));
        }
        write_text(&dir.join("part_categories.csv"), &csv)?;
    }
    print!("{json}");
    Ok(())
}

fn group_color(g: u32) -> [u8; 3] {
    let h = g.wrapping_mul(0x9E37_79B9);
    [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
}

fn write_groups_png(path: &Path, a: &GroupAssignment) -> Result<()> {
    const CELL: u32 = 8;
    let side = a.grid_size as u32 * CELL;
    let img = image::RgbImage::from_fn(side, side, |x, y| {
        let idx = (y / CELL) as usize * a.grid_size + (x / CELL) as usize;
        image::Rgb(group_color(a.values[idx]))
    });
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

fn cmd_groups(a: GroupsArgs) -> Result<()> {
    let level: GroupLevel = a.level.parse().map_err(|e| usage(format!("{e}")))?;
    require_file(&a.image, "image")?;
    let (model, vocab) = match (&a.checkpoint, &a.config) {
        (Some(path), _) => {
            require_file(path, "checkpoint")?;
            let (model, ckpt) = load_checkpoint::<f32>(path, None)?;
            (model, ckpt.vocab.unwrap_or_else(|| WordVocab::from_words(Vec::new())))
        }
        (None, Some(path)) => {
            require_file(path, "config")?;
            let cfg = TrainConfig::parse(&fs::read_to_string(path)?, None)?;
            (UniRes::<f32>::new(cfg.model, cfg.seed)?, WordVocab::from_words(Vec::new()))
        }
        (None, None) => bail!(usage("pass --checkpoint or --config")),
    };
    if !model.config().has_groups() {
        bail!(usage("model has no group tokens"));
    }
    let img = image::open(&a.image)
        .with_context(|| format!("reading {}", a.image.display()))?
        .to_rgb8();
    let tokens = tokenize(&a.expression, &vocab as &dyn Vocabulary, model.config().max_text_len)?;
    let (_, trace) = model.forward(&img, &tokens)?;
    let assignment = group_assignment(&trace, level).map_err(|e| usage(e.to_string()))?;
    if a.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        write_groups_png(&a.out, &assignment)?;
    } else {
        write_text(&a.out, &assignment.to_csv())?;
    }
    println!(
        "{}",
        serde_json::json!({
            "level": level,
            "grid_size": assignment.grid_size,
            "num_groups": assignment.num_groups,
            "distinct": assignment.values.iter().collect::<std::collections::BTreeSet<_>>().len(),
            "entropy": assignment.entropy(),
        })
    );
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    match a.kind {
        SynthKind::Fixture => {
            for split in [SplitName::Train, SplitName::Val] {
                fixture_set(split).write(&a.out)?;
            }
        }
        SynthKind::Toy => toy_set().write(&a.out)?,
        SynthKind::Engine => engine_fixture().write(&a.out)?,
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let role: BackendRole = a.role.parse().map_err(|e| usage(format!("{e}")))?;
    require_file(&a.backends, "backends config")?;
    let suite = BackendSuite::stubs_only(&BackendsConfig::load(&a.backends)?)?;
    let stdin = std::io::stdin();
    serve(&suite, role, stdin.lock(), std::io::stdout().lock())?;
    Ok(())
}
