use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use vipformer::config::RunConfig;
use vipformer::data::shapes::Family;
use vipformer::data::{generate_synthetic, synthesize, Dataset, LoadOptions, Sample, Split};
use vipformer::eval::{extract_embeddings, fewshot};
use vipformer::model::{count_parameters, ViPFormer};
use vipformer::selftest;
use vipformer::train::{
    classifier_model, load_checkpoint, save_checkpoint, Checkpoint, FinetuneData, FinetuneEpoch, FinetuneOutcome,
    Finetuner, PretrainData, Pretrainer, StrategyComparison, FINETUNE_HEADER, METRICS_HEADER, STEPS_HEADER,
};
use vipformer::{Error, RngStream};

#[derive(Parser)]
#[command(name = "vipformer", version, about = "Image/point-cloud transformer with contrastive pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Dedicated flags override `--set`,
/// which overrides the config file.
#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Plain-text `key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs of the stage being run.
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size of the stage being run.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_parser = ["imc", "cmc", "both"])]
    mode: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Serial data preparation; reruns reproduce every logged value.
    #[arg(long)]
    strict_deterministic: bool,
    /// Worker threads (0 = one per core).
    #[arg(long)]
    workers: Option<usize>,
    /// Parent of the run directory; the run itself goes to `<out-dir>/<subcommand>`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Dataset root (directory with `manifest.json`); synthetic data otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural shape corpus on disk.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory (default `<out-dir>/data`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contrastive pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Resume from a pretraining checkpoint.
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
        /// Stop (and checkpoint) after this many optimiser steps.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Classification finetuning.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pretrained backbone, or a finetuning checkpoint to resume.
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
        #[arg(long)]
        freeze_encoder: bool,
        /// Also train from scratch under the same budget and tabulate both.
        #[arg(long)]
        compare: bool,
    },
    /// N-way K-shot linear-probe evaluation of frozen embeddings.
    Fewshot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from_checkpoint: PathBuf,
        /// Restrict episodes to one split (default: all samples).
        #[arg(long)]
        split: Option<String>,
    },
    /// Export frozen embeddings as TSV.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from_checkpoint: PathBuf,
        #[arg(long)]
        split: Option<String>,
        /// Output file (default `<run dir>/embeddings.tsv`).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the learnable parameter count of the configured model.
    Params {
        #[command(flatten)]
        common: Common,
    },
    /// Run the oracle and gradient-check suite.
    Selftest {
        #[command(flatten)]
        common: Common,
    },
}

/// Bad invocation or configuration: exit code 1.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Failed self-test: reported like a numeric failure.
#[derive(Debug)]
struct SelftestFailed(usize);

impl fmt::Display for SelftestFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} self-test check(s) failed", self.0)
    }
}

impl std::error::Error for SelftestFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    if err.downcast_ref::<SelftestFailed>().is_some() {
        return 3;
    }
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Parameter(_)) => 1,
        Some(Error::Numeric(_)) => 3,
        _ => 2,
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
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, out } => {
            let cfg = resolve(&common, "pretrain")?;
            gen_data(&cfg, out)
        }
        Command::Pretrain {
            common,
            from_checkpoint,
            max_steps,
        } => {
            let cfg = resolve(&common, "pretrain")?;
            run_pretrain(&cfg, from_checkpoint.as_deref(), max_steps)
        }
        Command::Finetune {
            common,
            from_checkpoint,
            freeze_encoder,
            compare,
        } => {
            let mut cfg = resolve(&common, "finetune")?;
            cfg.finetune.freeze_encoder |= freeze_encoder;
            run_finetune(&cfg, from_checkpoint.as_deref(), compare)
        }
        Command::Fewshot {
            common,
            from_checkpoint,
            split,
        } => {
            let cfg = resolve(&common, "pretrain")?;
            run_fewshot(&cfg, &from_checkpoint, split.as_deref())
        }
        Command::Embed {
            common,
            from_checkpoint,
            split,
            output,
        } => {
            let cfg = resolve(&common, "pretrain")?;
            run_embed(&cfg, &from_checkpoint, split.as_deref(), output)
        }
        Command::Params { common } => {
            let cfg = resolve(&common, "pretrain")?;
            let n = count_parameters(&cfg.model);
            println!("{n}\t({:.2}M)", n as f64 / 1e6);
            Ok(())
        }
        Command::Selftest { common } => {
            let cfg = resolve(&common, "pretrain")?;
            let checks = selftest::run_all(cfg.seed());
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("{} passed, {failed} failed", checks.len() - failed);
            if failed > 0 {
                return Err(SelftestFailed(failed).into());
            }
            Ok(())
        }
    }
}

/// Builds the run configuration; `stage` picks which section `--epochs`
/// and `--batch-size` address.
fn resolve(common: &Common, stage: &str) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    let mut pairs: Vec<(String, String)> = Vec::new();
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    };
    flag("run.seed", common.seed.map(|v| v.to_string()));
    flag(&format!("{stage}.epochs"), common.epochs.map(|v| v.to_string()));
    flag(&format!("{stage}.batch_size"), common.batch_size.map(|v| v.to_string()));
    flag("contrast.mode", common.mode.clone());
    flag("contrast.alpha", common.alpha.map(|v| v.to_string()));
    flag("contrast.tau", common.tau.map(|v| v.to_string()));
    flag("run.workers", common.workers.map(|v| v.to_string()));
    flag("run.out_dir", common.out_dir.as_ref().map(|p| p.display().to_string()));
    flag("data.root", common.data.as_ref().map(|p| p.display().to_string()));
    if common.strict_deterministic {
        pairs.push(("run.strict_deterministic".into(), "true".into()));
    }
    cfg.apply_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.clone())))
        .map_err(|e| usage(e.to_string()))?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    cfg.pretrain.serial_loading = cfg.strict_deterministic;
    cfg.finetune.serial_loading = cfg.strict_deterministic;
    if cfg.workers > 0 {
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    Ok(cfg)
}

fn run_dir(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.out_dir.join(name);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.txt"), cfg.to_text()).with_context(|| format!("writing {}/config.txt", dir.display()))?;
    Ok(dir)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data_root {
        Some(root) => {
            let opts = LoadOptions {
                sample_size: (cfg.sample_size > 0).then_some(cfg.sample_size),
                seed: cfg.seed(),
            };
            Ok(Dataset::load(root, opts)?)
        }
        None => {
            let samples = synthesize(&cfg.synthetic, &RngStream::new(cfg.seed()))?;
            let classes = Family::ALL[..cfg.synthetic.class_count]
                .iter()
                .map(|f| f.name().to_string())
                .collect();
            Ok(Dataset::from_samples(classes, samples))
        }
    }
}

fn parse_split(split: Option<&str>) -> Result<Option<Split>> {
    split
        .map(|s| s.parse::<Split>().map_err(|e| usage(e.to_string())))
        .transpose()
}

fn select(ds: &Dataset, split: Option<Split>) -> Vec<&Sample> {
    match split {
        Some(s) => ds.split(s),
        None => ds.samples.iter().collect(),
    }
}

/// Opens a TSV log, writing `header` unless appending to an existing file.
fn open_log(path: &Path, header: &str, append: bool) -> Result<BufWriter<File>> {
    let fresh = !append || !path.exists();
    let file = if fresh {
        File::create(path)
    } else {
        OpenOptions::new().append(true).open(path)
    }
    .with_context(|| format!("opening {}", path.display()))?;
    let mut w = BufWriter::new(file);
    if fresh {
        writeln!(w, "{header}")?;
    }
    Ok(w)
}

fn load_model(path: &Path) -> Result<(Checkpoint, ViPFormer<f32>)> {
    let ckpt = load_checkpoint(path)?;
    let model = ViPFormer::from_parts(ckpt.model.clone(), ckpt.weights.clone())?;
    Ok((ckpt, model))
}

fn gen_data(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let root = out
        .or_else(|| cfg.data_root.clone())
        .unwrap_or_else(|| cfg.out_dir.join("data"));
    let manifest = generate_synthetic(&cfg.synthetic, &root, &RngStream::new(cfg.seed()))?;
    println!(
        "wrote {} samples in {} classes to {}",
        manifest.entries.len(),
        manifest.classes.len(),
        root.display()
    );
    Ok(())
}

fn run_pretrain(cfg: &RunConfig, resume: Option<&Path>, max_steps: Option<u64>) -> Result<()> {
    let dir = run_dir(cfg, "pretrain")?;
    let ds = load_dataset(cfg)?;
    let train = ds.split_owned(Split::Train);
    let data = PretrainData {
        train: &train,
        probe_fit: train.iter().collect(),
        probe_eval: ds.split(Split::Val),
    };
    let mut t = match resume {
        Some(p) => Pretrainer::resume(load_checkpoint(p)?, cfg.pretrain.clone())?,
        None => {
            let model = ViPFormer::new(cfg.model.clone(), &RngStream::new(cfg.seed()))?;
            let mut t = Pretrainer::new(model, cfg.pretrain.clone())?;
            t.run.insert("config".into(), cfg.to_text());
            t
        }
    };
    let appending = resume.is_some();
    let mut metrics = open_log(&dir.join("metrics.tsv"), METRICS_HEADER, appending)?;
    let mut steps = open_log(&dir.join("steps.tsv"), STEPS_HEADER, appending)?;
    let (last, best) = (dir.join("last.vipf"), dir.join("best.vipf"));
    println!("{METRICS_HEADER}");
    let outcome = t.run(&data, max_steps, &mut |t, r| {
        writeln!(steps, "{}", r.tsv()).map_err(|e| Error::Io {
            path: dir.join("steps.tsv"),
            source: e,
        })?;
        if let Some(m) = &r.epoch_end {
            println!("{}", m.tsv());
            let io = |e| Error::Io {
                path: dir.join("metrics.tsv"),
                source: e,
            };
            writeln!(metrics, "{}", m.tsv()).map_err(io)?;
            metrics.flush().map_err(io)?;
            save_checkpoint(&t.checkpoint(), &last)?;
            if r.improved {
                if let Some(b) = t.best_checkpoint() {
                    save_checkpoint(&b, &best)?;
                }
            }
        }
        Ok(())
    });
    steps.flush()?;
    // The trainer never commits a step that failed, so its state is the last good one.
    save_checkpoint(&t.checkpoint(), &last)?;
    outcome?;
    if !best.exists() {
        save_checkpoint(&t.checkpoint(), &best)?;
    }
    Ok(())
}

/// Runs `t` to completion, logging into `dir`.
fn drive_finetune(t: &mut Finetuner, data: &FinetuneData<'_>, dir: &Path, append: bool, tag: &str) -> Result<FinetuneOutcome> {
    fs::create_dir_all(dir)?;
    let mut log = open_log(&dir.join("finetune.tsv"), FINETUNE_HEADER, append)?;
    let mut write_err = None;
    let outcome = t.run(data, &mut |e: &FinetuneEpoch| {
        println!("{tag}{}", e.tsv());
        if let Err(err) = writeln!(log, "{}", e.tsv()).and_then(|_| log.flush()) {
            write_err.get_or_insert(err);
        }
    });
    save_checkpoint(&t.checkpoint(), &dir.join("last.vipf"))?;
    outcome?;
    if let Some(e) = write_err {
        return Err(e).context("writing finetune.tsv");
    }
    let best = t.best_checkpoint().unwrap_or_else(|| t.checkpoint());
    save_checkpoint(&best, &dir.join("best.vipf"))?;
    Ok(FinetuneOutcome {
        best_oa: t.best_oa(),
        log: t.log.clone(),
        last: t.checkpoint(),
        best: t.best_checkpoint(),
    })
}

fn run_finetune(cfg: &RunConfig, from: Option<&Path>, compare: bool) -> Result<()> {
    let dir = run_dir(cfg, "finetune")?;
    let ds = load_dataset(cfg)?;
    let data = FinetuneData {
        train: ds.split(Split::Train),
        val: ds.split(Split::Val),
        num_classes: ds.num_classes(),
    };
    let ckpt = from.map(load_checkpoint).transpose()?;
    if let Some(c) = ckpt.as_ref().filter(|c| c.stage == "finetune") {
        if compare {
            return Err(usage("--compare needs a pretraining checkpoint, not a finetuning one"));
        }
        let mut t = Finetuner::resume(c.clone(), cfg.finetune.clone())?;
        drive_finetune(&mut t, &data, &dir, true, "")?;
        return Ok(());
    }
    let backbone = match ckpt {
        Some(mut c) => {
            c.weights.remove_prefix("head.");
            Some(ViPFormer::from_parts(c.model, c.weights)?)
        }
        None if compare => return Err(usage("--compare needs --from-checkpoint with a pretrained backbone")),
        None => None,
    };
    let model_cfg = backbone.as_ref().map_or(cfg.model.clone(), |m| m.config.clone());
    let fresh = |backbone: Option<ViPFormer<f32>>| -> Result<Finetuner> {
        let model = classifier_model(backbone, &model_cfg, data.num_classes, cfg.seed())?;
        let mut t = Finetuner::new(model, cfg.finetune.clone())?;
        t.run.insert("config".into(), cfg.to_text());
        Ok(t)
    };
    if !compare {
        drive_finetune(&mut fresh(backbone)?, &data, &dir, false, "")?;
        return Ok(());
    }
    println!("{FINETUNE_HEADER}");
    let pretrained = drive_finetune(&mut fresh(backbone)?, &data, &dir.join("pretrained"), false, "pretrained\t")?;
    let scratch = drive_finetune(&mut fresh(None)?, &data, &dir.join("scratch"), false, "scratch\t")?;
    let table = StrategyComparison { pretrained, scratch }.table();
    fs::write(dir.join("comparison.md"), &table)?;
    print!("{table}");
    Ok(())
}

fn run_fewshot(cfg: &RunConfig, from: &Path, split: Option<&str>) -> Result<()> {
    let split = parse_split(split)?;
    let dir = run_dir(cfg, "fewshot")?;
    let (_, model) = load_model(from)?;
    let ds = load_dataset(cfg)?;
    let samples = select(&ds, split);
    let clouds: Vec<_> = samples.iter().map(|s| &s.points).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
    let report = fewshot(
        &model,
        &clouds,
        &labels,
        &cfg.fewshot,
        &cfg.pretrain.probe,
        &cfg.pretrain.embed,
        &RngStream::new(cfg.seed()),
    )?;
    let mut w = open_log(&dir.join("fewshot.tsv"), "run\taccuracy", false)?;
    for (i, a) in report.accuracies.iter().enumerate() {
        writeln!(w, "{}\t{a}", i + 1)?;
    }
    w.flush()?;
    let s = &cfg.fewshot;
    println!(
        "{}-way {}-shot over {} runs: {:.2} ± {:.2} %",
        s.n_way,
        s.k_shot,
        s.runs,
        100.0 * report.mean,
        100.0 * report.std
    );
    Ok(())
}

fn run_embed(cfg: &RunConfig, from: &Path, split: Option<&str>, output: Option<PathBuf>) -> Result<()> {
    let split = parse_split(split)?;
    let dir = run_dir(cfg, "embed")?;
    let (_, model) = load_model(from)?;
    let ds = load_dataset(cfg)?;
    let samples = select(&ds, split);
    let clouds: Vec<_> = samples.iter().map(|s| &s.points).collect();
    let feats = extract_embeddings(&model, &clouds, &cfg.pretrain.embed)?;
    let path = output.unwrap_or_else(|| dir.join("embeddings.tsv"));
    let width = feats.shape()[1];
    let header: Vec<String> = ["sample_id", "class", "split"]
        .into_iter()
        .map(String::from)
        .chain((0..width).map(|k| format!("f{k}")))
        .collect();
    let mut w = open_log(&path, &header.join("\t"), false)?;
    for (i, s) in samples.iter().enumerate() {
        let split = match s.split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        write!(w, "{}\t{}\t{split}", s.sample_id, ds.classes[s.class_id])?;
        for v in feats.row(i) {
            write!(w, "\t{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    println!("wrote {} embeddings of width {width} to {}", samples.len(), path.display());
    Ok(())
}
