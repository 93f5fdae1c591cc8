//! Command-line entry point: `ingest`, `embed`, `train`, `evaluate`,
//! `filter` and `report`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::embed::{embed_manifest, EmbedOptions};
use crate::encoder::frames::DefaultFrameSource;
use crate::encoder::EncoderBackend;
use crate::error::{Error, Result};
use crate::eval::{
    kfold_summary, load_eval_data, read_predictions, render_reports, result_from_predictions, run_all_folds,
    save_fold_models, ExcludeMode, Protocol,
};
use crate::filter::{mode_filter_labels, segmentize, TiePolicy};
use crate::manifest::{
    load_manifest_with, make_folds, read_manifest_cache, save_manifest, ClassId, DatasetManifest, Phase,
};
use crate::model::save_checkpoint;
use crate::store::EmbeddingStore;
use crate::synthetic::write_synthetic_dataset;
use crate::train::{train, EmbeddingSet};
use crate::util::{create_dir_all, write_atomic};

#[derive(Debug, Parser)]
#[command(name = "srlf", version, about = "Multi-view driver activity classification")]
pub struct Cli {
    /// TOML run configuration with dotted keys (e.g. `train.max_epochs = 20`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; also sets `train.seed` and `encoder.synthetic.center_seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for independent folds.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Generate a desk-scale synthetic dataset and embeddings under the
    /// output directory and run on those.
    #[arg(long, global = true)]
    pub synthetic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Unobstructed,
    Obstructed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ProtocolArg {
    AllClasses,
    BinaryClass0,
    ExcludeClass0,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[value(name = "retrain_15")]
    Retrain15,
    #[value(name = "mask_logits")]
    MaskLogits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum TieArg {
    KeepCenter,
    SmallestIndex,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
    #[arg(long, value_enum)]
    pub filter: Option<OnOff>,
    /// How `exclude_class0` drops class 0.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate the annotations and view files and cache the manifest.
    Ingest {
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long, value_enum)]
        phase: Option<PhaseArg>,
    },
    /// Embed every frame missing from the store.
    Embed,
    /// Train one model on all labeled frames and save its checkpoint.
    Train {
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Subject-wise k-fold train and evaluation with reports.
    Evaluate(EvalArgs),
    /// Mode-filter a `frame_index,label` CSV.
    Filter {
        #[arg(long)]
        input: PathBuf,
        /// Window in frames; tune it to the typical duration of the driver
        /// activities (141 at 30 Hz).
        #[arg(long)]
        window: Option<usize>,
        #[arg(long, value_enum)]
        tie_policy: Option<TieArg>,
    },
    /// Re-render reports from the `predictions.csv` files of an evaluation.
    Report {
        /// Output directory of a previous `evaluate`; defaults to `--out`.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, value_enum)]
        protocol: Option<ProtocolArg>,
    },
}

fn protocol_of(p: ProtocolArg) -> Protocol {
    match p {
        ProtocolArg::AllClasses => Protocol::AllClasses,
        ProtocolArg::BinaryClass0 => Protocol::BinaryClass0,
        ProtocolArg::ExcludeClass0 => Protocol::ExcludeClass0,
    }
}

/// Builds the effective configuration: defaults, synthetic preset, config
/// file, then flags.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), cli.synthetic)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
        cfg.encoder.synthetic.center_seed = seed;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    match &cli.command {
        Command::Ingest {
            annotations,
            root,
            phase,
        } => {
            if let Some(a) = annotations {
                cfg.dataset.annotations = Some(a.clone());
            }
            if let Some(r) = root {
                cfg.dataset.root = Some(r.clone());
            }
            if let Some(p) = phase {
                cfg.dataset.phase = Some(match p {
                    PhaseArg::Unobstructed => Phase::Unobstructed,
                    PhaseArg::Obstructed => Phase::Obstructed,
                });
            }
        }
        Command::Train { max_epochs } => {
            if let Some(m) = max_epochs {
                cfg.train.max_epochs = *m;
            }
        }
        Command::Evaluate(a) => {
            if let Some(p) = a.protocol {
                cfg.eval.protocol = protocol_of(p);
            }
            if let Some(f) = a.filter {
                cfg.eval.filter = f == OnOff::On;
            }
            if let Some(m) = a.mode {
                cfg.eval.exclude_mode = match m {
                    ModeArg::Retrain15 => ExcludeMode::Retrain15,
                    ModeArg::MaskLogits => ExcludeMode::MaskLogits,
                };
            }
            if let Some(m) = a.max_epochs {
                cfg.train.max_epochs = m;
            }
        }
        Command::Filter {
            window, tie_policy, ..
        } => {
            if let Some(w) = window {
                cfg.filter.window = *w;
            }
            if let Some(t) = tie_policy {
                cfg.filter.tie_policy = match t {
                    TieArg::KeepCenter => TiePolicy::KeepCenter,
                    TieArg::SmallestIndex => TiePolicy::SmallestIndex,
                };
            }
        }
        Command::Report { protocol, .. } => {
            if let Some(p) = protocol {
                cfg.eval.protocol = protocol_of(*p);
            }
        }
        Command::Embed => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> Result<DatasetManifest> {
    if cfg.synthetic.enabled {
        let root = cfg.synthetic_root();
        create_dir_all(&root)?;
        let (manifest, _) = write_synthetic_dataset(&cfg.synthetic_dataset(), &root)?;
        return Ok(match cfg.dataset.phase {
            Some(p) => manifest.filter_phase(p),
            None => manifest,
        });
    }
    let ann = cfg.dataset.annotations.as_ref().ok_or_else(|| {
        Error::Config("dataset.annotations is required (or pass --synthetic)".into())
    })?;
    if !ann.is_file() {
        return Err(Error::Validation(format!("annotation file not found: {}", ann.display())));
    }
    let root = cfg
        .dataset
        .root
        .clone()
        .or_else(|| ann.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    load_manifest_with(&root, ann, &cfg.dataset.load_options())
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let manifest = load_dataset(cfg)?;
    create_dir_all(&cfg.out)?;
    save_manifest(&cfg.manifest_cache(), &manifest)?;
    let labeled: usize = (0..manifest.sessions.len())
        .map(|s| manifest.frames_for_session(s).map(|f| f.iter().filter(|t| t.label.is_some()).count()))
        .sum::<Result<usize>>()?;
    println!(
        "participants {} sessions {} frames {} labeled {}",
        manifest.participants.len(),
        manifest.sessions.len(),
        manifest.total_frames(),
        labeled
    );
    println!("manifest written to {}", cfg.manifest_cache().display());
    Ok(manifest)
}

fn cached_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let path = cfg.manifest_cache();
    if cfg.synthetic.enabled && !path.is_file() {
        return cmd_ingest(cfg);
    }
    if !path.is_file() {
        return Err(Error::Validation(format!(
            "manifest cache {} not found; run `srlf ingest` first",
            path.display()
        )));
    }
    read_manifest_cache(&path)
}

pub fn cmd_embed(cfg: &RunConfig) -> Result<usize> {
    let manifest = cached_manifest(cfg)?;
    let backend = EncoderBackend::from_config(&cfg.encoder, cfg.model.num_classes, cfg.model.num_views)?;
    let mut store = EmbeddingStore::open_or_create(&cfg.store_dir(), cfg.encoder.embed_dim)?;
    let source = DefaultFrameSource::default();
    let summary = embed_manifest(&manifest, &mut store, &backend, &source, &EmbedOptions { seed: cfg.seed })?;
    store.flush()?;
    println!(
        "embedded {} new vectors ({} already present, {:.1}/s); store holds {}",
        summary.written,
        summary.already_present,
        summary.frames_per_sec(),
        store.len()
    );
    if summary.skipped_unlabeled > 0 {
        println!("skipped {} unlabeled frames", summary.skipped_unlabeled);
    }
    if !summary.failures.is_empty() {
        println!("{} frames failed:", summary.failures.len());
        for (key, reason) in &summary.failures {
            println!("  {key}: {reason}");
        }
    }
    Ok(summary.written)
}

fn open_store(cfg: &RunConfig) -> Result<EmbeddingStore> {
    let dir = cfg.store_dir();
    if cfg.synthetic.enabled {
        cmd_embed(cfg)?;
    }
    if !dir.join(crate::store::INDEX_FILE).is_file() {
        return Err(Error::Validation(format!(
            "embedding store {} not found; run `srlf embed` first",
            dir.display()
        )));
    }
    EmbeddingStore::open(&dir)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let manifest = cached_manifest(cfg)?;
    let store = open_store(cfg)?;
    let data = load_eval_data(&manifest, &store)?;
    let mut set = EmbeddingSet::new(cfg.model.num_views, store.embed_dim());
    for sd in &data {
        for (i, label) in sd.labels.iter().enumerate() {
            if let Some(y) = label {
                set.push(&sd.set.views(i), *y as usize)?;
            }
        }
    }
    let (model, history) = train(&set, &cfg.model, &cfg.train)?;
    save_checkpoint(&cfg.checkpoint_path(), &model)?;
    history.write_csv(&cfg.history_path())?;
    let best = &history.epochs[history.best_epoch - 1];
    println!(
        "trained {} epochs ({:?}); best epoch {} val_loss {:.4} val_acc {:.4}",
        history.epochs.len(),
        history.stop_reason,
        history.best_epoch,
        best.val_loss,
        best.val_acc
    );
    println!("checkpoint {}", cfg.checkpoint_path().display());
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<PathBuf> {
    let manifest = cached_manifest(cfg)?;
    let store = open_store(cfg)?;
    let data = load_eval_data(&manifest, &store)?;
    let folds = make_folds(&manifest, cfg.eval.folds, cfg.eval.fold_file.as_deref())?;
    let runs = run_all_folds(&data, &folds, &cfg.model, &cfg.train, &cfg.filter, &cfg.eval, cfg.jobs)?;
    let results: Vec<_> = runs.iter().map(|(r, _)| r.clone()).collect();
    let dir = render_reports(&results, &cfg.out)?;
    save_fold_models(&dir, &runs)?;
    for r in &results {
        println!("fold {} accuracy {:.2} (raw {:.2})", r.fold, r.accuracy()?, r.raw.accuracy()?);
    }
    let (mean, sd) = kfold_summary(&results)?;
    println!("{}: mean accuracy {mean:.2} +/- {sd:.2}", cfg.eval.protocol);
    println!("reports in {}", dir.display());
    Ok(dir)
}

#[derive(Debug, serde::Deserialize)]
struct LabelRow {
    frame_index: u32,
    label: ClassId,
}

pub fn cmd_filter(cfg: &RunConfig, input: &Path) -> Result<()> {
    let mut reader = csv::Reader::from_path(input).map_err(|e| Error::Io {
        context: format!("opening {}", input.display()),
        source: e.into(),
    })?;
    let rows: Vec<LabelRow> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
    let labels: Vec<ClassId> = rows.iter().map(|r| r.label).collect();
    let filtered = mode_filter_labels(&labels, &cfg.filter)?;
    create_dir_all(&cfg.out)?;
    let mut out = String::from("frame_index,label\n");
    for (r, l) in rows.iter().zip(&filtered) {
        out.push_str(&format!("{},{l}\n", r.frame_index));
    }
    write_atomic(&cfg.out.join("filtered.csv"), out.as_bytes())?;
    let mut segs = String::from("start,end,label\n");
    for s in segmentize(&filtered)? {
        segs.push_str(&format!(
            "{},{},{}\n",
            rows[s.start].frame_index,
            rows[s.end - 1].frame_index + 1,
            s.label
        ));
    }
    write_atomic(&cfg.out.join("segments.csv"), segs.as_bytes())?;
    let changed = labels.iter().zip(&filtered).filter(|(a, b)| a != b).count();
    println!(
        "filtered {} frames with window {}; {changed} labels changed",
        labels.len(),
        cfg.filter.window
    );
    Ok(())
}

pub fn cmd_report(cfg: &RunConfig, from: &Path) -> Result<PathBuf> {
    let protocol = cfg.eval.protocol;
    let src = from.join(protocol.as_str());
    let mut folds: Vec<(usize, PathBuf)> = std::fs::read_dir(&src)
        .map_err(|e| Error::Io {
            context: format!("listing {}", src.display()),
            source: e,
        })?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let fold = name.strip_prefix("fold")?.parse().ok()?;
            Some((fold, e.path().join("predictions.csv")))
        })
        .collect();
    folds.sort();
    if folds.is_empty() {
        return Err(Error::Validation(format!("no fold directories under {}", src.display())));
    }
    let results = folds
        .into_iter()
        .map(|(fold, path)| {
            let preds = read_predictions(&path)?;
            result_from_predictions(fold, protocol, cfg.model.num_classes, cfg.eval.filter, preds)
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = render_reports(&results, &cfg.out.join("report"))?;
    if results.len() >= 2 {
        let (mean, sd) = kfold_summary(&results)?;
        println!("{protocol}: mean accuracy {mean:.2} +/- {sd:.2}");
    }
    println!("reports in {}", dir.display());
    Ok(dir)
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    let name = match &cli.command {
        Command::Ingest { .. } => "ingest",
        Command::Embed => "embed",
        Command::Train { .. } => "train",
        Command::Evaluate(_) => "evaluate",
        Command::Filter { .. } => "filter",
        Command::Report { .. } => "report",
    };
    let dump = cfg.dump(name)?;
    log::info!("effective configuration written to {}", dump.display());
    match &cli.command {
        Command::Ingest { .. } => cmd_ingest(&cfg).map(drop),
        Command::Embed => cmd_embed(&cfg).map(drop),
        Command::Train { .. } => cmd_train(&cfg),
        Command::Evaluate(_) => cmd_evaluate(&cfg).map(drop),
        Command::Filter { input, .. } => cmd_filter(&cfg, input),
        Command::Report { from, .. } => cmd_report(&cfg, from.as_deref().unwrap_or(&cfg.out)).map(drop),
    }
}

/// Exit code 0 on success, 1 for invalid input or configuration, 2 for
/// runtime failures.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
