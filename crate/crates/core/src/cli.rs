//! Command-line verbs. Each is a plain function over an argument struct
//! so it can be driven from tests as well as from `main`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::clustering::{calibrate_threshold, cluster_anomalies, AnomalyInstances, Moments};
use crate::config::RunConfig;
use crate::dataset::{encode_pgm16, encode_pgm8, read_ppm, read_split, write_dataset, Manifest};
use crate::error::{Error, Result};
use crate::inference::{
    anomaly_scores, filter_masks, fuse_uncertainty, pixel_logits, LogitStats, LogitStatsAccumulator,
    Prediction, Scorer,
};
use crate::metrics::{
    instance_anomaly_ap, InstanceAnomalyResult, IouAccumulator, PanopticAccumulator, PanopticResult,
    PixelAccumulator, PixelAnomalyResult, ScoredInstance, INSTANCE_IOU_THRESHOLDS,
};
use crate::model::{load_model, predict, save_model, ModelParams, Outputs, Trainer};
use crate::report::to_json;
use crate::synth::{Catalog, Image, SceneSpec, Split, VOID};

#[derive(Debug, Parser)]
#[command(name = "evimask", version, about = "Evidential mask segmentation on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    Gen(GenArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Segment one image.
    Infer(InferArgs),
    /// Evaluate a model on a dataset split.
    Eval(EvalArgs),
    /// Collect training-set score statistics for thresholds and SML.
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Images in train, val_closed and val_open.
    #[arg(long, num_args = 3, value_names = ["TRAIN", "VAL_CLOSED", "VAL_OPEN"], default_values_t = [500, 50, 50])]
    pub counts: Vec<usize>,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `steps` from the config.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `catalog.json` written by `gen`; the built-in catalog otherwise.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Cluster uncertain pixels into anomaly instances.
    #[arg(long)]
    pub cluster: bool,
    /// Statistics file from `stats`, used for the clustering threshold.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Explicit clustering threshold on `U`.
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_split, default_value = "val_closed")]
    pub split: Split,
    #[arg(long, value_parser = parse_scorer, default_value = "p2f")]
    pub scorer: Scorer,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split {s:?} (train, val_closed, val_open)"))
}

fn parse_scorer(s: &str) -> std::result::Result<Scorer, String> {
    Scorer::parse(s).ok_or_else(|| format!("unknown scorer {s:?} (p2f, sml, mm, eam, rba, m2a)"))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a).map(drop),
        Command::Train(a) => cmd_train(&a).map(drop),
        Command::Infer(a) => cmd_infer(&a).map(drop),
        Command::Eval(a) => cmd_eval(&a).map(drop),
        Command::Stats(a) => cmd_stats(&a).map(drop),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

// ---- gen ----------------------------------------------------------------------

pub fn cmd_gen(args: &GenArgs) -> Result<Manifest> {
    let counts: [usize; 3] = args
        .counts
        .as_slice()
        .try_into()
        .map_err(|_| Error::InvalidArgument("--counts takes three values".into()))?;
    if args.out.exists() {
        let mut entries = fs::read_dir(&args.out).map_err(|e| Error::io(&args.out, e))?;
        if entries.next().is_some() && !args.force {
            return Err(Error::InvalidArgument(format!(
                "{} is not empty; pass --force to overwrite",
                args.out.display()
            )));
        }
    }
    create_dir(&args.out)?;
    let spec = SceneSpec { seed: args.seed, ..SceneSpec::default() };
    let manifest = write_dataset(&args.out, &spec, &Catalog::default(), counts)?;
    log::info!("wrote {:?} images to {}", counts, args.out.display());
    Ok(manifest)
}

// ---- train --------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_total: Option<f64>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub log: PathBuf,
}

pub const FINAL_CHECKPOINT: &str = "model.p2fm";
pub const BEST_CHECKPOINT: &str = "best.p2fm";
pub const TRAIN_LOG: &str = "train_log.csv";

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = args.steps {
        cfg.train.steps = n;
    }
    let (manifest, samples) = read_split(&args.data, Split::Train)?;
    let catalog = manifest.catalog;
    if (manifest.height, manifest.width) != (cfg.model.height, cfg.model.width) {
        return Err(Error::Config(format!(
            "model is {}x{} but the dataset is {}x{}",
            cfg.model.width, cfg.model.height, manifest.width, manifest.height
        )));
    }
    cfg.model.num_classes = catalog.num_known();
    cfg.validate()?;

    create_dir(&args.out)?;
    write(&args.out.join("config.txt"), cfg.to_text().as_bytes())?;
    let log_path = args.out.join(TRAIN_LOG);
    let mut csv = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(csv, "step,ce,sdice,evi,total").map_err(|e| Error::io(&log_path, e))?;

    let params = ModelParams::init(cfg.model, cfg.train.seed)?;
    let mut trainer = Trainer::new(params, cfg.train, &samples, &catalog)?;
    let mut last = None;
    for step in 0..cfg.train.steps {
        // A failed step leaves the rows written so far in place.
        let l = trainer.step()?;
        writeln!(csv, "{},{:.6},{:.6},{:.6},{:.6}", l.step, l.ce, l.sdice, l.evi, l.total)
            .and_then(|_| csv.flush())
            .map_err(|e| Error::io(&log_path, e))?;
        if step % 100 == 0 {
            log::info!("step {step}: total {:.4} (ce {:.4}, sdice {:.4}, evi {:.4})", l.total, l.ce, l.sdice, l.evi);
        }
        last = Some(l.total);
    }
    let final_checkpoint = args.out.join(FINAL_CHECKPOINT);
    let best_checkpoint = args.out.join(BEST_CHECKPOINT);
    save_model(&trainer.params, &final_checkpoint)?;
    save_model(trainer.best(), &best_checkpoint)?;
    Ok(TrainSummary {
        steps: trainer.steps_done(),
        final_total: last,
        final_checkpoint,
        best_checkpoint,
        log: log_path,
    })
}

// ---- shared inference -----------------------------------------------------------

/// Forward pass, mask filtering and fusion for one image.
pub fn analyse(params: &ModelParams, cfg: &RunConfig, catalog: &Catalog, image: &Image) -> Result<(Outputs, Prediction)> {
    let mc = &params.config;
    if (image.width, image.height) != (mc.width, mc.height) {
        return Err(Error::Data(format!(
            "image is {}x{} but the model expects {}x{}",
            image.width, image.height, mc.width, mc.height
        )));
    }
    let out = predict(params, &image.to_tensor())?;
    let filtered = filter_masks(&out.class_logits, &cfg.filter);
    let pred = fuse_uncertainty(&out.evidence, &out.class_logits, &filtered, catalog, mc.width, mc.height)?;
    Ok((out, pred))
}

/// Training-set statistics written by `stats`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub images: usize,
    pub logit_stats: LogitStats,
    /// Per scorer name, moments of its per-pixel score.
    pub moments: BTreeMap<String, Moments>,
}

impl ScoreStats {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn threshold(&self, scorer: Scorer, k_sigma: f64) -> Result<f64> {
        let m = self
            .moments
            .get(scorer.name())
            .ok_or_else(|| Error::Data(format!("statistics have no entry for scorer {}", scorer.name())))?;
        calibrate_threshold(m, k_sigma)
    }
}

fn need_stats(stats: Option<&Path>, why: &str) -> Result<ScoreStats> {
    match stats {
        Some(p) => ScoreStats::load(p),
        None => Err(Error::Config(format!(
            "{why} needs training-set statistics: run `evimask stats` first and pass its output with --stats"
        ))),
    }
}

/// Clusters the pixels whose `scores` exceed `threshold`. Instances are
/// ranked by their mean score; for `p2f` that order matches the
/// `1 + mean(U)` confidence kept on the instances.
fn cluster_with_scores(
    pred: &Prediction,
    out: &Outputs,
    scores: &[f64],
    threshold: f64,
    cfg: &RunConfig,
    anomaly_class: u16,
) -> Result<(AnomalyInstances, Vec<f64>, Prediction)> {
    let mut scored = pred.clone();
    scored.uncertainty = scores.to_vec();
    let (inst, mut merged) = cluster_anomalies(&scored, &out.embeddings, threshold, &cfg.cluster, anomaly_class)?;
    merged.uncertainty = pred.uncertainty.clone();
    let ranks = inst
        .instances
        .iter()
        .map(|i| i.pixels.iter().map(|&p| scores[p]).sum::<f64>() / i.pixels.len() as f64)
        .collect();
    Ok((inst, ranks, merged))
}

// ---- infer --------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceReport {
    pub image: PathBuf,
    pub threshold: f64,
    pub confidence_rule: &'static str,
    pub outliers_reassigned: usize,
    pub instances: Vec<InstanceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceEntry {
    pub id: u16,
    pub confidence: f64,
    pub area: usize,
    pub pixels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOutput {
    pub prediction: Prediction,
    pub instances: Option<InstanceReport>,
}

pub const CONFIDENCE_RULE: &str = "1 + mean(U) over member pixels, clamped to [0, 1]";

/// `round(255·(U + 1))`: 255 is maximal uncertainty (`U = 0`).
pub fn uncertainty_to_u8(u: f64) -> u8 {
    (255.0 * (u + 1.0)).round().clamp(0.0, 255.0) as u8
}

pub fn cmd_infer(args: &InferArgs) -> Result<InferOutput> {
    let mut cfg = load_config(args.config.as_deref())?;
    let params = load_model(&args.model)?;
    cfg.model = params.config;
    let catalog = match &args.catalog {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?
        }
        None => Catalog::default(),
    };
    let image = read_ppm(&args.image)?;
    let (out, pred) = analyse(&params, &cfg, &catalog, &image)?;
    let (pred, instances) = if args.cluster {
        let t = match args.threshold {
            Some(t) => t,
            None => need_stats(args.stats.as_deref(), "--cluster without --threshold")?
                .threshold(Scorer::P2f, cfg.cluster.k_sigma)?,
        };
        let (inst, _, merged) =
            cluster_with_scores(&pred, &out, &pred.uncertainty, t, &cfg, catalog.anomaly_class())?;
        let report = InstanceReport {
            image: args.image.clone(),
            threshold: t,
            confidence_rule: CONFIDENCE_RULE,
            outliers_reassigned: inst.outliers_reassigned,
            instances: inst
                .instances
                .into_iter()
                .map(|i| InstanceEntry { id: i.id, confidence: i.confidence, area: i.pixels.len(), pixels: i.pixels })
                .collect(),
        };
        (merged, Some(report))
    } else {
        (pred, None)
    };

    create_dir(&args.out)?;
    let (w, h) = (pred.width, pred.height);
    write(&args.out.join("class.pgm"), &encode_pgm16(w, h, &pred.seg_class))?;
    write(&args.out.join("instance.pgm"), &encode_pgm16(w, h, &pred.seg_instance))?;
    let u8s: Vec<u8> = pred.uncertainty.iter().map(|&u| uncertainty_to_u8(u)).collect();
    write(&args.out.join("uncertainty.pgm"), &encode_pgm8(w, h, &u8s))?;
    if let Some(r) = &instances {
        write(&args.out.join("instances.json"), &to_json(r)?)?;
    }
    if pred.fallback {
        log::warn!("every mask was filtered; fused over the unfiltered set");
    }
    Ok(InferOutput { prediction: pred, instances })
}

// ---- stats --------------------------------------------------------------------

pub fn cmd_stats(args: &StatsArgs) -> Result<ScoreStats> {
    let mut cfg = load_config(args.config.as_deref())?;
    let params = load_model(&args.model)?;
    cfg.model = params.config;
    let (manifest, samples) = read_split(&args.data, Split::Train)?;
    let catalog = manifest.catalog;

    let mut acc = LogitStatsAccumulator::new(params.config.num_classes);
    for s in &samples {
        let (out, _) = analyse(&params, &cfg, &catalog, &s.image)?;
        acc.add(&pixel_logits(&out.evidence, &out.class_logits));
    }
    let logit_stats = acc.finish();

    let mut moments: BTreeMap<String, Moments> = BTreeMap::new();
    for s in &samples {
        let (out, pred) = analyse(&params, &cfg, &catalog, &s.image)?;
        for kind in Scorer::ALL {
            let sc = anomaly_scores(kind, &out.evidence, &out.class_logits, &pred, Some(&logit_stats))?;
            moments.entry(kind.name().to_string()).or_default().extend(&sc);
        }
    }
    let stats = ScoreStats { images: samples.len(), logit_stats, moments };
    let json = serde_json::to_vec_pretty(&stats).map_err(|e| Error::Data(e.to_string()))?;
    write(&args.out, &json)?;
    Ok(stats)
}

// ---- eval ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedWorld {
    pub panoptic: PanopticResult,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnomalyReport {
    pub threshold: f64,
    pub prevalence: f64,
    pub mean_score_ood: f64,
    pub mean_score_ind: f64,
    pub pixel: PixelAnomalyResult,
    pub instance: InstanceAnomalyResult,
    pub instance_iou_thresholds: Vec<f64>,
    pub instance_ranking: &'static str,
    /// Known classes plus the merged anomaly class.
    pub open_world: PanopticResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: &'static str,
    pub scorer: &'static str,
    pub images: usize,
    pub fallback_images: usize,
    pub config: RunConfig,
    pub closed_world: ClosedWorld,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anomaly: Option<AnomalyReport>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let mut cfg = load_config(args.config.as_deref())?;
    let params = load_model(&args.model)?;
    cfg.model = params.config;
    let (manifest, samples) = read_split(&args.data, args.split)?;
    let catalog = manifest.catalog;
    let open = args.split == Split::ValOpen;

    let stats = if args.scorer == Scorer::Sml {
        Some(need_stats(args.stats.as_deref(), "scorer sml")?)
    } else if open {
        Some(need_stats(args.stats.as_deref(), "open-split evaluation")?)
    } else {
        None
    };
    let threshold = match &stats {
        Some(s) if open => Some(s.threshold(args.scorer, cfg.cluster.k_sigma)?),
        _ => None,
    };

    let known: Vec<u16> = (0..catalog.num_known() as u16).collect();
    let anomaly_class = catalog.anomaly_class();
    let mut with_anomaly = known.clone();
    with_anomaly.push(anomaly_class);
    let mut closed = PanopticAccumulator::new(&known)?;
    let mut iou = IouAccumulator::new(&known);
    let mut openw = PanopticAccumulator::new(&with_anomaly)?;
    let mut pixels = PixelAccumulator::default();
    let (mut ood, mut ind) = (Moments::default(), Moments::default());
    let mut inst_preds = Vec::new();
    let mut inst_gts = Vec::new();
    let mut fallback_images = 0;

    for s in &samples {
        let (out, pred) = analyse(&params, &cfg, &catalog, &s.image)?;
        let lab = &s.label;
        fallback_images += usize::from(pred.fallback);
        closed.add(&pred.seg_class, &pred.seg_instance, &lab.class_map, &lab.instance_map)?;
        iou.add(&pred.seg_class, &lab.class_map);
        let Some(t) = threshold else { continue };

        let scores = anomaly_scores(
            args.scorer,
            &out.evidence,
            &out.class_logits,
            &pred,
            stats.as_ref().map(|s| &s.logit_stats),
        )?;
        let gt: Vec<bool> = lab.class_map.iter().map(|&c| catalog.is_ood(c)).collect();
        let roi: Vec<bool> = lab.class_map.iter().map(|&c| c != VOID).collect();
        pixels.add(&scores, &gt, &roi);
        for ((&sc, &g), &r) in scores.iter().zip(&gt).zip(&roi) {
            if r {
                if g { ood.push(sc) } else { ind.push(sc) }
            }
        }
        let (inst, ranks, merged) = cluster_with_scores(&pred, &out, &scores, t, &cfg, anomaly_class)?;
        inst_preds.push(
            inst.instances
                .into_iter()
                .zip(ranks)
                .map(|(i, r)| ScoredInstance { pixels: i.pixels, confidence: r })
                .collect::<Vec<_>>(),
        );
        inst_gts.push(
            lab.instances()
                .into_iter()
                .filter(|(_, c, _)| catalog.is_ood(*c))
                .map(|(_, _, px)| px)
                .collect::<Vec<_>>(),
        );
        let merged_gt = lab.with_merged_ood(&catalog);
        openw.add(&merged.seg_class, &merged.seg_instance, &merged_gt.class_map, &merged_gt.instance_map)?;
    }

    let anomaly = match threshold {
        Some(t) => {
            let pixel = pixels.finish()?;
            let total = (pixel.positives + pixel.negatives).max(1) as f64;
            Some(AnomalyReport {
                threshold: t,
                prevalence: pixel.positives as f64 / total,
                mean_score_ood: ood.mean,
                mean_score_ind: ind.mean,
                pixel,
                instance: instance_anomaly_ap(&inst_preds, &inst_gts)?,
                instance_iou_thresholds: INSTANCE_IOU_THRESHOLDS.to_vec(),
                instance_ranking: "mean anomaly score over member pixels",
                open_world: openw.finish(),
            })
        }
        None => None,
    };
    let report = EvalReport {
        split: args.split.name(),
        scorer: args.scorer.name(),
        images: samples.len(),
        fallback_images,
        config: cfg,
        closed_world: ClosedWorld { panoptic: closed.finish(), miou: iou.miou() },
        anomaly,
    };
    write(&args.out, &to_json(&report)?)?;
    Ok(report)
}
