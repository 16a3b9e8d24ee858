use std::collections::VecDeque;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::evidence::EvidenceValues;
use crate::losses::{classification_ce, mask_losses, total_loss, LossParts, LossWeights, MaskLossOptions, MatchedTargets};
use crate::matching::{build_cost, evidential_sample, hungarian, uniform_sample};
use crate::rng::SplitMix64;
use crate::synth::{to_binary_masks, Catalog, Sample, VOID};

use super::{forward, AdamW, ModelParams, OptimConfig};

const BATCH_STREAM: u64 = 20;
const POINT_STREAM: u64 = 21;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Loss points per matched mask; also the size of the matching sample.
    pub point_budget: usize,
    pub hflip: bool,
    /// Steps per window when tracking the best checkpoint.
    pub best_window: usize,
    pub weights: LossWeights,
    pub mask: MaskLossOptions,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 8,
            point_budget: 1024,
            hflip: true,
            best_window: 100,
            weights: LossWeights::default(),
            mask: MaskLossOptions::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.best_window == 0 {
            return Err(Error::Config("batch_size and best_window must be positive".into()));
        }
        if self.point_budget < 4 {
            return Err(Error::Config(format!("point_budget {} is below 4", self.point_budget)));
        }
        self.weights.validate()?;
        self.optim.validate()
    }
}

/// Loss values of one step, measured before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub ce: f64,
    pub sdice: f64,
    pub evi: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Supervised pixels: everything except void and held-out classes.
fn supervised_pixels(sample: &Sample, catalog: &Catalog) -> Vec<usize> {
    sample
        .label
        .class_map
        .iter()
        .enumerate()
        .filter(|(_, &c)| c != VOID && !catalog.is_ood(c))
        .map(|(p, _)| p)
        .collect()
}

/// Matches predictions to the sample's ground-truth masks and draws the
/// loss points of every matched mask.
pub fn prepare_targets(
    values: &EvidenceValues,
    class_logits: &Tensor,
    sample: &Sample,
    catalog: &Catalog,
    cfg: &TrainConfig,
    rng: &mut SplitMix64,
) -> Result<MatchedTargets> {
    let gt = to_binary_masks(&sample.label, catalog);
    let valid = supervised_pixels(sample, catalog);
    if gt.is_empty() || valid.is_empty() {
        return Ok(MatchedTargets {
            pairs: Vec::new(),
            gt_masks: gt.masks,
            gt_classes: gt.classes,
            sampled_points: Vec::new(),
        });
    }
    let sample_px: Vec<usize> = uniform_sample(valid.len(), cfg.point_budget, rng)
        .into_iter()
        .map(|k| valid[k])
        .collect();
    let cost = build_cost(
        &values.mask_prob,
        class_logits,
        &gt.masks,
        &gt.classes,
        &sample_px,
        &cfg.weights,
        cfg.mask.dice_smooth,
    )?;
    let pairs = hungarian(&cost);
    let mut sampled_points = Vec::with_capacity(pairs.len());
    for &(i, _) in &pairs {
        let row = values.evi_uncertainty.row(i);
        let unc: Vec<f64> = valid.iter().map(|&p| row[p]).collect();
        let picked = evidential_sample(&unc, cfg.point_budget, rng)?;
        sampled_points.push(picked.into_iter().map(|k| valid[k]).collect());
    }
    Ok(MatchedTargets {
        pairs,
        gt_masks: gt.masks,
        gt_classes: gt.classes,
        sampled_points,
    })
}

/// Builds the weighted training objective for one image against fixed
/// targets. Returns the individual terms and the total.
pub fn forward_losses(
    g: &mut Graph,
    params: &ModelParams,
    vars: &[Var],
    image: &Tensor,
    targets: &MatchedTargets,
    cfg: &TrainConfig,
) -> Result<(LossParts, Var)> {
    let out = forward(g, &params.config, vars, image)?;
    let assign = targets.class_assignments(params.config.num_queries);
    let ce = classification_ce(g, out.queries.class_logits, &assign, cfg.weights.no_object_coeff)?;
    let (sdice, evi) = mask_losses(g, &out.evidence, targets, &cfg.mask)?;
    let parts = LossParts { ce, sdice, evi };
    let total = total_loss(g, &parts, &cfg.weights)?;
    Ok((parts, total))
}

/// One optimizer step over `batch`. The batch loss is the mean of the
/// per-image objectives; gradients are accumulated in batch order.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut AdamW,
    batch: &[Sample],
    catalog: &Catalog,
    cfg: &TrainConfig,
    rng: &mut SplitMix64,
    step: usize,
) -> Result<StepLog> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut grads: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
    let mut log = StepLog { step, ce: 0.0, sdice: 0.0, evi: 0.0, total: 0.0, grad_norm: 0.0 };
    for sample in batch {
        let image = sample.image.to_tensor();
        let mut g = Graph::new();
        let vars = params.bind(&mut g, true);
        // Parameters and images are finite here, so a domain failure in the
        // forward pass means activations overflowed.
        let out = forward(&mut g, &params.config, &vars, &image).map_err(|e| match e {
            Error::Domain { op, detail } => Error::NonFinite(format!("forward pass at step {step}: {op}: {detail}")),
            e => e,
        })?;
        let values = out.evidence.values(&g);
        let logits = g.value(out.queries.class_logits).clone();
        let targets = prepare_targets(&values, &logits, sample, catalog, cfg, rng)?;

        let assign = targets.class_assignments(params.config.num_queries);
        let ce = classification_ce(&mut g, out.queries.class_logits, &assign, cfg.weights.no_object_coeff)?;
        let (sdice, evi) = mask_losses(&mut g, &out.evidence, &targets, &cfg.mask)?;
        let parts = LossParts { ce, sdice, evi };
        let total = total_loss(&mut g, &parts, &cfg.weights)?;
        for (name, v) in [("ce", ce), ("sdice", sdice), ("evi", evi), ("total", total)] {
            let x = g.value(v).item();
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("loss term {name} = {x} at step {step}")));
            }
        }
        log.ce += inv * g.value(ce).item();
        log.sdice += inv * g.value(sdice).item();
        log.evi += inv * g.value(evi).item();
        log.total += inv * g.value(total).item();

        let gr = g.backward(total)?;
        for ((acc, &v), t) in grads.iter_mut().zip(&vars).zip(&params.tensors) {
            let gv = gr.get_or_zeros(v, t.len());
            acc.iter_mut().zip(gv).for_each(|(a, x)| *a += inv * x);
        }
    }
    if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of {} at step {step}", params.names[i])));
    }
    log.grad_norm = opt.update(params, grads);
    if let Some(i) = params.tensors.iter().position(|t| !t.all_finite()) {
        return Err(Error::NonFinite(format!("parameter {} after step {step}", params.names[i])));
    }
    Ok(log)
}

/// Training loop state: parameters, optimizer and best-window tracking.
pub struct Trainer<'a> {
    pub params: ModelParams,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    data: &'a [Sample],
    catalog: &'a Catalog,
    step: usize,
    window: VecDeque<f64>,
    best: Option<(f64, ModelParams)>,
}

impl<'a> Trainer<'a> {
    pub fn new(params: ModelParams, cfg: TrainConfig, data: &'a [Sample], catalog: &'a Catalog) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let opt = AdamW::new(cfg.optim, &params);
        Ok(Self {
            params,
            opt,
            cfg,
            data,
            catalog,
            step: 0,
            window: VecDeque::new(),
            best: None,
        })
    }

    /// Batch indices and flip flags for `step`.
    fn batch_for(&self, step: usize) -> Vec<Sample> {
        let mut rng = SplitMix64::keyed(self.cfg.seed, BATCH_STREAM, step as u64);
        let pool: Vec<usize> = (0..self.data.len()).collect();
        let k = self.cfg.batch_size.min(self.data.len());
        let mut picks = rng.sample_without_replacement(&pool, k);
        while picks.len() < self.cfg.batch_size {
            picks.push(rng.below(self.data.len() as u64) as usize);
        }
        picks
            .into_iter()
            .map(|i| {
                let flip = self.cfg.hflip && rng.below(2) == 1;
                if flip {
                    self.data[i].hflip()
                } else {
                    self.data[i].clone()
                }
            })
            .collect()
    }

    pub fn step(&mut self) -> Result<StepLog> {
        let batch = self.batch_for(self.step);
        let mut rng = SplitMix64::keyed(self.cfg.seed, POINT_STREAM, self.step as u64);
        let log = train_step(&mut self.params, &mut self.opt, &batch, self.catalog, &self.cfg, &mut rng, self.step)?;
        self.step += 1;
        self.window.push_back(log.total);
        if self.window.len() > self.cfg.best_window {
            self.window.pop_front();
        }
        if self.step % self.cfg.best_window == 0 {
            let mean = self.window.iter().sum::<f64>() / self.window.len() as f64;
            if self.best.as_ref().is_none_or(|(b, _)| mean < *b) {
                self.best = Some((mean, self.params.clone()));
            }
        }
        Ok(log)
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Parameters at the end of the window with the lowest mean training
    /// loss; the current parameters if no window has completed.
    pub fn best(&self) -> &ModelParams {
        self.best.as_ref().map_or(&self.params, |(_, p)| p)
    }
}
