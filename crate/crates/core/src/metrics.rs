//! Panoptic quality, mean IoU, pixel-level anomaly AP / FPR95 and
//! instance-level anomaly AP.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::synth::VOID;

// ---- panoptic quality -------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

impl ClassCounts {
    fn merge(&mut self, o: &ClassCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.iou_sum += o.iou_sum;
    }

    /// `SQ = ΣIoU/TP`, `RQ = TP/(TP + ½FP + ½FN)`, `PQ = SQ·RQ`; all zero
    /// when there is nothing to count.
    pub fn quality(&self) -> Quality {
        let denom = self.tp as f64 + 0.5 * (self.fp + self.fn_) as f64;
        if self.tp == 0 || denom == 0.0 {
            return Quality { pq: 0.0, sq: 0.0, rq: 0.0 };
        }
        let sq = self.iou_sum / self.tp as f64;
        let rq = self.tp as f64 / denom;
        Quality { pq: sq * rq, sq, rq }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PanopticResult {
    /// Over segments pooled across classes.
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Unweighted mean of per-class PQ over classes with any segment.
    pub class_mean_pq: f64,
    pub per_class: BTreeMap<u16, ClassQuality>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassQuality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// Accumulates PQ counts over images. Ground-truth pixels whose class is
/// void or outside the class set are ignored: they leave IoU denominators,
/// and a predicted segment lying mostly on them is not a false positive.
#[derive(Debug, Clone)]
pub struct PanopticAccumulator {
    classes: Vec<u16>,
    counts: BTreeMap<u16, ClassCounts>,
}

impl PanopticAccumulator {
    pub fn new(classes: &[u16]) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::InvalidArgument("panoptic quality needs a non-empty class set".into()));
        }
        Ok(Self {
            classes: classes.to_vec(),
            counts: classes.iter().map(|&c| (c, ClassCounts::default())).collect(),
        })
    }

    pub fn add(&mut self, pred_class: &[u16], pred_inst: &[u16], gt_class: &[u16], gt_inst: &[u16]) -> Result<()> {
        let n = gt_class.len();
        if [pred_class.len(), pred_inst.len(), gt_inst.len()].iter().any(|&l| l != n) {
            return Err(Error::Dimension {
                op: "panoptic_quality",
                left: vec![pred_class.len(), pred_inst.len()],
                right: vec![gt_class.len(), gt_inst.len()],
            });
        }
        let known = |c: u16| self.classes.contains(&c);
        let mut gt_area: BTreeMap<(u16, u16), u64> = BTreeMap::new();
        let mut pred_area: BTreeMap<(u16, u16), u64> = BTreeMap::new();
        let mut pred_void: BTreeMap<(u16, u16), u64> = BTreeMap::new();
        let mut inter: BTreeMap<((u16, u16), (u16, u16)), u64> = BTreeMap::new();
        for p in 0..n {
            let g = (gt_class[p], gt_inst[p]);
            let q = (pred_class[p], pred_inst[p]);
            let g_ok = g.0 != VOID && known(g.0);
            if g_ok {
                *gt_area.entry(g).or_default() += 1;
            }
            if known(q.0) {
                if g_ok {
                    *pred_area.entry(q).or_default() += 1;
                    if g.0 == q.0 {
                        *inter.entry((g, q)).or_default() += 1;
                    }
                } else {
                    *pred_void.entry(q).or_default() += 1;
                }
            }
        }
        let mut gt_hit = BTreeMap::new();
        let mut pred_hit = BTreeMap::new();
        for (&(g, q), &i) in &inter {
            let union = gt_area[&g] + pred_area[&q] - i;
            let iou = i as f64 / union as f64;
            if iou > 0.5 {
                let c = self.counts.get_mut(&g.0).expect("known class");
                c.tp += 1;
                c.iou_sum += iou;
                gt_hit.insert(g, ());
                pred_hit.insert(q, ());
            }
        }
        for &g in gt_area.keys() {
            if !gt_hit.contains_key(&g) {
                self.counts.get_mut(&g.0).expect("known class").fn_ += 1;
            }
        }
        let mut all_pred: BTreeMap<(u16, u16), (u64, u64)> = BTreeMap::new();
        for (&q, &a) in &pred_area {
            all_pred.entry(q).or_default().0 = a;
        }
        for (&q, &v) in &pred_void {
            all_pred.entry(q).or_default().1 = v;
        }
        for (q, (inside, ignored)) in all_pred {
            if pred_hit.contains_key(&q) {
                continue;
            }
            // Mostly on ignored pixels: neither matched nor penalized.
            if ignored * 2 > inside + ignored {
                continue;
            }
            self.counts.get_mut(&q.0).expect("known class").fp += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &PanopticAccumulator) {
        for (c, k) in &other.counts {
            self.counts.entry(*c).or_default().merge(k);
        }
    }

    pub fn finish(&self) -> PanopticResult {
        let mut total = ClassCounts::default();
        let mut per_class = BTreeMap::new();
        let mut pq_sum = 0.0;
        let mut active = 0;
        for (&c, k) in &self.counts {
            total.merge(k);
            let q = k.quality();
            if k.tp + k.fp + k.fn_ > 0 {
                pq_sum += q.pq;
                active += 1;
            }
            per_class.insert(c, ClassQuality { pq: q.pq, sq: q.sq, rq: q.rq, tp: k.tp, fp: k.fp, fn_: k.fn_ });
        }
        let q = total.quality();
        PanopticResult {
            pq: q.pq,
            sq: q.sq,
            rq: q.rq,
            tp: total.tp,
            fp: total.fp,
            fn_: total.fn_,
            class_mean_pq: if active == 0 { 0.0 } else { pq_sum / active as f64 },
            per_class,
        }
    }
}

/// PQ of a single image.
pub fn panoptic_quality(
    pred_class: &[u16],
    pred_inst: &[u16],
    gt_class: &[u16],
    gt_inst: &[u16],
    classes: &[u16],
) -> Result<PanopticResult> {
    let mut acc = PanopticAccumulator::new(classes)?;
    acc.add(pred_class, pred_inst, gt_class, gt_inst)?;
    Ok(acc.finish())
}

// ---- mean IoU ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct IouAccumulator {
    classes: Vec<u16>,
    inter: Vec<u64>,
    union: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(classes: &[u16]) -> Self {
        Self {
            classes: classes.to_vec(),
            inter: vec![0; classes.len()],
            union: vec![0; classes.len()],
        }
    }

    /// Void ground truth is skipped.
    pub fn add(&mut self, pred: &[u16], gt: &[u16]) {
        for (&p, &g) in pred.iter().zip(gt) {
            if g == VOID {
                continue;
            }
            for (k, &c) in self.classes.iter().enumerate() {
                let (a, b) = (p == c, g == c);
                if a && b {
                    self.inter[k] += 1;
                }
                if a || b {
                    self.union[k] += 1;
                }
            }
        }
    }

    /// Mean over classes with a non-empty union.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self
            .inter
            .iter()
            .zip(&self.union)
            .filter(|(_, &u)| u > 0)
            .map(|(&i, &u)| i as f64 / u as f64)
            .collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }
}

// ---- pixel anomaly metrics --------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub score: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PixelAnomalyResult {
    pub ap: f64,
    pub fpr_at_95tpr: f64,
    pub positives: u64,
    pub negatives: u64,
    /// One point per distinct score, thresholds descending.
    #[serde(skip)]
    pub curve: Vec<CurvePoint>,
}

/// Scores and labels pooled over images (region of interest applied).
#[derive(Debug, Clone, Default)]
pub struct PixelAccumulator {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl PixelAccumulator {
    pub fn add(&mut self, scores: &[f64], gt_anomaly: &[bool], roi: &[bool]) {
        for ((&s, &g), &r) in scores.iter().zip(gt_anomaly).zip(roi) {
            if r {
                self.scores.push(s);
                self.labels.push(g);
            }
        }
    }

    pub fn finish(&self) -> Result<PixelAnomalyResult> {
        pixel_anomaly_metrics(&self.scores, &self.labels, &vec![true; self.scores.len()])
    }
}

/// AP as `Σ (R_i − R_{i−1})·P_i` over distinct thresholds (tied scores
/// enter together), and the FPR at the first threshold, sweeping
/// downward, whose TPR reaches 0.95. Higher scores mean more anomalous.
pub fn pixel_anomaly_metrics(scores: &[f64], gt_anomaly: &[bool], roi: &[bool]) -> Result<PixelAnomalyResult> {
    if scores.len() != gt_anomaly.len() || scores.len() != roi.len() {
        return Err(Error::Dimension {
            op: "pixel_anomaly_metrics",
            left: vec![scores.len()],
            right: vec![gt_anomaly.len(), roi.len()],
        });
    }
    let mut items: Vec<(f64, bool)> = scores
        .iter()
        .zip(gt_anomaly)
        .zip(roi)
        .filter(|(_, &r)| r)
        .map(|((&s, &g), _)| (s, g))
        .collect();
    if let Some((s, _)) = items.iter().find(|(s, _)| !s.is_finite()) {
        return Err(Error::NonFinite(format!("anomaly score {s}")));
    }
    let pos = items.iter().filter(|x| x.1).count() as u64;
    let neg = items.len() as u64 - pos;
    if pos == 0 {
        return Err(Error::Data("no anomalous pixels inside the region of interest".into()));
    }
    if neg == 0 {
        return Err(Error::Data("no in-distribution pixels inside the region of interest".into()));
    }
    items.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut fpr95 = None;
    let mut curve = Vec::new();
    let mut k = 0;
    while k < items.len() {
        let s = items[k].0;
        while k < items.len() && items[k].0 == s {
            if items[k].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        let fpr = fp as f64 / neg as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        if fpr95.is_none() && recall >= 0.95 {
            fpr95 = Some(fpr);
        }
        curve.push(CurvePoint { score: s, tpr: recall, fpr, precision });
    }
    Ok(PixelAnomalyResult {
        ap,
        fpr_at_95tpr: fpr95.expect("recall reaches 1 at the lowest threshold"),
        positives: pos,
        negatives: neg,
        curve,
    })
}

// ---- instance anomaly AP ----------------------------------------------------

/// Pixel set (sorted ascending) with a confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstance {
    pub pixels: Vec<usize>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceMatch {
    pub image: usize,
    pub prediction: usize,
    pub ground_truth: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceAnomalyResult {
    /// Mean AP over IoU thresholds 0.50, 0.55, …, 0.95.
    pub ap: f64,
    pub ap50: f64,
    pub num_predictions: usize,
    pub num_ground_truth: usize,
    /// Matches at the 0.5 threshold.
    #[serde(skip)]
    pub matches: Vec<InstanceMatch>,
}

/// IoU of two ascending pixel lists.
pub fn iou_sorted(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub const INSTANCE_IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Greedy matching in descending confidence (ties: image, then
/// prediction index); each prediction takes the unmatched ground truth of
/// its image with the highest IoU above `tau`. Returns AP and the matches.
fn ap_at(preds: &[Vec<ScoredInstance>], gts: &[Vec<Vec<usize>>], tau: f64) -> (f64, Vec<InstanceMatch>) {
    let total_gt: usize = gts.iter().map(Vec::len).sum();
    let mut order: Vec<(usize, usize)> = preds
        .iter()
        .enumerate()
        .flat_map(|(im, ps)| (0..ps.len()).map(move |k| (im, k)))
        .collect();
    order.sort_by(|a, b| {
        preds[b.0][b.1]
            .confidence
            .total_cmp(&preds[a.0][a.1].confidence)
            .then(a.cmp(b))
    });
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut matches = Vec::new();
    for (im, k) in order {
        seen += 1;
        let p = &preds[im][k];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[im].iter().enumerate() {
            if taken[im][j] {
                continue;
            }
            let iou = iou_sorted(&p.pixels, g);
            if iou > tau && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            taken[im][j] = true;
            tp += 1;
            ap += (1.0 / total_gt as f64) * (tp as f64 / seen as f64);
            matches.push(InstanceMatch { image: im, prediction: k, ground_truth: j, iou });
        }
    }
    (ap, matches)
}

/// `preds[i]` and `gts[i]` belong to image `i`. With no ground truth at
/// all the AP is 0.
pub fn instance_anomaly_ap(preds: &[Vec<ScoredInstance>], gts: &[Vec<Vec<usize>>]) -> Result<InstanceAnomalyResult> {
    if preds.len() != gts.len() {
        return Err(Error::Dimension {
            op: "instance_anomaly_ap",
            left: vec![preds.len()],
            right: vec![gts.len()],
        });
    }
    if let Some(p) = preds.iter().flatten().find(|p| !p.confidence.is_finite()) {
        return Err(Error::NonFinite(format!("instance confidence {}", p.confidence)));
    }
    let num_ground_truth = gts.iter().map(Vec::len).sum();
    let num_predictions = preds.iter().map(Vec::len).sum();
    if num_ground_truth == 0 {
        return Ok(InstanceAnomalyResult { ap: 0.0, ap50: 0.0, num_predictions, num_ground_truth, matches: Vec::new() });
    }
    let (ap50, matches) = ap_at(preds, gts, 0.5);
    let ap = INSTANCE_IOU_THRESHOLDS.iter().map(|&t| ap_at(preds, gts, t).0).sum::<f64>()
        / INSTANCE_IOU_THRESHOLDS.len() as f64;
    Ok(InstanceAnomalyResult { ap, ap50, num_predictions, num_ground_truth, matches })
}
