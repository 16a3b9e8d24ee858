//! Mask filtering, per-pixel fusion into a panoptic map, the fused
//! class/mask uncertainty, and the baseline anomaly scorers.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::evidence::EvidenceValues;
use crate::synth::Catalog;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub object_mask_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            object_mask_threshold: 0.5,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.object_mask_threshold > 0.0 && self.object_mask_threshold < 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "object_mask_threshold {} must lie in (0, 1)",
                self.object_mask_threshold
            )))
        }
    }
}

/// Row-wise softmax of `N × (C+1)` class logits.
pub fn class_probabilities(class_logits: &Tensor) -> Vec<Vec<f64>> {
    let (n, _) = class_logits.dims2().expect("rank 2 class logits");
    (0..n)
        .map(|i| {
            let row = class_logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Best known class and its probability; ties go to the lower class id.
fn best_known(probs: &[f64]) -> (usize, f64) {
    let known = &probs[..probs.len() - 1];
    let mut best = (0, known[0]);
    for (c, &p) in known.iter().enumerate().skip(1) {
        if p > best.1 {
            best = (c, p);
        }
    }
    best
}

/// Indices of rejected masks: argmax is no-object, or the winning
/// probability falls below the threshold (equality keeps the mask).
pub fn filter_masks(class_logits: &Tensor, cfg: &FilterConfig) -> Vec<usize> {
    class_probabilities(class_logits)
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let no_obj = p[p.len() - 1];
            let (_, best) = best_known(p);
            no_obj > best || best < cfg.object_mask_threshold
        })
        .map(|(i, _)| i)
        .collect()
}

/// Panoptic prediction with its fused uncertainty map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub width: usize,
    pub height: usize,
    pub seg_class: Vec<u16>,
    /// `mask index + 1` for thing-class masks, 0 otherwise.
    pub seg_instance: Vec<u16>,
    /// `U = −p_C·p_M` per pixel, in `[-1, 0]`.
    pub uncertainty: Vec<f64>,
    /// Winning mask per pixel.
    pub winner: Vec<usize>,
    pub mask_class: Vec<u16>,
    pub mask_confidence: Vec<f64>,
    pub filtered: Vec<usize>,
    /// Set when every mask was filtered and the unfiltered set was used.
    pub fallback: bool,
    /// Pixels whose winning mask has expected membership below 0.5.
    pub weak_pixels: usize,
}

/// Per pixel: the surviving mask with the largest `α` wins (ties to the
/// lower index); `U = −p_C·p_M` with `p_M = α/(α+β)` of the winner and
/// `p_C` its best known-class probability.
pub fn fuse_uncertainty(
    ev: &EvidenceValues,
    class_logits: &Tensor,
    filtered: &[usize],
    catalog: &Catalog,
    width: usize,
    height: usize,
) -> Result<Prediction> {
    let (n, hw) = (ev.num_masks, ev.num_pixels);
    if hw != width * height || class_logits.dims2().map(|d| d.0) != Some(n) {
        return Err(Error::Dimension {
            op: "fuse_uncertainty",
            left: vec![n, hw],
            right: vec![height, width],
        });
    }
    let probs = class_probabilities(class_logits);
    let best: Vec<(usize, f64)> = probs.iter().map(|p| best_known(p)).collect();
    let mut keep: Vec<usize> = (0..n).filter(|i| !filtered.contains(i)).collect();
    let fallback = keep.is_empty();
    if fallback {
        keep = (0..n).collect();
    }
    let (alpha, mask_prob) = (ev.alpha.data(), ev.mask_prob.data());
    let mut out = Prediction {
        width,
        height,
        seg_class: vec![0; hw],
        seg_instance: vec![0; hw],
        uncertainty: vec![0.0; hw],
        winner: vec![0; hw],
        mask_class: best.iter().map(|b| b.0 as u16).collect(),
        mask_confidence: best.iter().map(|b| b.1).collect(),
        filtered: filtered.to_vec(),
        fallback,
        weak_pixels: 0,
    };
    for px in 0..hw {
        let mut w = keep[0];
        for &i in &keep[1..] {
            if alpha[i * hw + px] > alpha[w * hw + px] {
                w = i;
            }
        }
        let p_m = mask_prob[w * hw + px];
        let (class, p_c) = best[w];
        out.winner[px] = w;
        out.seg_class[px] = class as u16;
        out.seg_instance[px] = if catalog.is_thing(class as u16) { w as u16 + 1 } else { 0 };
        out.uncertainty[px] = -p_c * p_m;
        if p_m < 0.5 {
            out.weak_pixels += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    P2f,
    Sml,
    Mm,
    Eam,
    Rba,
    M2a,
}

impl Scorer {
    pub const ALL: [Scorer; 6] = [Scorer::P2f, Scorer::Sml, Scorer::Mm, Scorer::Eam, Scorer::Rba, Scorer::M2a];

    pub fn name(self) -> &'static str {
        match self {
            Scorer::P2f => "p2f",
            Scorer::Sml => "sml",
            Scorer::Mm => "mm",
            Scorer::Eam => "eam",
            Scorer::Rba => "rba",
            Scorer::M2a => "m2a",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Per-pixel class logits `L_c = Σ_i p_i(c)·m_i` over the known classes,
/// `K × (H·W)`.
pub fn pixel_logits(ev: &EvidenceValues, class_logits: &Tensor) -> Vec<Vec<f64>> {
    let probs = class_probabilities(class_logits);
    let k = probs[0].len() - 1;
    let hw = ev.num_pixels;
    let m = ev.mask_prob.data();
    let mut out = vec![vec![0.0; hw]; k];
    for (i, p) in probs.iter().enumerate() {
        let row = &m[i * hw..(i + 1) * hw];
        for (c, lc) in out.iter_mut().enumerate() {
            for (o, &mv) in lc.iter_mut().zip(row) {
                *o += p[c] * mv;
            }
        }
    }
    out
}

/// Per-class mean and standard deviation of the maximum pixel logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn argmax_logit(logits: &[Vec<f64>], px: usize) -> (usize, f64) {
    let mut best = (0, logits[0][px]);
    for (c, l) in logits.iter().enumerate().skip(1) {
        if l[px] > best.1 {
            best = (c, l[px]);
        }
    }
    best
}

/// Accumulates per-class statistics of `max_c L_c` over pixels where `c`
/// wins. Classes that never win get `μ = 0, σ = 1`; zero spread becomes
/// `σ = 1`. Both cases are reported through `log::warn!`.
#[derive(Debug, Clone, Default)]
pub struct LogitStatsAccumulator {
    count: Vec<u64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl LogitStatsAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            count: vec![0; num_classes],
            sum: vec![0.0; num_classes],
            sum_sq: vec![0.0; num_classes],
        }
    }

    pub fn add(&mut self, logits: &[Vec<f64>]) {
        for px in 0..logits[0].len() {
            let (c, v) = argmax_logit(logits, px);
            self.count[c] += 1;
            self.sum[c] += v;
            self.sum_sq[c] += v * v;
        }
    }

    pub fn finish(&self) -> LogitStats {
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for c in 0..self.count.len() {
            if self.count[c] == 0 {
                log::warn!("class {c} never has the largest logit; using mean 0, std 1");
                mean.push(0.0);
                std.push(1.0);
                continue;
            }
            let n = self.count[c] as f64;
            let mu = self.sum[c] / n;
            let var = (self.sum_sq[c] / n - mu * mu).max(0.0);
            let mut s = var.sqrt();
            if s <= 1e-12 {
                log::warn!("class {c} maximum logit has zero spread; using std 1");
                s = 1.0;
            }
            mean.push(mu);
            std.push(s);
        }
        LogitStats { mean, std }
    }
}

/// Statistics over a set of per-image pixel logits.
pub fn collect_logit_stats(images: &[Vec<Vec<f64>>]) -> Result<LogitStats> {
    let first = images.first().ok_or_else(|| Error::Data("no training images for logit statistics".into()))?;
    let mut acc = LogitStatsAccumulator::new(first.len());
    for l in images {
        acc.add(l);
    }
    Ok(acc.finish())
}

/// Anomaly score per pixel, larger meaning more anomalous, for every
/// scorer. `pred` supplies the fused map for `p2f`.
pub fn anomaly_scores(
    kind: Scorer,
    ev: &EvidenceValues,
    class_logits: &Tensor,
    pred: &Prediction,
    stats: Option<&LogitStats>,
) -> Result<Vec<f64>> {
    let hw = ev.num_pixels;
    Ok(match kind {
        Scorer::P2f => pred.uncertainty.clone(),
        Scorer::Mm => {
            let m = ev.mask_prob.data();
            (0..hw)
                .map(|px| {
                    let best = (0..ev.num_masks).map(|i| m[i * hw + px]).fold(f64::NEG_INFINITY, f64::max);
                    -best
                })
                .collect()
        }
        Scorer::Eam => {
            let probs = class_probabilities(class_logits);
            let conf: Vec<f64> = probs.iter().map(|p| best_known(p).1).collect();
            let m = ev.mask_prob.data();
            (0..hw)
                .map(|px| -(0..ev.num_masks).map(|i| m[i * hw + px] * conf[i]).sum::<f64>())
                .collect()
        }
        Scorer::Rba => {
            let l = pixel_logits(ev, class_logits);
            (0..hw).map(|px| -l.iter().map(|lc| lc[px].tanh()).sum::<f64>()).collect()
        }
        Scorer::M2a => {
            let l = pixel_logits(ev, class_logits);
            let m = ev.mask_prob.data();
            (0..hw)
                .map(|px| {
                    let covered = (0..ev.num_masks).any(|i| m[i * hw + px] > 0.5);
                    if covered {
                        1.0 - argmax_logit(&l, px).1
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        Scorer::Sml => {
            let s = stats.ok_or_else(|| {
                Error::Config("scorer sml needs logit statistics; run the stats command first".into())
            })?;
            let l = pixel_logits(ev, class_logits);
            if s.mean.len() != l.len() {
                return Err(Error::Data(format!(
                    "logit statistics cover {} classes, model has {}",
                    s.mean.len(),
                    l.len()
                )));
            }
            (0..hw)
                .map(|px| {
                    let (c, v) = argmax_logit(&l, px);
                    -(v - s.mean[c]) / s.std[c]
                })
                .collect()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: usize, data: Vec<f64>) -> Tensor {
        let cols = data.len() / rows;
        Tensor::matrix(rows, cols, data).unwrap()
    }

    /// Evidence from explicit α, β (`N × HW`).
    fn evidence(n: usize, alpha: Vec<f64>, beta: Vec<f64>) -> EvidenceValues {
        let hw = alpha.len() / n;
        let mp: Vec<f64> = alpha.iter().zip(&beta).map(|(a, b)| a / (a + b)).collect();
        let u: Vec<f64> = alpha.iter().zip(&beta).map(|(a, b)| -(a + b)).collect();
        EvidenceValues {
            num_masks: n,
            num_pixels: hw,
            alpha: Tensor::matrix(n, hw, alpha).unwrap(),
            beta: Tensor::matrix(n, hw, beta).unwrap(),
            mask_prob: Tensor::matrix(n, hw, mp).unwrap(),
            evi_uncertainty: Tensor::matrix(n, hw, u).unwrap(),
        }
    }

    /// Logit row whose softmax gives `p` to class `c` and spreads the rest
    /// evenly over the other `k` columns.
    fn row_with_prob(cols: usize, c: usize, p: f64) -> Vec<f64> {
        let rest = (1.0 - p) / (cols - 1) as f64;
        (0..cols).map(|j| if j == c { p.ln() } else { rest.ln() }).collect()
    }

    #[test]
    fn filtering_rules() {
        let cfg = FilterConfig::default();
        let all_noobj = logits(2, vec![0.0, 0.0, 9.0, 0.0, 0.0, 9.0]);
        assert_eq!(filter_masks(&all_noobj, &cfg), vec![0, 1]);
        let confident = logits(1, row_with_prob(3, 1, 0.9));
        assert!(filter_masks(&confident, &cfg).is_empty());
        // Exactly at threshold: probabilities 0.5 / 0.25 / 0.25 are exact.
        let exact = logits(1, vec![2f64.ln(), 0.0, 0.0]);
        assert_eq!(class_probabilities(&exact)[0][0], 0.5);
        assert!(filter_masks(&exact, &cfg).is_empty());
        let weak = logits(1, row_with_prob(3, 0, 0.45));
        assert_eq!(filter_masks(&weak, &cfg), vec![0]);
    }

    #[test]
    fn hand_evaluated_fusion() {
        let cat = Catalog::default();
        // One mask, α = 9, β = 1, class confidence 0.8 → U = −0.72.
        let ev = evidence(1, vec![9.0], vec![1.0]);
        let cl = logits(1, row_with_prob(5, 2, 0.8));
        let p = fuse_uncertainty(&ev, &cl, &[], &cat, 1, 1).unwrap();
        assert!((p.uncertainty[0] + 0.72).abs() < 1e-12);
        assert_eq!(p.seg_class[0], 2);
        assert_eq!(p.seg_instance[0], 1);
        assert!(!p.fallback);
    }

    #[test]
    fn alpha_alone_picks_the_winner() {
        let cat = Catalog::default();
        // Mask 1 has larger α at pixel 0 but a far less confident class.
        let ev = evidence(2, vec![3.0, 5.0, 8.0, 2.0], vec![1.0, 1.0, 1.0, 1.0]);
        let cl = logits(2, [row_with_prob(5, 0, 0.99), row_with_prob(5, 1, 0.55)].concat());
        let p = fuse_uncertainty(&ev, &cl, &[], &cat, 2, 1).unwrap();
        assert_eq!(p.winner, vec![1, 0]);
        assert_eq!(p.seg_class, vec![1, 0]);
        assert!(p.uncertainty.iter().all(|&u| (-1.0..=0.0).contains(&u) && u > -1.0));
    }

    #[test]
    fn empty_surviving_set_falls_back() {
        let cat = Catalog::default();
        let ev = evidence(2, vec![2.0, 3.0], vec![2.0, 2.0]);
        let cl = logits(2, vec![0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 5.0]);
        let filtered = filter_masks(&cl, &FilterConfig::default());
        assert_eq!(filtered, vec![0, 1]);
        let p = fuse_uncertainty(&ev, &cl, &filtered, &cat, 1, 1).unwrap();
        assert!(p.fallback);
        assert_eq!(p.winner, vec![1]);
    }

    #[test]
    fn fusion_is_permutation_equivariant() {
        let cat = Catalog::default();
        let a = vec![2.0, 7.0, 4.5, 6.0, 3.0, 1.5];
        let b = vec![1.5, 2.0, 3.0, 1.0, 2.5, 4.0];
        let rows = [row_with_prob(5, 2, 0.7), row_with_prob(5, 0, 0.9)];
        let p1 = fuse_uncertainty(&evidence(2, a.clone(), b.clone()), &logits(2, rows.concat()), &[], &cat, 3, 1).unwrap();
        let swap = |v: &[f64]| [&v[3..], &v[..3]].concat();
        let p2 = fuse_uncertainty(
            &evidence(2, swap(&a), swap(&b)),
            &logits(2, [rows[1].clone(), rows[0].clone()].concat()),
            &[],
            &cat,
            3,
            1,
        )
        .unwrap();
        assert_eq!(p1.uncertainty, p2.uncertainty);
        assert_eq!(p1.seg_class, p2.seg_class);
        let relabel: Vec<usize> = p2.winner.iter().map(|w| 1 - w).collect();
        assert_eq!(p1.winner, relabel);
    }

    #[test]
    fn baseline_formulas() {
        let cat = Catalog::default();
        // MM: one mask at p = 0.7.
        let ev = evidence(1, vec![7.0], vec![3.0]);
        let cl = logits(1, row_with_prob(5, 0, 0.6));
        let pred = fuse_uncertainty(&ev, &cl, &[], &cat, 1, 1).unwrap();
        let mm = anomaly_scores(Scorer::Mm, &ev, &cl, &pred, None).unwrap();
        assert!((mm[0] + 0.7).abs() < 1e-15);

        // RbA with every pixel logit zero (membership forced to 0).
        let mut z = evidence(2, vec![2.0; 6], vec![2.0; 6]);
        z.mask_prob = Tensor::zeros(&[2, 3]);
        let cl2 = logits(2, [row_with_prob(5, 0, 0.6), row_with_prob(5, 3, 0.9)].concat());
        let pz = fuse_uncertainty(&z, &cl2, &[], &cat, 3, 1).unwrap();
        assert!(anomaly_scores(Scorer::Rba, &z, &cl2, &pz, None).unwrap().iter().all(|&v| v == 0.0));

        // EAM on two masks and two known classes: p_1 = (0.6, 0.3, 0.1),
        // p_2 = (0.2, 0.7, 0.1); m = (0.75, 0.5) at pixel 0 and (0.25, 0.8)
        // at pixel 1. Scores: −(0.75·0.6 + 0.5·0.7) = −0.8 and
        // −(0.25·0.6 + 0.8·0.7) = −0.71.
        let ev = evidence(2, vec![3.0, 1.0, 1.0, 4.0], vec![1.0, 3.0, 1.0, 1.0]);
        let cl = logits(2, vec![0.6f64.ln(), 0.3f64.ln(), 0.1f64.ln(), 0.2f64.ln(), 0.7f64.ln(), 0.1f64.ln()]);
        let cat2 = Catalog::default();
        let pred = fuse_uncertainty(&ev, &cl, &[], &cat2, 2, 1).unwrap();
        let eam = anomaly_scores(Scorer::Eam, &ev, &cl, &pred, None).unwrap();
        assert!((eam[0] + 0.8).abs() < 1e-12 && (eam[1] + 0.71).abs() < 1e-12, "{eam:?}");

        // Pixel logits for the same case: L_0 = 0.6·0.75 + 0.2·0.5 = 0.55,
        // L_1 = 0.3·0.75 + 0.7·0.5 = 0.575 at pixel 0.
        let l = pixel_logits(&ev, &cl);
        assert!((l[0][0] - 0.55).abs() < 1e-12 && (l[1][0] - 0.575).abs() < 1e-12);
        let rba = anomaly_scores(Scorer::Rba, &ev, &cl, &pred, None).unwrap();
        assert!((rba[0] + 0.55f64.tanh() + 0.575f64.tanh()).abs() < 1e-12);
        let m2a = anomaly_scores(Scorer::M2a, &ev, &cl, &pred, None).unwrap();
        assert!((m2a[0] - 0.425).abs() < 1e-12);
        // Pixel 1 masks: 0.5 (not > 0.5) and 0.8 → covered.
        assert!((m2a[1] - (1.0 - l[1][1].max(l[0][1]))).abs() < 1e-12);

        let stats = LogitStats { mean: vec![0.5, 0.5], std: vec![0.1, 0.05] };
        let sml = anomaly_scores(Scorer::Sml, &ev, &cl, &pred, Some(&stats)).unwrap();
        assert!((sml[0] + (0.575 - 0.5) / 0.05).abs() < 1e-9);
        assert!(matches!(anomaly_scores(Scorer::Sml, &ev, &cl, &pred, None), Err(Error::Config(_))));
    }

    #[test]
    fn logit_statistics() {
        // Class 0 always wins with logit 2 → μ = 2, σ = 0 → 1.
        let single = vec![vec![vec![2.0; 4], vec![1.0; 4]]];
        let s = collect_logit_stats(&single).unwrap();
        assert_eq!(s.mean, vec![2.0, 0.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        // Levels 1 and 3, equally frequent → μ = 2, σ = 1.
        let two = vec![vec![vec![1.0, 3.0, 1.0, 3.0], vec![0.0; 4]]];
        let s = collect_logit_stats(&two).unwrap();
        assert!((s.mean[0] - 2.0).abs() < 1e-15 && (s.std[0] - 1.0).abs() < 1e-15);
        assert!(collect_logit_stats(&[]).is_err());
    }

    #[test]
    fn sharpening_the_winner_keeps_the_argmax() {
        let cat = Catalog::default();
        let ev = evidence(2, vec![3.0, 2.0], vec![1.0, 1.0]);
        let base = [row_with_prob(5, 1, 0.6), row_with_prob(5, 2, 0.8)].concat();
        let p0 = fuse_uncertainty(&ev, &logits(2, base.clone()), &[], &cat, 1, 1).unwrap();
        let mut prev = p0.uncertainty[0];
        for k in [1.5, 2.0, 4.0] {
            let mut l = base.clone();
            l[..5].iter_mut().for_each(|v| *v *= k);
            let p = fuse_uncertainty(&ev, &logits(2, l), &[], &cat, 1, 1).unwrap();
            assert_eq!(p.winner, p0.winner);
            assert!(p.uncertainty[0] < prev);
            prev = p.uncertainty[0];
        }
    }
}
