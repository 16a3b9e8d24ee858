//! Anomaly instances from the fused uncertainty: threshold, cluster the
//! candidate pixels' embeddings with cosine DBSCAN, relabel clusters.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::inference::Prediction;

/// First instance id used for anomaly clusters; mask-derived ids stay below.
pub const ANOMALY_INSTANCE_BASE: u16 = 1000;
pub const NOISE: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterConfig {
    pub k_sigma: f64,
    pub eps: f64,
    pub min_samples: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k_sigma: 2.0,
            eps: 0.04,
            min_samples: 17,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps > 0.0 && self.min_samples >= 1 && self.k_sigma.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid clustering settings {self:?}")))
        }
    }
}

/// Streaming mean and population variance (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn extend(&mut self, xs: &[f64]) {
        xs.iter().for_each(|&x| self.push(x));
    }

    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).sqrt()
        }
    }
}

/// `t = mean + k_sigma·std` of in-distribution uncertainties.
pub fn calibrate_threshold(moments: &Moments, k_sigma: f64) -> Result<f64> {
    if moments.count == 0 {
        return Err(Error::Data("no uncertainty values to calibrate on".into()));
    }
    let s = moments.std();
    if s == 0.0 {
        log::warn!("uncertainty has zero spread; threshold equals the mean");
    }
    Ok(moments.mean + k_sigma * s)
}

/// Pixels with `U > t`, ascending.
pub fn select_uncertain(u: &[f64], t: f64) -> Vec<usize> {
    u.iter().enumerate().filter(|(_, &v)| v > t).map(|(i, _)| i).collect()
}

/// Unit vectors; `None` for zero-norm (or non-finite) points.
fn normalized(points: &[Vec<f64>]) -> Vec<Option<Vec<f64>>> {
    points
        .iter()
        .map(|p| {
            let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            (n > 0.0 && n.is_finite()).then(|| p.iter().map(|v| v / n).collect())
        })
        .collect()
}

/// `1 − cos(u, v)` for unit vectors.
fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    1.0 - u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
}

/// DBSCAN under cosine distance. Points are visited in index order and
/// clusters expand breadth-first in index order, so labels are
/// deterministic; a border point joins the first cluster reaching it.
/// Neighborhoods are inclusive (`d ≤ eps`) and contain the point itself.
/// Zero-norm points are always noise. Returns a label per point, `-1`
/// for noise, clusters numbered from 0.
pub fn dbscan_cosine(points: &[Vec<f64>], eps: f64, min_samples: usize) -> Vec<i32> {
    let unit = normalized(points);
    let n = points.len();
    let neighbors = |i: usize| -> Vec<usize> {
        let Some(u) = &unit[i] else { return Vec::new() };
        (0..n)
            .filter(|&j| unit[j].as_ref().is_some_and(|v| cosine_distance(u, v) <= eps))
            .collect()
    };
    const UNSEEN: i32 = -2;
    let mut labels = vec![UNSEEN; n];
    let mut next = 0;
    for i in 0..n {
        if labels[i] != UNSEEN {
            continue;
        }
        let nb = neighbors(i);
        if nb.len() < min_samples {
            labels[i] = NOISE;
            continue;
        }
        let c = next;
        next += 1;
        labels[i] = c;
        let mut queue = std::collections::VecDeque::from(nb);
        while let Some(j) = queue.pop_front() {
            if labels[j] == NOISE {
                labels[j] = c;
            }
            if labels[j] != UNSEEN {
                continue;
            }
            labels[j] = c;
            let nbj = neighbors(j);
            if nbj.len() >= min_samples {
                queue.extend(nbj);
            }
        }
    }
    labels
}

/// Embedding columns of `features` (`E × HW`) at the given pixels.
pub fn gather_embeddings(features: &Tensor, pixels: &[usize]) -> Vec<Vec<f64>> {
    let (e, hw) = features.dims2().expect("rank 2 embeddings");
    let d = features.data();
    pixels.iter().map(|&p| (0..e).map(|k| d[k * hw + p]).collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyInstance {
    pub id: u16,
    pub pixels: Vec<usize>,
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnomalyInstances {
    pub instances: Vec<AnomalyInstance>,
    pub outliers_reassigned: usize,
}

/// Turns every cluster into an anomaly instance of `anomaly_class`, with
/// confidence `1 + mean(U)` over its pixels clamped to `[0, 1]`. Noise
/// pixels keep their original class and instance.
pub fn finalize_instances(
    selected: &[usize],
    labels: &[i32],
    pred: &Prediction,
    anomaly_class: u16,
) -> Result<(AnomalyInstances, Prediction)> {
    if selected.len() != labels.len() {
        return Err(Error::Dimension {
            op: "finalize_instances",
            left: vec![selected.len()],
            right: vec![labels.len()],
        });
    }
    let num = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); num];
    let mut outliers = 0;
    for (&px, &l) in selected.iter().zip(labels) {
        if l < 0 {
            outliers += 1;
        } else {
            groups[l as usize].push(px);
        }
    }
    let mut out = pred.clone();
    let mut instances = Vec::new();
    for (k, pixels) in groups.into_iter().enumerate() {
        if pixels.is_empty() {
            continue;
        }
        let id = ANOMALY_INSTANCE_BASE + k as u16;
        let mean_u = pixels.iter().map(|&p| pred.uncertainty[p]).sum::<f64>() / pixels.len() as f64;
        for &p in &pixels {
            out.seg_class[p] = anomaly_class;
            out.seg_instance[p] = id;
        }
        instances.push(AnomalyInstance {
            id,
            pixels,
            confidence: (1.0 + mean_u).clamp(0.0, 1.0),
        });
    }
    Ok((
        AnomalyInstances {
            instances,
            outliers_reassigned: outliers,
        },
        out,
    ))
}

/// Threshold, cluster and relabel in one call.
pub fn cluster_anomalies(
    pred: &Prediction,
    embeddings: &Tensor,
    threshold: f64,
    cfg: &ClusterConfig,
    anomaly_class: u16,
) -> Result<(AnomalyInstances, Prediction)> {
    let selected = select_uncertain(&pred.uncertainty, threshold);
    let pts = gather_embeddings(embeddings, &selected);
    let labels = dbscan_cosine(&pts, cfg.eps, cfg.min_samples);
    finalize_instances(&selected, &labels, pred, anomaly_class)
}
