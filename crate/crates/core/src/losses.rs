//! Training objective: Beta evidential NLL, symmetric Dice and mask
//! classification cross-entropy, combined linearly.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::evidence::EvidenceMaps;

/// Targets are clamped into `[ε, 1−ε]` before the Beta log-density: with
/// both concentrations above one the density vanishes at 0 and 1.
pub const DEFAULT_TARGET_EPS: f64 = 1e-3;
pub const DEFAULT_DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_sdice: f64,
    pub lambda_evi: f64,
    pub no_object_coeff: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ce: 2.0,
            lambda_sdice: 5.0,
            lambda_evi: 0.1,
            no_object_coeff: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_ce > 0.0
            && self.lambda_sdice > 0.0
            && self.lambda_evi > 0.0
            && self.no_object_coeff > 0.0
            && self.no_object_coeff <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskLossOptions {
    pub target_eps: f64,
    pub dice_smooth: f64,
}

impl Default for MaskLossOptions {
    fn default() -> Self {
        Self {
            target_eps: DEFAULT_TARGET_EPS,
            dice_smooth: DEFAULT_DICE_SMOOTH,
        }
    }
}

/// Result of Hungarian matching plus the per-mask loss points.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedTargets {
    /// `(predicted mask, ground-truth mask)`.
    pub pairs: Vec<(usize, usize)>,
    pub gt_masks: Vec<Vec<bool>>,
    pub gt_classes: Vec<usize>,
    /// Pixel indices per pair, aligned with `pairs`.
    pub sampled_points: Vec<Vec<usize>>,
}

impl MatchedTargets {
    /// Target class per predicted mask; `None` marks no-object.
    pub fn class_assignments(&self, num_masks: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_masks];
        for &(i, j) in &self.pairs {
            out[i] = Some(self.gt_classes[j]);
        }
        out
    }
}

/// Per-point `−ln Beta(y | α, β)` with `y` clamped into `[ε, 1−ε]`.
pub fn beta_nll_terms(g: &mut Graph, alpha: Var, beta: Var, y: &[f64], eps: f64) -> Result<Var> {
    if g.value(alpha).len() != y.len() || g.shape(alpha) != g.shape(beta) {
        return Err(Error::Dimension {
            op: "beta_nll",
            left: g.shape(alpha).to_vec(),
            right: vec![y.len()],
        });
    }
    let shape = g.shape(alpha).to_vec();
    let yc: Vec<f64> = y.iter().map(|v| v.clamp(eps, 1.0 - eps)).collect();
    let ln_y = g.constant(Tensor::new(shape.clone(), yc.iter().map(|v| v.ln()).collect())?);
    let ln_1my = g.constant(Tensor::new(shape, yc.iter().map(|v| (1.0 - v).ln()).collect())?);

    let total = g.add(alpha, beta)?;
    let lg_total = g.lgamma(total)?;
    let lg_a = g.lgamma(alpha)?;
    let lg_b = g.lgamma(beta)?;
    let am1 = g.add_scalar(alpha, -1.0);
    let bm1 = g.add_scalar(beta, -1.0);
    let t_a = g.mul(am1, ln_y)?;
    let t_b = g.mul(bm1, ln_1my)?;
    let norm = g.sub(lg_total, lg_a)?;
    let norm = g.sub(norm, lg_b)?;
    let ll = g.add(norm, t_a)?;
    let ll = g.add(ll, t_b)?;
    Ok(g.neg(ll))
}

/// Mean Beta negative log-likelihood over the given points; exactly 0 for
/// an empty point set.
pub fn beta_nll(g: &mut Graph, alpha: Var, beta: Var, y: &[f64], eps: f64) -> Result<Var> {
    if y.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let terms = beta_nll_terms(g, alpha, beta, y, eps)?;
    Ok(g.mean(terms))
}

/// `1 − (2·Σp·y + s) / (Σp + Σy + s)`.
pub fn dice_loss(g: &mut Graph, p: Var, y: &[f64], smooth: f64) -> Result<Var> {
    let yt = g.constant(Tensor::new(g.shape(p).to_vec(), y.to_vec())?);
    let py = g.mul(p, yt)?;
    let inter = g.sum(py);
    let num = g.mul_scalar(inter, 2.0);
    let num = g.add_scalar(num, smooth);
    let sp = g.sum(p);
    let den = g.add_scalar(sp, y.iter().sum::<f64>() + smooth);
    let ratio = g.div(num, den)?;
    Ok(g.rsub_scalar(1.0, ratio))
}

/// Value-only Dice loss, used for matching costs.
pub fn dice_value(p: &[f64], y: &[f64], smooth: f64) -> f64 {
    let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let sp: f64 = p.iter().sum();
    let sy: f64 = y.iter().sum();
    1.0 - (2.0 * inter + smooth) / (sp + sy + smooth)
}

/// Mean of the Dice loss of the expected mask against `y` and of its
/// complement `β/(α+β)` against `1 − y`.
pub fn symmetric_dice(g: &mut Graph, alpha: Var, beta: Var, y: &[f64], smooth: f64) -> Result<Var> {
    let total = g.add(alpha, beta)?;
    let p_fg = g.div(alpha, total)?;
    let p_bg = g.div(beta, total)?;
    let y_bg: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let d_fg = dice_loss(g, p_fg, y, smooth)?;
    let d_bg = dice_loss(g, p_bg, &y_bg, smooth)?;
    let s = g.add(d_fg, d_bg)?;
    Ok(g.mul_scalar(s, 0.5))
}

/// Mask-classification cross-entropy over all `N_M` masks. `targets[i]` is
/// the matched class of mask `i` or `None` for no-object (the last logit
/// column); no-object terms are scaled by `no_object_coeff`, and the sum is
/// divided by `N_M`.
pub fn classification_ce(
    g: &mut Graph,
    class_logits: Var,
    targets: &[Option<usize>],
    no_object_coeff: f64,
) -> Result<Var> {
    let (n, cols) = g
        .value(class_logits)
        .dims2()
        .ok_or_else(|| Error::Dimension {
            op: "classification_ce",
            left: g.shape(class_logits).to_vec(),
            right: vec![targets.len()],
        })?;
    if n != targets.len() {
        return Err(Error::Dimension {
            op: "classification_ce",
            left: vec![n, cols],
            right: vec![targets.len()],
        });
    }
    let no_object = cols - 1;
    let mut idx = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for (i, t) in targets.iter().enumerate() {
        match *t {
            Some(c) if c >= no_object => {
                return Err(Error::Index {
                    what: "class id",
                    index: c,
                    len: no_object,
                })
            }
            Some(c) => {
                idx.push(i * cols + c);
                w.push(1.0);
            }
            None => {
                idx.push(i * cols + no_object);
                w.push(no_object_coeff);
            }
        }
    }
    let ls = g.log_softmax(class_logits);
    let picked = g.gather(ls, &idx)?;
    let wv = g.constant(Tensor::vector(w));
    let weighted = g.mul(picked, wv)?;
    let s = g.sum(weighted);
    Ok(g.mul_scalar(s, -1.0 / n as f64))
}

/// Scalar loss terms of one prediction.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub ce: Var,
    pub sdice: Var,
    pub evi: Var,
}

/// Symmetric Dice and evidential NLL of every matched mask on its own
/// sampled points, each averaged over the matched masks.
pub fn mask_losses(
    g: &mut Graph,
    evidence: &EvidenceMaps,
    targets: &MatchedTargets,
    opts: &MaskLossOptions,
) -> Result<(Var, Var)> {
    if targets.pairs.is_empty() {
        let z = g.scalar(0.0);
        return Ok((z, z));
    }
    let num_pixels = g.value(evidence.alpha).dims2().expect("rank 2").1;
    let mut sdice_terms = Vec::with_capacity(targets.pairs.len());
    let mut evi_terms = Vec::with_capacity(targets.pairs.len());
    for (&(i, j), points) in targets.pairs.iter().zip(&targets.sampled_points) {
        let flat: Vec<usize> = points.iter().map(|&p| i * num_pixels + p).collect();
        let a = g.gather(evidence.alpha, &flat)?;
        let b = g.gather(evidence.beta, &flat)?;
        let y: Vec<f64> = points
            .iter()
            .map(|&p| if targets.gt_masks[j][p] { 1.0 } else { 0.0 })
            .collect();
        sdice_terms.push(symmetric_dice(g, a, b, &y, opts.dice_smooth)?);
        evi_terms.push(beta_nll(g, a, b, &y, opts.target_eps)?);
    }
    let inv = 1.0 / targets.pairs.len() as f64;
    let reduce = |g: &mut Graph, terms: &[Var]| -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(g.mul_scalar(acc, inv))
    };
    let sdice = reduce(g, &sdice_terms)?;
    let evi = reduce(g, &evi_terms)?;
    Ok((sdice, evi))
}

/// `λ_CE·L_CE + λ_sDice·L_sDice + λ_evi·L_evi`.
pub fn total_loss(g: &mut Graph, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    let ce = g.mul_scalar(parts.ce, w.lambda_ce);
    let sd = g.mul_scalar(parts.sdice, w.lambda_sdice);
    let ev = g.mul_scalar(parts.evi, w.lambda_evi);
    let s = g.add(ce, sd)?;
    g.add(s, ev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::rng::SplitMix64;

    fn nll(a: &[f64], b: &[f64], y: &[f64]) -> f64 {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(Tensor::vector(a.to_vec())), g.constant(Tensor::vector(b.to_vec())));
        let l = beta_nll(&mut g, va, vb, y, DEFAULT_TARGET_EPS).unwrap();
        g.value(l).item()
    }

    fn sdice(a: &[f64], b: &[f64], y: &[f64]) -> f64 {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(Tensor::vector(a.to_vec())), g.constant(Tensor::vector(b.to_vec())));
        let l = symmetric_dice(&mut g, va, vb, y, 1.0).unwrap();
        g.value(l).item()
    }

    fn dice(p: &[f64], y: &[f64]) -> f64 {
        let mut g = Graph::new();
        let vp = g.constant(Tensor::vector(p.to_vec()));
        let l = dice_loss(&mut g, vp, y, 1.0).unwrap();
        g.value(l).item()
    }

    #[test]
    fn uniform_beta_has_zero_nll() {
        for y in [0.1, 0.5, 0.93] {
            assert!(nll(&[1.0], &[1.0], &[y]).abs() < 1e-14);
        }
    }

    #[test]
    fn beta_nll_closed_form() {
        // Beta(2,3) pdf = 12·y·(1−y)²; at y = 0.2 it is 1.536.
        let v = nll(&[2.0], &[3.0], &[0.2]);
        assert!((v + 1.536f64.ln()).abs() < 1e-12, "{v}");
        assert!((v + 0.429_181_634_725_480).abs() < 1e-12);
    }

    #[test]
    fn beta_nll_empty_is_exact_zero() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![]));
        let l = beta_nll(&mut g, a, a, &[], 1e-3).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn beta_nll_decreases_with_correct_evidence() {
        let eps = DEFAULT_TARGET_EPS;
        let mut prev = f64::INFINITY;
        for k in 1..=100 {
            let a = 1.0 + k as f64 * 0.99;
            let beta = 1.0 + (k % 7) as f64 * 0.1 + 0.5;
            let v = nll(&[a], &[beta], &[1.0 - eps]);
            // Fixed β: compare against the previous α with the same β.
            let v_prev_alpha = nll(&[a - 0.99], &[beta], &[1.0 - eps]);
            assert!(v < v_prev_alpha, "α={a}");
            let w = nll(&[beta], &[a], &[eps]);
            let w_prev = nll(&[beta], &[a - 0.99], &[eps]);
            assert!(w < w_prev);
            prev = prev.min(v);
        }
        assert!(prev.is_finite());
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dice(&[1.0; 4], &[1.0; 4]), 0.0);
        assert!((dice(&[0.5, 0.5], &[1.0, 0.0]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&[0.0; 3], &[0.0; 3]), 0.0);
        assert_eq!(dice_value(&[0.5, 0.5], &[1.0, 0.0], 1.0), dice(&[0.5, 0.5], &[1.0, 0.0]));
    }

    #[test]
    fn symmetric_dice_examples() {
        let y = [1.0, 0.0, 1.0, 0.0];
        let big = 1e6;
        let a: Vec<f64> = y.iter().map(|&v| if v > 0.5 { big } else { 1.0 }).collect();
        let b: Vec<f64> = y.iter().map(|&v| if v > 0.5 { 1.0 } else { big }).collect();
        assert!(sdice(&a, &b, &y) < 1e-5);

        // α = β on a 2×2 grid with two ones: p = 0.5 everywhere, both terms
        // equal 1 − (2·1 + 1)/(2 + 2 + 1) = 0.4.
        let v = sdice(&[3.0; 4], &[3.0; 4], &y);
        assert!((v - 0.4).abs() < 1e-15, "{v}");
    }

    #[test]
    fn symmetry_laws_on_random_draws() {
        let mut rng = SplitMix64::new(77);
        for _ in 0..1000 {
            let n = 1 + rng.below(6) as usize;
            let a: Vec<f64> = (0..n).map(|_| rng.uniform(1.0, 60.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.uniform(1.0, 60.0)).collect();
            let yb: Vec<f64> = (0..n).map(|_| (rng.below(2)) as f64).collect();
            let yb_flip: Vec<f64> = yb.iter().map(|v| 1.0 - v).collect();
            assert!((sdice(&a, &b, &yb) - sdice(&b, &a, &yb_flip)).abs() < 1e-12);
            let yc: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 1.0)).collect();
            let yc_flip: Vec<f64> = yc.iter().map(|v| 1.0 - v).collect();
            assert!((nll(&a, &b, &yc) - nll(&b, &a, &yc_flip)).abs() < 1e-12);
        }
    }

    fn ce(logits: Vec<f64>, rows: usize, t: &[Option<usize>], coeff: f64) -> f64 {
        let cols = logits.len() / rows;
        let mut g = Graph::new();
        let l = g.constant(Tensor::matrix(rows, cols, logits).unwrap());
        let v = classification_ce(&mut g, l, t, coeff).unwrap();
        g.value(v).item()
    }

    #[test]
    fn cross_entropy_examples() {
        let ln4 = 4f64.ln();
        assert!((ce(vec![0.0; 8], 2, &[Some(1), Some(2)], 0.1) - ln4).abs() < 1e-14);
        assert!((ce(vec![0.0; 12], 3, &[None; 3], 0.1) - 0.1 * ln4).abs() < 1e-14);
        let mut onehot = vec![0.0; 8];
        onehot[2] = 1e3;
        onehot[4 + 3] = 1e3;
        assert!(ce(onehot, 2, &[Some(2), None], 0.1) < 1e-6);

        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            classification_ce(&mut g, l, &[Some(3)], 0.1),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn total_loss_is_linear_combination() {
        let mut g = Graph::new();
        let one = g.scalar(1.0);
        let parts = LossParts { ce: one, sdice: one, evi: one };
        let t = total_loss(&mut g, &parts, &LossWeights::default()).unwrap();
        assert!((g.value(t).item() - 7.1).abs() < 1e-14);
        let zero = g.scalar(0.0);
        let parts = LossParts { ce: zero, sdice: zero, evi: zero };
        let t = total_loss(&mut g, &parts, &LossWeights::default()).unwrap();
        assert_eq!(g.value(t).item(), 0.0);
    }

    #[test]
    fn loss_gradients_pass_grad_check() {
        let mut rng = SplitMix64::new(13);
        let n = 6;
        let ab = Tensor::vector((0..2 * n).map(|_| rng.uniform(1.2, 8.0)).collect());
        let y = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let split = |g: &mut Graph, x: Var| -> Result<(Var, Var)> {
            let a = g.gather(x, &(0..n).collect::<Vec<_>>())?;
            let b = g.gather(x, &(n..2 * n).collect::<Vec<_>>())?;
            Ok((a, b))
        };
        let e1 = grad_check(|g, x| { let (a, b) = split(g, x)?; beta_nll(g, a, b, &y, 1e-3) }, &ab, 1e-5).unwrap();
        let e2 = grad_check(|g, x| { let (a, b) = split(g, x)?; symmetric_dice(g, a, b, &y, 1.0) }, &ab, 1e-5).unwrap();
        let logits = Tensor::vector((0..15).map(|_| rng.uniform(-2.0, 2.0)).collect());
        let e3 = grad_check(
            |g, x| {
                let l = g.reshape(x, &[3, 5])?;
                classification_ce(g, l, &[Some(0), None, Some(3)], 0.1)
            },
            &logits,
            1e-5,
        )
        .unwrap();
        let e4 = grad_check(
            |g, x| {
                let a = g.gather(x, &[0])?;
                let b = g.gather(x, &[1])?;
                beta_nll(g, a, b, &[0.3], 1e-3)
            },
            &Tensor::vector(vec![2.5, 3.5]),
            1e-5,
        )
        .unwrap();
        assert!(e1 < 1e-5 && e2 < 1e-5 && e3 < 1e-5 && e4 < 1e-5, "{e1} {e2} {e3} {e4}");
    }
}
