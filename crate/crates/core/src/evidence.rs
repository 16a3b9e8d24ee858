//! Beta-prior mask head.
//!
//! Every mask query carries two embedding rows. Their dot products with the
//! per-pixel embeddings, passed through `softplus(·) + 1`, give the Beta
//! concentrations `α` (evidence for membership) and `β` (evidence against)
//! of every pixel/mask pair. Both are strictly greater than one, so the
//! expected mask `α / (α + β)` lies in the open unit interval and the
//! evidential uncertainty `−(α + β)` is always below −2.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `E × (H·W)` per-pixel embeddings, pixels row-major.
#[derive(Debug, Clone, Copy)]
pub struct PixelEmbeddings {
    pub features: Var,
}

/// Per-query outputs of the mask MLP.
#[derive(Debug, Clone, Copy)]
pub struct MaskQueries {
    /// `N_M × E`
    pub alpha_embed: Var,
    /// `N_M × E`
    pub beta_embed: Var,
    /// `N_M × (C+1)`; the last column is the no-object class.
    pub class_logits: Var,
}

/// Graph handles to the per-mask evidence fields, all `N_M × (H·W)`.
#[derive(Debug, Clone, Copy)]
pub struct EvidenceMaps {
    pub alpha: Var,
    pub beta: Var,
    pub mask_prob: Var,
    pub evi_uncertainty: Var,
}

/// Detached copy of [`EvidenceMaps`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceValues {
    pub num_masks: usize,
    pub num_pixels: usize,
    pub alpha: Tensor,
    pub beta: Tensor,
    pub mask_prob: Tensor,
    pub evi_uncertainty: Tensor,
}

impl EvidenceMaps {
    pub fn values(&self, g: &Graph) -> EvidenceValues {
        let (num_masks, num_pixels) = g.value(self.alpha).dims2().expect("rank 2");
        EvidenceValues {
            num_masks,
            num_pixels,
            alpha: g.value(self.alpha).clone(),
            beta: g.value(self.beta).clone(),
            mask_prob: g.value(self.mask_prob).clone(),
            evi_uncertainty: g.value(self.evi_uncertainty).clone(),
        }
    }
}

/// `softplus(Q · F_E) + 1` for both concentration fields, then the expected
/// mask and evidential uncertainty.
pub fn compute_evidence(
    g: &mut Graph,
    queries: &MaskQueries,
    pixels: &PixelEmbeddings,
) -> Result<EvidenceMaps> {
    let a_logits = g.matmul(queries.alpha_embed, pixels.features)?;
    let b_logits = g.matmul(queries.beta_embed, pixels.features)?;
    let a_sp = g.softplus(a_logits);
    let alpha = g.add_scalar(a_sp, 1.0);
    let b_sp = g.softplus(b_logits);
    let beta = g.add_scalar(b_sp, 1.0);
    let mask_prob = expected_mask(g, alpha, beta)?;
    let total = g.add(alpha, beta)?;
    let evi_uncertainty = g.neg(total);
    Ok(EvidenceMaps {
        alpha,
        beta,
        mask_prob,
        evi_uncertainty,
    })
}

/// Mean of `Beta(α, β)`: `α / (α + β)`.
pub fn expected_mask(g: &mut Graph, alpha: Var, beta: Var) -> Result<Var> {
    for (name, v) in [("alpha", alpha), ("beta", beta)] {
        if let Some(&bad) = g.value(v).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "expected_mask",
                detail: format!("{name} must be positive, got {bad}"),
            });
        }
    }
    let total = g.add(alpha, beta)?;
    g.div(alpha, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::rng::SplitMix64;

    fn mat(r: usize, c: usize, v: Vec<f64>) -> Tensor {
        Tensor::matrix(r, c, v).unwrap()
    }

    #[test]
    fn zero_logit_gives_one_plus_ln2() {
        let mut g = Graph::new();
        let q = MaskQueries {
            alpha_embed: g.constant(Tensor::zeros(&[1, 2])),
            beta_embed: g.constant(Tensor::zeros(&[1, 2])),
            class_logits: g.constant(Tensor::zeros(&[1, 3])),
        };
        let px = PixelEmbeddings {
            features: g.constant(mat(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])),
        };
        let ev = compute_evidence(&mut g, &q, &px).unwrap();
        for &a in g.value(ev.alpha).data() {
            assert!((a - (1.0 + 2f64.ln())).abs() < 1e-12);
        }
        for &p in g.value(ev.mask_prob).data() {
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn expected_mask_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![3.0, 2.0, 9.0, 1.5, 4.0]));
        let b = g.constant(Tensor::vector(vec![1.000001, 3.0, 1.0, 4.5, 4.0]));
        let m = expected_mask(&mut g, a, b).unwrap();
        let v = g.value(m).data();
        assert!((v[0] - 0.75).abs() < 1e-6);
        assert!((v[2] - 0.9).abs() < 1e-15);
        assert!((v[3] - 0.25).abs() < 1e-15);
        assert_eq!(v[4], 0.5);
        let zero = g.constant(Tensor::vector(vec![0.0; 5]));
        assert!(expected_mask(&mut g, a, zero).is_err());
    }

    #[test]
    fn uncertainty_is_negative_total_evidence() {
        // α = 2, β = 3 ⇒ −5: pick logits whose softplus equals 1 and 2.
        let inv_softplus = |y: f64| (y.exp() - 1.0).ln();
        let mut g = Graph::new();
        let q = MaskQueries {
            alpha_embed: g.constant(mat(1, 1, vec![inv_softplus(1.0)])),
            beta_embed: g.constant(mat(1, 1, vec![inv_softplus(2.0)])),
            class_logits: g.constant(Tensor::zeros(&[1, 2])),
        };
        let px = PixelEmbeddings {
            features: g.constant(mat(1, 1, vec![1.0])),
        };
        let ev = compute_evidence(&mut g, &q, &px).unwrap();
        assert!((g.value(ev.evi_uncertainty).item() + 5.0).abs() < 1e-12);
    }

    #[test]
    fn extreme_logits_stay_in_open_interval() {
        let mut g = Graph::new();
        let q = MaskQueries {
            alpha_embed: g.constant(mat(2, 1, vec![1e4, -1e4])),
            beta_embed: g.constant(mat(2, 1, vec![-1e4, 1e4])),
            class_logits: g.constant(Tensor::zeros(&[2, 2])),
        };
        let px = PixelEmbeddings {
            features: g.constant(mat(1, 2, vec![1.0, -1.0])),
        };
        let ev = compute_evidence(&mut g, &q, &px).unwrap();
        for &p in g.value(ev.mask_prob).data() {
            assert!(p > 0.0 && p < 1.0, "{p}");
        }
        for (&a, &b) in g.value(ev.alpha).data().iter().zip(g.value(ev.beta).data()) {
            // softplus underflows to 0 for logits below about -745.
            assert!(a >= 1.0 && b >= 1.0);
        }
    }

    #[test]
    fn scaling_evidence_keeps_mean_and_lowers_uncertainty() {
        let mut rng = SplitMix64::new(8);
        for _ in 0..100 {
            let (a, b) = (rng.uniform(1.0, 50.0), rng.uniform(1.0, 50.0));
            let k = rng.uniform(1.01, 10.0);
            let mut g = Graph::new();
            let va = g.constant(Tensor::vector(vec![a, a * k]));
            let vb = g.constant(Tensor::vector(vec![b, b * k]));
            let m = expected_mask(&mut g, va, vb).unwrap();
            let mv = g.value(m).data();
            assert!((mv[0] - mv[1]).abs() < 1e-14);
            assert!(-(a * k + b * k) < -(a + b));
        }
    }

    #[test]
    fn mean_mask_prob_gradients() {
        let mut rng = SplitMix64::new(21);
        let mut rand = |r, c| mat(r, c, (0..r * c).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let (fa, fb, fe) = (rand(3, 4), rand(3, 4), rand(4, 5));
        let build = |g: &mut Graph, a: Var, b: Var, e: Var| -> Result<Var> {
            let q = MaskQueries {
                alpha_embed: a,
                beta_embed: b,
                class_logits: g.constant(Tensor::zeros(&[3, 2])),
            };
            let ev = compute_evidence(g, &q, &PixelEmbeddings { features: e })?;
            Ok(g.mean(ev.mask_prob))
        };
        let (b2, e2) = (fb.clone(), fe.clone());
        let err_a = grad_check(
            |g, x| {
                let (b, e) = (g.constant(b2.clone()), g.constant(e2.clone()));
                build(g, x, b, e)
            },
            &fa,
            1e-5,
        )
        .unwrap();
        let (a2, e2) = (fa.clone(), fe.clone());
        let err_b = grad_check(
            |g, x| {
                let (a, e) = (g.constant(a2.clone()), g.constant(e2.clone()));
                build(g, a, x, e)
            },
            &fb,
            1e-5,
        )
        .unwrap();
        let err_e = grad_check(
            |g, x| {
                let (a, b) = (g.constant(fa.clone()), g.constant(fb.clone()));
                build(g, a, b, x)
            },
            &fe,
            1e-5,
        )
        .unwrap();
        assert!(err_a < 1e-5 && err_b < 1e-5 && err_e < 1e-5, "{err_a} {err_b} {err_e}");
    }
}
