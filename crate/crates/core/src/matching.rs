//! Bipartite matching of predicted to ground-truth masks, and the point
//! sets the mask losses are evaluated on.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::losses::{dice_value, LossWeights};
use crate::rng::SplitMix64;

/// Dense `rows × cols` cost table; rows are predictions, columns targets.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, costs: Vec<f64>) -> Result<Self> {
        if costs.len() != rows * cols {
            return Err(Error::Dimension {
                op: "cost_matrix",
                left: vec![rows, cols],
                right: vec![costs.len()],
            });
        }
        if let Some(bad) = costs.iter().find(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("cost entry {bad}")));
        }
        Ok(Self { rows, cols, costs })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.costs[i * self.cols + j]
    }

    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(i, j)| self.get(i, j)).sum()
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `λ_CE·(−p_i(class_j)) + λ_sDice·dice(mask_prob_i, gt_j)` on the shared
/// sample of pixels.
pub fn build_cost(
    mask_prob: &Tensor,
    class_logits: &Tensor,
    gt_masks: &[Vec<bool>],
    gt_classes: &[usize],
    sample: &[usize],
    weights: &LossWeights,
    smooth: f64,
) -> Result<CostMatrix> {
    if sample.is_empty() {
        return Err(Error::InvalidArgument("matching sample is empty".into()));
    }
    let (n, hw) = mask_prob.dims2().ok_or_else(|| Error::InvalidArgument("mask_prob must be rank 2".into()))?;
    let (n2, c1) = class_logits.dims2().ok_or_else(|| Error::InvalidArgument("class_logits must be rank 2".into()))?;
    if n != n2 || gt_masks.len() != gt_classes.len() {
        return Err(Error::Dimension {
            op: "build_cost",
            left: vec![n, gt_masks.len()],
            right: vec![n2, gt_classes.len()],
        });
    }
    if let Some(&p) = sample.iter().find(|&&p| p >= hw) {
        return Err(Error::Index { what: "sample pixel", index: p, len: hw });
    }
    if let Some(&c) = gt_classes.iter().find(|&&c| c + 1 >= c1) {
        return Err(Error::Index { what: "class id", index: c, len: c1 - 1 });
    }
    let targets: Vec<Vec<f64>> = gt_masks
        .iter()
        .map(|m| sample.iter().map(|&p| if m[p] { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut costs = Vec::with_capacity(n * gt_masks.len());
    for i in 0..n {
        let probs = softmax_row(class_logits.row(i));
        let row = mask_prob.row(i);
        let pred: Vec<f64> = sample.iter().map(|&p| row[p]).collect();
        for (y, &c) in targets.iter().zip(gt_classes) {
            costs.push(-weights.lambda_ce * probs[c] + weights.lambda_sdice * dice_value(&pred, y, smooth));
        }
    }
    CostMatrix::new(n, gt_masks.len(), costs)
}

/// Potentials-based assignment for `rows ≤ cols`; returns the column of
/// every row.
fn assign(rows: &[usize], cols: &[usize], cost: &CostMatrix) -> Vec<usize> {
    let (n, m) = (rows.len(), cols.len());
    debug_assert!(n <= m);
    let a = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = cols[j - 1];
        }
    }
    out
}

/// Optimal total over the sub-table `rows × cols`.
fn optimum(rows: &[usize], cols: &[usize], cost: &CostMatrix) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    if rows.len() <= cols.len() {
        let a = assign(rows, cols, cost);
        rows.iter().zip(&a).map(|(&i, &j)| cost.get(i, j)).sum()
    } else {
        let t = transpose(cost);
        let a = assign(cols, rows, &t);
        cols.iter().zip(&a).map(|(&j, &i)| cost.get(i, j)).sum()
    }
}

fn transpose(c: &CostMatrix) -> CostMatrix {
    let mut t = Vec::with_capacity(c.costs.len());
    for j in 0..c.cols {
        for i in 0..c.rows {
            t.push(c.get(i, j));
        }
    }
    CostMatrix { rows: c.cols, cols: c.rows, costs: t }
}

/// Minimum-cost injective matching of size `min(rows, cols)`, sorted by
/// row. Among optimal matchings the lexicographically smallest pair list
/// is returned, so ties resolve toward low row and then low column.
pub fn hungarian(cost: &CostMatrix) -> Vec<(usize, usize)> {
    let mut rows: Vec<usize> = (0..cost.rows).collect();
    let mut cols: Vec<usize> = (0..cost.cols).collect();
    let target = optimum(&rows, &cols, cost);
    let tol = 1e-9 * (1.0 + target.abs());
    let mut fixed = 0.0;
    let mut pairs = Vec::new();
    for i in 0..cost.rows {
        if cols.is_empty() {
            break;
        }
        rows.retain(|&r| r != i);
        let mut chosen = None;
        for (k, &j) in cols.iter().enumerate() {
            let rest: Vec<usize> = cols.iter().copied().filter(|&c| c != j).collect();
            let total = fixed + cost.get(i, j) + optimum(&rows, &rest, cost);
            if total <= target + tol {
                chosen = Some(k);
                break;
            }
        }
        if let Some(k) = chosen {
            let j = cols.remove(k);
            fixed += cost.get(i, j);
            pairs.push((i, j));
        }
    }
    pairs
}

/// Loss points for one matched mask: the `⌈0.75·budget⌉` pixels whose
/// evidential uncertainty is highest (ties to the lower index) plus a
/// uniform draw from the remaining pixels. Sorted ascending.
pub fn evidential_sample(evi_uncertainty: &[f64], budget: usize, rng: &mut SplitMix64) -> Result<Vec<usize>> {
    if budget < 4 {
        return Err(Error::InvalidArgument(format!("point budget {budget} is below 4")));
    }
    let n = evi_uncertainty.len();
    if budget >= n {
        return Ok((0..n).collect());
    }
    let top = (3 * budget).div_ceil(4);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| evi_uncertainty[b].total_cmp(&evi_uncertainty[a]).then(a.cmp(&b)));
    let mut out: Vec<usize> = order[..top].to_vec();
    let mut rest: Vec<usize> = order[top..].to_vec();
    rest.sort_unstable();
    out.extend(rng.sample_without_replacement(&rest, budget - top));
    out.sort_unstable();
    Ok(out)
}

/// `min(budget, n)` distinct pixels drawn uniformly, sorted ascending.
pub fn uniform_sample(n: usize, budget: usize, rng: &mut SplitMix64) -> Vec<usize> {
    if budget >= n {
        return (0..n).collect();
    }
    let pool: Vec<usize> = (0..n).collect();
    let mut out = rng.sample_without_replacement(&pool, budget);
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn permutations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for (idx, &x) in items.iter().enumerate() {
            let mut rest = items.to_vec();
            rest.remove(idx);
            for mut tail in permutations(&rest, k - 1) {
                tail.insert(0, x);
                out.push(tail);
            }
        }
        out
    }

    /// Exhaustive optimum over injective maps from the smaller side.
    fn brute_force(c: &CostMatrix) -> f64 {
        let (r, k) = (c.rows(), c.cols());
        if r <= k {
            permutations(&(0..k).collect::<Vec<_>>(), r)
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        } else {
            permutations(&(0..r).collect::<Vec<_>>(), k)
                .iter()
                .map(|p| p.iter().enumerate().map(|(j, &i)| c.get(i, j)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        }
    }

    fn random_cost(rng: &mut SplitMix64, r: usize, c: usize) -> CostMatrix {
        CostMatrix::new(r, c, (0..r * c).map(|_| rng.uniform(-3.0, 3.0)).collect()).unwrap()
    }

    fn assert_valid(c: &CostMatrix, pairs: &[(usize, usize)]) {
        assert_eq!(pairs.len(), c.rows().min(c.cols()));
        let mut rs: Vec<_> = pairs.iter().map(|p| p.0).collect();
        let mut cs: Vec<_> = pairs.iter().map(|p| p.1).collect();
        rs.dedup();
        cs.sort_unstable();
        cs.dedup();
        assert_eq!(rs.len(), pairs.len());
        assert_eq!(cs.len(), pairs.len());
    }

    #[test]
    fn diagonal_and_ties() {
        let mut d = vec![1.0; 16];
        for i in 0..4 {
            d[i * 5] = 0.0;
        }
        let c = CostMatrix::new(4, 4, d).unwrap();
        assert_eq!(hungarian(&c), vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        let flat = CostMatrix::new(3, 5, vec![0.7; 15]).unwrap();
        assert_eq!(hungarian(&flat), vec![(0, 0), (1, 1), (2, 2)]);
        let tall = CostMatrix::new(5, 2, vec![0.7; 10]).unwrap();
        assert_eq!(hungarian(&tall), vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn three_by_three_matches_all_six_permutations() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..200 {
            let c = random_cost(&mut rng, 3, 3);
            let pairs = hungarian(&c);
            assert_valid(&c, &pairs);
            assert!((c.total(&pairs) - brute_force(&c)).abs() < 1e-12);
        }
    }

    #[test]
    fn rectangular_up_to_six_match_brute_force() {
        let mut rng = SplitMix64::new(4);
        for r in 1..=6 {
            for k in 1..=6 {
                for _ in 0..5 {
                    let c = random_cost(&mut rng, r, k);
                    let pairs = hungarian(&c);
                    assert_valid(&c, &pairs);
                    assert!((c.total(&pairs) - brute_force(&c)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn empty_side_gives_no_pairs() {
        let c = CostMatrix::new(4, 0, vec![]).unwrap();
        assert!(hungarian(&c).is_empty());
        assert!(CostMatrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn shift_invariance(seed in 0u64..10_000, r in 1usize..6, k in 1usize..6, shift in -50.0f64..50.0) {
            let mut rng = SplitMix64::new(seed);
            let c = random_cost(&mut rng, r, k);
            let shifted = CostMatrix::new(r, k, c.costs.iter().map(|v| v + shift).collect()).unwrap();
            prop_assert_eq!(hungarian(&c), hungarian(&shifted));
        }

        #[test]
        fn sample_size_and_determinism(seed in 0u64..10_000, n in 1usize..300, budget in 4usize..400) {
            let unc: Vec<f64> = (0..n).map(|i| -((i * 37 % 101) as f64)).collect();
            let a = evidential_sample(&unc, budget, &mut SplitMix64::new(seed)).unwrap();
            let b = evidential_sample(&unc, budget, &mut SplitMix64::new(seed)).unwrap();
            prop_assert_eq!(a.len(), budget.min(n));
            prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn build_cost_examples() {
        let w = LossWeights::default();
        let gt = vec![vec![true, true, false, false]];
        let prob = Tensor::matrix(1, 4, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let logits = Tensor::matrix(1, 3, vec![50.0, 0.0, 0.0]).unwrap();
        let c = build_cost(&prob, &logits, &gt, &[0], &[0, 1, 2, 3], &w, 1.0).unwrap();
        assert!((c.get(0, 0) + w.lambda_ce).abs() < 1e-12);

        let prob = Tensor::full(&[3, 4], 0.5);
        let logits = Tensor::zeros(&[3, 3]);
        let gts = vec![vec![true, false, true, false], vec![false, true, false, true]];
        let c = build_cost(&prob, &logits, &gts, &[0, 1], &[0, 1, 2, 3], &w, 1.0).unwrap();
        assert!(c.costs.iter().all(|&v| (v - c.get(0, 0)).abs() < 1e-15));
        assert!(build_cost(&prob, &logits, &gts, &[0, 1], &[], &w, 1.0).is_err());
    }

    #[test]
    fn sampling_split_and_saturation() {
        let mut rng = SplitMix64::new(1);
        assert_eq!(evidential_sample(&[0.0; 10], 16, &mut rng).unwrap(), (0..10).collect::<Vec<_>>());
        assert!(evidential_sample(&[0.0; 10], 3, &mut rng).is_err());

        // Ramp: pixel i has uncertainty −(99 − i), so the top six are 94..=99.
        let unc: Vec<f64> = (0..100).map(|i| -(99.0 - i as f64)).collect();
        let s = evidential_sample(&unc, 8, &mut rng).unwrap();
        assert_eq!(s.len(), 8);
        let top: Vec<usize> = s.iter().copied().filter(|&p| p >= 94).collect();
        assert_eq!(top, vec![94, 95, 96, 97, 98, 99]);
        assert_eq!(s.iter().filter(|&&p| p < 94).count(), 2);

        // Ties resolve toward lower indices.
        let flat = vec![-2.0; 20];
        let s = evidential_sample(&flat, 4, &mut rng).unwrap();
        assert!(s.contains(&0) && s.contains(&1) && s.contains(&2));

        let u = uniform_sample(50, 10, &mut rng);
        assert_eq!(u.len(), 10);
        assert!(u.windows(2).all(|w| w[0] < w[1]));
    }
}
