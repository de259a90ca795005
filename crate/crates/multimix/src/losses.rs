//! Training objectives: supervised + pseudo-label classification loss,
//! Dice + KL-consistency segmentation loss, and their sum. Every loss
//! returns its gradient alongside the value so the training step and the
//! finite-difference suite share one code path.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Smoothing constant in the soft Dice ratio.
pub const DICE_SMOOTHING: f64 = 1.0;

/// Loss weights and thresholds (symbols t, lambda, alpha, beta).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Pseudo-label confidence threshold.
    pub t: f64,
    /// Unsupervised classification weight.
    pub lambda_u: f64,
    /// Supervised segmentation (Dice) weight.
    pub alpha: f64,
    /// Unsupervised segmentation (KL) weight.
    pub beta: f64,
    /// Probability floor when clamping KL operands.
    pub kl_epsilon: f64,
    /// Average the unsupervised CE over the full batch instead of over the
    /// kept samples only.
    pub unsup_ce_full_batch: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            t: 0.7,
            lambda_u: 0.25,
            alpha: 5.0,
            beta: 0.01,
            kl_epsilon: 1e-7,
            unsup_ce_full_batch: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t < 1.0) {
            return Err(Error::config("t must satisfy 0 < t < 1"));
        }
        if self.lambda_u < 0.0 || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::config("lambda_u, alpha, beta must be >= 0"));
        }
        if !(self.kl_epsilon > 0.0 && self.kl_epsilon < 1e-3) {
            return Err(Error::config("kl_epsilon must satisfy 0 < eps < 1e-3"));
        }
        Ok(())
    }
}

/// Per-step loss components (unweighted) plus the weighted total:
/// total = l_c_sup + lambda*l_c_unsup + alpha*l_s_sup + beta*l_s_unsup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c_sup: f64,
    pub l_c_unsup: f64,
    pub l_s_sup: f64,
    pub l_s_unsup: f64,
    pub lambda_u: f64,
    pub alpha: f64,
    pub beta: f64,
    pub total: f64,
    pub pseudo_label_keep_fraction: f64,
    /// Degenerate-input flags: empty unlabeled classification batch (or none
    /// kept) and empty KL operand.
    pub unsup_cls_empty: bool,
    pub kl_empty: bool,
}

impl LossBreakdown {
    pub fn zero() -> Self {
        LossBreakdown {
            l_c_sup: 0.0,
            l_c_unsup: 0.0,
            l_s_sup: 0.0,
            l_s_unsup: 0.0,
            lambda_u: 0.0,
            alpha: 0.0,
            beta: 0.0,
            total: 0.0,
            pseudo_label_keep_fraction: 0.0,
            unsup_cls_empty: false,
            kl_empty: false,
        }
    }
}

pub struct CrossEntropyLoss<S: Scalar> {
    pub value: S,
    pub grad: Array2<S>,
    pub empty_batch: bool,
}

/// Mean over the batch of -log softmax(logits)[label].
pub fn cross_entropy<S: Scalar>(logits: &Array2<S>, labels: &[usize]) -> Result<CrossEntropyLoss<S>> {
    let (n, k) = logits.dim();
    if n != labels.len() {
        return Err(Error::input(format!(
            "cross_entropy: {n} logit rows vs {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Ok(CrossEntropyLoss {
            value: S::zero(),
            grad: Array2::zeros((0, k)),
            empty_batch: true,
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::input(format!(
            "cross_entropy: label {bad} out of range for {k} classes"
        )));
    }
    let ninv = S::of_f64(1.0 / n as f64);
    let probs = crate::nn::softmax_rows(logits);
    let mut value = S::zero();
    let mut grad = probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let lse = max
            + row
                .iter()
                .map(|&v| (v - max).exp())
                .fold(S::zero(), |a, b| a + b)
                .ln();
        value += lse - row[label];
        grad[(i, label)] -= S::one();
    }
    grad.mapv_inplace(|v| v * ninv);
    Ok(CrossEntropyLoss {
        value: value * ninv,
        grad,
        empty_batch: false,
    })
}

#[derive(Debug, Clone)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub keep: Vec<bool>,
    pub keep_fraction: f64,
}

/// Argmax labels from weak-view softmax rows; a sample is kept when its top
/// probability reaches the confidence threshold.
pub fn pseudo_label_select<S: Scalar>(probs_weak: &Array2<S>, t: f64) -> Result<PseudoLabels> {
    let n = probs_weak.nrows();
    for (i, row) in probs_weak.rows().into_iter().enumerate() {
        let sum: f64 = row.iter().map(|v| v.f64()).sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::input(format!(
                "pseudo_label_select: row {i} sums to {sum}, not 1"
            )));
        }
    }
    let mut labels = Vec::with_capacity(n);
    let mut keep = Vec::with_capacity(n);
    let mut kept = 0usize;
    for row in probs_weak.rows() {
        let mut best = 0;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        let is_kept = row[best].f64() >= t;
        kept += usize::from(is_kept);
        labels.push(best);
        keep.push(is_kept);
    }
    Ok(PseudoLabels {
        labels,
        keep,
        keep_fraction: if n == 0 { 0.0 } else { kept as f64 / n as f64 },
    })
}

pub struct ClassificationLoss<S: Scalar> {
    /// l_sup + lambda * l_unsup.
    pub value: S,
    pub l_sup: S,
    pub l_unsup: S,
    pub keep_fraction: f64,
    pub unsup_empty: bool,
    pub grad_labeled: Array2<S>,
    /// Already scaled by lambda.
    pub grad_strong: Array2<S>,
}

/// Eq.-style composition: supervised CE on labeled logits plus
/// lambda-weighted CE of strong-view logits against pseudo-labels selected
/// from the aligned weak views.
pub fn classification_loss<S: Scalar>(
    logits_labeled: &Array2<S>,
    labels: &[usize],
    logits_strong: &Array2<S>,
    probs_weak: &Array2<S>,
    cfg: &LossConfig,
) -> Result<ClassificationLoss<S>> {
    if logits_strong.nrows() != probs_weak.nrows() {
        return Err(Error::input(format!(
            "classification_loss: strong batch {} misaligned with weak batch {}",
            logits_strong.nrows(),
            probs_weak.nrows()
        )));
    }
    let sup = cross_entropy(logits_labeled, labels)?;
    let pseudo = pseudo_label_select(probs_weak, cfg.t)?;
    let (nu, k) = logits_strong.dim();
    let kept: Vec<usize> = (0..nu).filter(|&i| pseudo.keep[i]).collect();
    let mut grad_strong = Array2::<S>::zeros((nu, k));
    let mut l_unsup = S::zero();
    let unsup_empty = kept.is_empty();
    if !unsup_empty {
        let denom = if cfg.unsup_ce_full_batch { nu } else { kept.len() };
        let dinv = S::of_f64(1.0 / denom as f64);
        let probs = crate::nn::softmax_rows(logits_strong);
        for &i in &kept {
            let row = logits_strong.row(i);
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let lse = max
                + row
                    .iter()
                    .map(|&v| (v - max).exp())
                    .fold(S::zero(), |a, b| a + b)
                    .ln();
            l_unsup += (lse - row[pseudo.labels[i]]) * dinv;
            for c in 0..k {
                let onehot = if c == pseudo.labels[i] { S::one() } else { S::zero() };
                grad_strong[(i, c)] = (probs[(i, c)] - onehot) * dinv;
            }
        }
    }
    let lambda = S::of_f64(cfg.lambda_u);
    grad_strong.mapv_inplace(|v| v * lambda);
    Ok(ClassificationLoss {
        value: sup.value + lambda * l_unsup,
        l_sup: sup.value,
        l_unsup,
        keep_fraction: pseudo.keep_fraction,
        unsup_empty: unsup_empty || nu == 0,
        grad_labeled: sup.grad,
        grad_strong,
    })
}

pub struct DiceLoss<S: Scalar> {
    pub value: S,
    pub grad: Array3<S>,
}

/// Soft Dice loss 1 - (2*sum(p*y)+eps)/(sum(p)+sum(y)+eps), per sample,
/// averaged over the batch.
pub fn dice_loss<S: Scalar>(pred: &Array3<S>, target: &Array3<S>) -> Result<DiceLoss<S>> {
    if pred.dim() != target.dim() {
        return Err(Error::input(format!(
            "dice_loss: prediction shape {:?} vs target shape {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let (n, h, w) = pred.dim();
    if n == 0 {
        return Err(Error::input("dice_loss: empty batch"));
    }
    let eps = S::of_f64(DICE_SMOOTHING);
    let ninv = S::of_f64(1.0 / n as f64);
    let mut value = S::zero();
    let mut grad = Array3::<S>::zeros((n, h, w));
    for ni in 0..n {
        let p = pred.slice(ndarray::s![ni, .., ..]);
        let y = target.slice(ndarray::s![ni, .., ..]);
        let mut inter = S::zero();
        let mut psum = S::zero();
        let mut ysum = S::zero();
        for (&pv, &yv) in p.iter().zip(y.iter()) {
            inter += pv * yv;
            psum += pv;
            ysum += yv;
        }
        let num = S::of_f64(2.0) * inter + eps;
        let den = psum + ysum + eps;
        value += S::one() - num / den;
        let den2 = den * den;
        let two = S::of_f64(2.0);
        let mut g = grad.slice_mut(ndarray::s![ni, .., ..]);
        for (gv, &yv) in g.iter_mut().zip(y.iter()) {
            *gv = (num - two * yv * den) / den2 * ninv;
        }
    }
    Ok(DiceLoss {
        value: value * ninv,
        grad,
    })
}

pub struct KlConsistency<S: Scalar> {
    pub value: S,
    /// Gradient with respect to the unlabeled predictions; the labeled-batch
    /// mean is treated as a constant (stop-gradient).
    pub grad_unlabeled: Array3<S>,
    pub empty: bool,
}

/// Pixel-wise Bernoulli KL between the labeled-batch mean map P and the
/// unlabeled-batch mean map Q, averaged over pixels. Both operands are
/// clamped to [eps, 1-eps]; gradients flow only to the unlabeled side.
pub fn kl_consistency<S: Scalar>(
    probs_labeled: &Array3<S>,
    probs_unlabeled: &Array3<S>,
    kl_epsilon: f64,
) -> Result<KlConsistency<S>> {
    let (nl, h, w) = probs_labeled.dim();
    let (nu, hu, wu) = probs_unlabeled.dim();
    if (nl > 0 && nu > 0) && (h, w) != (hu, wu) {
        return Err(Error::input(format!(
            "kl_consistency: spatial dims {h}x{w} vs {hu}x{wu}"
        )));
    }
    if nl == 0 || nu == 0 {
        return Ok(KlConsistency {
            value: S::zero(),
            grad_unlabeled: Array3::zeros((nu, hu, wu)),
            empty: true,
        });
    }
    let eps = S::of_f64(kl_epsilon);
    let one = S::one();
    let lo = eps;
    let hi = one - eps;
    let npix = h * w;
    let pix_inv = S::of_f64(1.0 / npix as f64);
    let nl_inv = S::of_f64(1.0 / nl as f64);
    let nu_inv = S::of_f64(1.0 / nu as f64);
    let mut value = S::zero();
    let mut gq = Array2::<S>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut psum = S::zero();
            for b in 0..nl {
                psum += probs_labeled[(b, i, j)];
            }
            let mut qsum = S::zero();
            for b in 0..nu {
                qsum += probs_unlabeled[(b, i, j)];
            }
            let p_raw = psum * nl_inv;
            let q_raw = qsum * nu_inv;
            let p = p_raw.max(lo).min(hi);
            let q = q_raw.max(lo).min(hi);
            value += p * (p / q).ln() + (one - p) * ((one - p) / (one - q)).ln();
            // zero subgradient where the clamp is active
            if q_raw >= lo && q_raw <= hi {
                gq[(i, j)] = (-(p / q) + (one - p) / (one - q)) * pix_inv;
            }
        }
    }
    let mut grad = Array3::<S>::zeros((nu, h, w));
    for b in 0..nu {
        let mut g = grad.slice_mut(ndarray::s![b, .., ..]);
        g.zip_mut_with(&gq, |a, &b| *a = b * nu_inv);
    }
    Ok(KlConsistency {
        value: value * pix_inv,
        grad_unlabeled: grad,
        empty: false,
    })
}

pub struct SegmentationLoss<S: Scalar> {
    /// alpha * dice + beta * kl.
    pub value: S,
    pub l_sup: S,
    pub l_unsup: S,
    pub kl_empty: bool,
    /// Already scaled by alpha.
    pub grad_labeled: Array3<S>,
    /// Already scaled by beta.
    pub grad_unlabeled: Option<Array3<S>>,
}

/// alpha-weighted Dice on the labeled pairs plus beta-weighted KL
/// consistency against the unlabeled predictions.
pub fn segmentation_loss<S: Scalar>(
    probs_labeled: &Array3<S>,
    masks: &Array3<S>,
    probs_unlabeled: Option<&Array3<S>>,
    cfg: &LossConfig,
) -> Result<SegmentationLoss<S>> {
    let dice = dice_loss(probs_labeled, masks)?;
    let alpha = S::of_f64(cfg.alpha);
    let beta = S::of_f64(cfg.beta);
    let mut grad_labeled = dice.grad;
    grad_labeled.mapv_inplace(|v| v * alpha);
    let (l_unsup, kl_empty, grad_unlabeled) = match probs_unlabeled {
        Some(u) => {
            let kl = kl_consistency(probs_labeled, u, cfg.kl_epsilon)?;
            let mut g = kl.grad_unlabeled;
            g.mapv_inplace(|v| v * beta);
            (kl.value, kl.empty, Some(g))
        }
        None => (S::zero(), true, None),
    };
    Ok(SegmentationLoss {
        value: alpha * dice.value + beta * l_unsup,
        l_sup: dice.value,
        l_unsup,
        kl_empty,
        grad_labeled,
        grad_unlabeled,
    })
}

/// Sum of the two task losses (task weights already live inside each).
pub fn total_loss<S: Scalar>(l_c: S, l_s: S) -> Result<S> {
    if !l_c.is_finite() || !l_s.is_finite() {
        let mut breakdown = LossBreakdown::zero();
        breakdown.l_c_sup = l_c.f64();
        breakdown.l_s_sup = l_s.f64();
        breakdown.total = f64::NAN;
        return Err(Error::Divergence { breakdown });
    }
    Ok(l_c + l_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2, Array3};
    use rand::Rng;

    fn rand_probs3(n: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = crate::rng::stream(seed, "test.probs", &[]);
        Array3::from_shape_fn((n, h, w), |_| rng.random_range(0.05..0.95))
    }

    #[test]
    fn cross_entropy_hand_values() {
        // softmax exactly [0.8, 0.2]
        let logits = array![[0.8f64.ln(), 0.2f64.ln()]];
        let ce = cross_entropy(&logits, &[0]).unwrap();
        assert!((ce.value - 0.223_143_551_3).abs() < 1e-9);

        let uniform = array![[0.0, 0.0]];
        let ce = cross_entropy(&uniform, &[1]).unwrap();
        assert!((ce.value - std::f64::consts::LN_2).abs() < 1e-12);

        let confident = array![[20.0, 0.0]];
        let ce = cross_entropy(&confident, &[0]).unwrap();
        assert!(ce.value <= 1e-6);

        let empty = Array2::<f64>::zeros((0, 2));
        let ce = cross_entropy(&empty, &[]).unwrap();
        assert_eq!(ce.value, 0.0);
        assert!(ce.empty_batch);

        assert!(cross_entropy(&uniform, &[2]).is_err());
        assert!(cross_entropy(&uniform, &[0, 1]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = crate::rng::stream(50, "test.ce", &[]);
        let logits = Array2::from_shape_fn((4, 3), |_| rng.random_range(-2.0..2.0));
        let labels = [0usize, 2, 1, 1];
        let ce = cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6_f64;
        for idx in 0..logits.len() {
            let mut lp = logits.clone();
            lp.as_slice_mut().unwrap()[idx] += h;
            let fp = cross_entropy(&lp, &labels).unwrap().value;
            let mut lm = logits.clone();
            lm.as_slice_mut().unwrap()[idx] -= h;
            let fm = cross_entropy(&lm, &labels).unwrap().value;
            let num = (fp - fm) / (2.0 * h);
            let ana = ce.grad.as_slice().unwrap()[idx];
            assert!((num - ana).abs() < 1e-6, "idx {idx}: {num} vs {ana}");
        }
    }

    #[test]
    fn pseudo_label_select_thresholding() {
        let probs = array![[0.9, 0.1], [0.6, 0.4]];
        let out = pseudo_label_select(&probs, 0.7).unwrap();
        assert_eq!(out.labels, vec![0, 0]);
        assert_eq!(out.keep, vec![true, false]);
        assert!((out.keep_fraction - 0.5).abs() < 1e-12);

        let bad = array![[0.5, 0.2]];
        assert!(pseudo_label_select(&bad, 0.7).is_err());
    }

    #[test]
    fn raising_threshold_never_keeps_more() {
        let mut rng = crate::rng::stream(51, "test.monotone", &[]);
        for _ in 0..200 {
            let mut probs = Array2::from_shape_fn((8, 2), |_| rng.random_range(0.0..1.0));
            for mut row in probs.rows_mut() {
                let s = row.sum();
                row.mapv_inplace(|v| v / s);
            }
            let t1: f64 = rng.random_range(0.1..0.9);
            let t2: f64 = rng.random_range(t1..0.999);
            let k1 = pseudo_label_select(&probs, t1).unwrap().keep_fraction;
            let k2 = pseudo_label_select(&probs, t2).unwrap().keep_fraction;
            assert!(k2 <= k1);
        }
    }

    #[test]
    fn classification_loss_identities_and_hand_value() {
        // supervised CE = ln 2, one kept unlabeled sample with CE -ln 0.8
        let logits_l = array![[0.0, 0.0]];
        let labels = [0usize];
        let logits_s = array![[0.8f64.ln(), 0.2f64.ln()], [0.0, 0.0]];
        let probs_w = array![[0.95, 0.05], [0.5, 0.5]];
        let cfg = LossConfig::default();

        let out = classification_loss(&logits_l, &labels, &logits_s, &probs_w, &cfg).unwrap();
        let expect = std::f64::consts::LN_2 + 0.25 * 0.223_143_551_3;
        assert!((out.value - expect).abs() < 1e-9, "{} vs {expect}", out.value);
        assert!((out.value - 0.748_932_8).abs() < 1e-6);

        // lambda = 0 collapses to the supervised term exactly
        let cfg0 = LossConfig {
            lambda_u: 0.0,
            ..LossConfig::default()
        };
        let out0 = classification_loss(&logits_l, &labels, &logits_s, &probs_w, &cfg0).unwrap();
        assert_eq!(out0.value, out0.l_sup);

        // nothing confident enough: unsupervised term is exactly zero
        let low = array![[0.6, 0.4], [0.55, 0.45]];
        let out_none = classification_loss(&logits_l, &labels, &logits_s, &low, &cfg).unwrap();
        assert_eq!(out_none.value, out_none.l_sup);
        assert_eq!(out_none.l_unsup, 0.0);
        assert!(out_none.unsup_empty);
        assert!(out_none.grad_strong.iter().all(|&g| g == 0.0));

        // misaligned strong/weak batches
        let short = array![[1.0, 0.0]];
        assert!(classification_loss(&logits_l, &labels, &logits_s, &short, &cfg).is_err());
    }

    #[test]
    fn lambda_scales_unsup_gradient_exactly() {
        let logits_l = array![[0.3, -0.2]];
        let labels = [1usize];
        let mut rng = crate::rng::stream(52, "test.scale", &[]);
        let logits_s = Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0));
        let probs_w = array![[0.9, 0.1], [0.8, 0.2], [0.3, 0.7], [0.95, 0.05], [0.5, 0.5]];
        let base = LossConfig {
            lambda_u: 1.0,
            ..LossConfig::default()
        };
        let scaled = LossConfig {
            lambda_u: 4.0,
            ..LossConfig::default()
        };
        let g1 = classification_loss(&logits_l, &labels, &logits_s, &probs_w, &base)
            .unwrap()
            .grad_strong;
        let g4 = classification_loss(&logits_l, &labels, &logits_s, &probs_w, &scaled)
            .unwrap()
            .grad_strong;
        for (a, b) in g1.iter().zip(g4.iter()) {
            assert_eq!(*b, 4.0 * *a);
        }
    }

    #[test]
    fn dice_loss_hand_cases() {
        // perfect overlap on a 16x16 mask
        let mut target = Array3::<f64>::zeros((1, 16, 16));
        for i in 0..10 {
            for j in 0..10 {
                target[(0, i, j)] = 1.0;
            }
        }
        let out = dice_loss(&target.clone(), &target).unwrap();
        let n = 100.0;
        assert!((out.value - (1.0 - (2.0 * n + 1.0) / (2.0 * n + 1.0))).abs() < 1e-12);
        assert!(out.value.abs() < 1e-12);

        // disjoint masks, each with 50 foreground pixels
        let mut pred = Array3::<f64>::zeros((1, 16, 16));
        let mut tgt = Array3::<f64>::zeros((1, 16, 16));
        for k in 0..50 {
            pred[(0, k / 16, k % 16)] = 1.0;
            tgt[(0, 10 + k / 16, k % 16)] = 1.0;
        }
        let out = dice_loss(&pred, &tgt).unwrap();
        assert!((out.value - (1.0 - 1.0 / 101.0)).abs() < 1e-12);

        // pred covers half of a 100-pixel target
        let mut pred = Array3::<f64>::zeros((1, 16, 16));
        let mut tgt = Array3::<f64>::zeros((1, 16, 16));
        for k in 0..100 {
            tgt[(0, k / 16, k % 16)] = 1.0;
            if k < 50 {
                pred[(0, k / 16, k % 16)] = 1.0;
            }
        }
        let out = dice_loss(&pred, &tgt).unwrap();
        assert!((out.value - (1.0 - 101.0 / 151.0)).abs() < 1e-12);

        assert!(dice_loss(&pred, &Array3::<f64>::zeros((1, 8, 8))).is_err());
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let pred = rand_probs3(2, 4, 4, 53);
        let mut rng = crate::rng::stream(54, "test.dicefd", &[]);
        let target = Array3::from_shape_fn((2, 4, 4), |_| {
            if rng.random::<f64>() < 0.4 {
                1.0
            } else {
                0.0
            }
        });
        let out = dice_loss(&pred, &target).unwrap();
        let h = 1e-6;
        for idx in 0..pred.len() {
            let mut pp = pred.clone();
            pp.as_slice_mut().unwrap()[idx] += h;
            let fp = dice_loss(&pp, &target).unwrap().value;
            let mut pm = pred.clone();
            pm.as_slice_mut().unwrap()[idx] -= h;
            let fm = dice_loss(&pm, &target).unwrap().value;
            let num = (fp - fm) / (2.0 * h);
            let ana = out.grad.as_slice().unwrap()[idx];
            assert!((num - ana).abs() < 1e-6);
        }
    }

    #[test]
    fn kl_hand_value_and_identity() {
        // constant maps: P=0.75, Q=0.5 everywhere
        let l = Array3::from_elem((4, 3, 3), 0.75);
        let u = Array3::from_elem((2, 3, 3), 0.5);
        let out = kl_consistency(&l, &u, 1e-7).unwrap();
        let expect = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((out.value - expect).abs() < 1e-9);
        assert!((out.value - 0.130_812).abs() < 1e-5);

        // identical per-pixel means -> exactly zero
        let a = rand_probs3(3, 4, 4, 55);
        let out = kl_consistency(&a, &a, 1e-7).unwrap();
        assert_eq!(out.value, 0.0);

        // empty side -> zero with flag
        let empty = Array3::<f64>::zeros((0, 4, 4));
        let out = kl_consistency(&a, &empty, 1e-7).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.empty);
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        for s in 0..200 {
            let l = rand_probs3(3, 4, 4, 1000 + s);
            let u = rand_probs3(2, 4, 4, 2000 + s);
            let out = kl_consistency(&l, &u, 1e-7).unwrap();
            assert!(out.value >= 0.0);
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let l = rand_probs3(2, 3, 3, 56);
        let u = rand_probs3(3, 3, 3, 57);
        let out = kl_consistency(&l, &u, 1e-7).unwrap();
        let h = 1e-6_f64;
        for idx in 0..u.len() {
            let mut up = u.clone();
            up.as_slice_mut().unwrap()[idx] += h;
            let fp = kl_consistency(&l, &up, 1e-7).unwrap().value;
            let mut um = u.clone();
            um.as_slice_mut().unwrap()[idx] -= h;
            let fm = kl_consistency(&l, &um, 1e-7).unwrap().value;
            let num = (fp - fm) / (2.0 * h);
            let ana = out.grad_unlabeled.as_slice().unwrap()[idx];
            assert!((num - ana).abs() < 1e-6, "idx {idx}: {num} vs {ana}");
        }
    }

    #[test]
    fn dice_and_kl_match_pixel_loop_oracle_on_8x8() {
        // naive scalar-loop re-implementations, kept independent of the
        // vectorized paths above
        fn dice_oracle(pred: &Array3<f64>, target: &Array3<f64>) -> f64 {
            let (n, h, w) = pred.dim();
            let mut total = 0.0;
            for b in 0..n {
                let (mut inter, mut ps, mut ys) = (0.0, 0.0, 0.0);
                for i in 0..h {
                    for j in 0..w {
                        inter += pred[(b, i, j)] * target[(b, i, j)];
                        ps += pred[(b, i, j)];
                        ys += target[(b, i, j)];
                    }
                }
                total += 1.0 - (2.0 * inter + 1.0) / (ps + ys + 1.0);
            }
            total / n as f64
        }
        fn kl_oracle(l: &Array3<f64>, u: &Array3<f64>, eps: f64) -> f64 {
            let (nl, h, w) = l.dim();
            let nu = u.dim().0;
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    let mut p = 0.0;
                    for b in 0..nl {
                        p += l[(b, i, j)];
                    }
                    p /= nl as f64;
                    let mut q = 0.0;
                    for b in 0..nu {
                        q += u[(b, i, j)];
                    }
                    q /= nu as f64;
                    let p = p.clamp(eps, 1.0 - eps);
                    let q = q.clamp(eps, 1.0 - eps);
                    acc += p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
                }
            }
            acc / (h * w) as f64
        }

        let mut rng = crate::rng::stream(58, "test.oracle", &[]);
        for s in 0..50 {
            let pred = rand_probs3(2, 8, 8, 3000 + s);
            let target = Array3::from_shape_fn((2, 8, 8), |_| {
                if rng.random::<f64>() < 0.5 {
                    1.0
                } else {
                    0.0
                }
            });
            let mine = dice_loss(&pred, &target).unwrap().value;
            assert!((mine - dice_oracle(&pred, &target)).abs() <= 1e-10);

            let l = rand_probs3(3, 8, 8, 4000 + s);
            let u = rand_probs3(2, 8, 8, 5000 + s);
            let mine = kl_consistency(&l, &u, 1e-7).unwrap().value;
            assert!((mine - kl_oracle(&l, &u, 1e-7)).abs() <= 1e-10);
        }
    }

    #[test]
    fn segmentation_loss_identities() {
        let probs_l = rand_probs3(2, 4, 4, 59);
        let mut rng = crate::rng::stream(60, "test.segloss", &[]);
        let masks = Array3::from_shape_fn((2, 4, 4), |_| {
            if rng.random::<f64>() < 0.5 {
                1.0
            } else {
                0.0
            }
        });
        let probs_u = rand_probs3(3, 4, 4, 61);

        let cfg0 = LossConfig {
            beta: 0.0,
            ..LossConfig::default()
        };
        let out = segmentation_loss(&probs_l, &masks, Some(&probs_u), &cfg0).unwrap();
        let dice = dice_loss(&probs_l, &masks).unwrap().value;
        assert_eq!(out.value, cfg0.alpha * dice);

        // perfect predictions with matched means -> approximately 0
        let cfg = LossConfig::default();
        let out = segmentation_loss(&masks.clone(), &masks, Some(&masks), &cfg).unwrap();
        assert!(out.value.abs() < 1e-6);
    }

    #[test]
    fn total_loss_addition_and_divergence() {
        assert_eq!(total_loss(0.0f64, 0.0).unwrap(), 0.0);
        let v = total_loss(0.748_94_f64, 0.5).unwrap();
        assert!((v - 1.248_94).abs() < 1e-12);
        assert!(matches!(
            total_loss(f64::NAN, 0.0),
            Err(Error::Divergence { .. })
        ));
        assert!(matches!(
            total_loss(0.0, f64::INFINITY),
            Err(Error::Divergence { .. })
        ));
    }
}
