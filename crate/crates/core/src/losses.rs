//! Training objectives. Every loss returns its value together with the exact gradient
//! with respect to the quantity it reads (reconstruction or normalized embedding).

use crate::cluster::{dot, PrototypeBank};
use crate::error::{Error, Result};
use crate::flow::FlowImage;
use crate::net::{EmbeddingMap, Real};
use crate::saliency::SaliencyPartition;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Sinkhorn entropy weight.
    pub kappa: f64,
    /// Boundary dissimilarity threshold.
    pub delta: f64,
    /// Prototype-to-background similarity threshold.
    pub eta: f64,
    /// Iterations spent on the first frame of a sequence.
    pub t_max: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.01,
            lambda3: 0.01,
            kappa: 0.05,
            delta: 0.1,
            eta: 0.5,
            t_max: 100,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if ![self.lambda1, self.lambda2, self.lambda3]
            .iter()
            .all(|l| *l >= 0.0 && l.is_finite())
        {
            return bad("loss weights must be nonnegative");
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return bad("kappa must be positive");
        }
        if !(self.delta > 0.0 && self.delta < 2.0) {
            return bad("delta must lie in (0, 2)");
        }
        if !(self.eta > -1.0 && self.eta < 1.0) {
            return bad("eta must lie in (-1, 1)");
        }
        if self.t_max == 0 {
            return bad("t_max must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub recon: f64,
    pub proto: f64,
    pub cluster: f64,
    pub saliency: f64,
}

impl LossComponents {
    pub fn total(&self, w: &LossWeights) -> f64 {
        total_loss(self, w)
    }
}

/// `L_c + lambda1 L_pc + lambda2 L_cc + lambda3 L_sc`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.recon + w.lambda1 * c.proto + w.lambda2 * c.cluster + w.lambda3 * c.saliency
}

/// Weighted sum of the three embedding gradients.
pub fn combine_embedding_grads(proto: &[f64], cluster: &[f64], saliency: &[f64], w: &LossWeights) -> Vec<f64> {
    proto
        .iter()
        .zip(cluster)
        .zip(saliency)
        .map(|((p, c), s)| w.lambda1 * p + w.lambda2 * c + w.lambda3 * s)
        .collect()
}

/// Mean squared reconstruction error over the pixels of `target`.
///
/// `recon` is channel-major at `(width, height)`, which may exceed the target's size
/// when the input was padded; padded pixels get zero gradient.
pub fn recon_loss<T: Real>(target: &FlowImage, recon: &[T], width: usize, height: usize) -> Result<LossValue> {
    let (tw, th) = (target.width(), target.height());
    if recon.len() != FlowImage::CHANNELS * width * height || width < tw || height < th {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction of {} values at {width}x{height} vs target {tw}x{th}",
            recon.len()
        )));
    }
    let s_full = (tw * th) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; recon.len()];
    let data = target.data();
    for c in 0..FlowImage::CHANNELS {
        for y in 0..th {
            for x in 0..tw {
                let i = (c * height + y) * width + x;
                let d = recon[i].to_f64().unwrap() - data[(c * th + y) * tw + x] as f64;
                value += d * d;
                grad[i] = 2.0 * d / s_full;
            }
        }
    }
    Ok(LossValue {
        value: value / s_full,
        grad,
    })
}

fn check_labels(z: &EmbeddingMap, labels: &[usize], bank: &PrototypeBank) -> Result<()> {
    if labels.len() != z.pixels() {
        return Err(Error::DimMismatch(format!(
            "{} labels for {} pixels",
            labels.len(),
            z.pixels()
        )));
    }
    if z.dim != bank.dim() {
        return Err(Error::DimMismatch(format!(
            "embedding dimension {} vs prototype dimension {}",
            z.dim,
            bank.dim()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= bank.k()) {
        return Err(Error::DimMismatch(format!(
            "label {bad} with only {} prototypes",
            bank.k()
        )));
    }
    Ok(())
}

/// Mean of `(1 - z . P_label)^2`.
pub fn proto_loss(z: &EmbeddingMap, labels: &[usize], bank: &PrototypeBank) -> Result<LossValue> {
    check_labels(z, labels, bank)?;
    let s_count = z.pixels() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; z.data.len()];
    for (s, &l) in labels.iter().enumerate() {
        let p = bank.prototype(l);
        let r = 1.0 - dot(z.vector(s), p);
        value += r * r;
        let scale = -2.0 * r / s_count;
        grad[s * z.dim..(s + 1) * z.dim]
            .iter_mut()
            .zip(p)
            .for_each(|(g, pj)| *g = scale * pj);
    }
    Ok(LossValue {
        value: value / s_count,
        grad,
    })
}

/// Mean cross-entropy of the assigned prototype under the softmax of affinities.
pub fn cluster_contrastive_loss(z: &EmbeddingMap, labels: &[usize], bank: &PrototypeBank) -> Result<LossValue> {
    check_labels(z, labels, bank)?;
    let s_count = z.pixels() as f64;
    let k = bank.k();
    let mut value = 0.0;
    let mut grad = vec![0.0; z.data.len()];
    let mut logits = vec![0.0; k];
    for (s, &l) in labels.iter().enumerate() {
        let zs = z.vector(s);
        logits
            .iter_mut()
            .enumerate()
            .for_each(|(j, a)| *a = dot(zs, bank.prototype(j)));
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|a| (a - m).exp()).sum();
        value += m + sum.ln() - logits[l];
        let g = &mut grad[s * z.dim..(s + 1) * z.dim];
        for (j, a) in logits.iter().enumerate() {
            let w = (a - m).exp() / sum - if j == l { 1.0 } else { 0.0 };
            g.iter_mut()
                .zip(bank.prototype(j))
                .for_each(|(gi, pj)| *gi += w * pj / s_count);
        }
    }
    Ok(LossValue {
        value: value / s_count,
        grad,
    })
}

/// Mean normalized embeddings of the background and foreground grid sets; `None` for
/// an empty set. Treated as constants by the saliency loss.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyAnchors {
    pub mu_b: Option<Vec<f64>>,
    pub mu_f: Option<Vec<f64>>,
}

fn check_grid(z: &EmbeddingMap, part: &SaliencyPartition) -> Result<()> {
    if part.bg_grid.width() != z.width || part.bg_grid.height() != z.height {
        return Err(Error::DimMismatch(format!(
            "partition grid {}x{} vs embedding {}x{}",
            part.bg_grid.width(),
            part.bg_grid.height(),
            z.width,
            z.height
        )));
    }
    Ok(())
}

pub fn saliency_anchors(z: &EmbeddingMap, part: &SaliencyPartition) -> Result<SaliencyAnchors> {
    check_grid(z, part)?;
    let mean_over = |bits: &[bool]| -> Option<Vec<f64>> {
        let mut sum = vec![0.0; z.dim];
        let mut n = 0usize;
        for (s, _) in bits.iter().enumerate().filter(|(_, b)| **b) {
            sum.iter_mut().zip(z.vector(s)).for_each(|(a, b)| *a += b);
            n += 1;
        }
        (n > 0).then(|| sum.into_iter().map(|v| v / n as f64).collect())
    };
    Ok(SaliencyAnchors {
        mu_b: mean_over(part.bg_grid.bits()),
        mu_f: mean_over(part.fg_grid.bits()),
    })
}

pub fn saliency_contrastive_loss(z: &EmbeddingMap, part: &SaliencyPartition) -> Result<LossValue> {
    let anchors = saliency_anchors(z, part)?;
    saliency_contrastive_loss_with(z, part, &anchors)
}

/// Two binary cross-entropy terms: each background pixel should score higher against
/// `mu_b` than `mu_f`, and symmetrically for foreground. An empty set contributes zero
/// and its anchor is the zero vector.
pub fn saliency_contrastive_loss_with(
    z: &EmbeddingMap,
    part: &SaliencyPartition,
    anchors: &SaliencyAnchors,
) -> Result<LossValue> {
    check_grid(z, part)?;
    if anchors.mu_b.is_none() && anchors.mu_f.is_none() {
        return Err(Error::BothSetsEmpty);
    }
    let zero = vec![0.0; z.dim];
    let mu_b = anchors.mu_b.as_deref().unwrap_or(&zero);
    let mu_f = anchors.mu_f.as_deref().unwrap_or(&zero);
    // direction that favors background: mu_b - mu_f
    let diff: Vec<f64> = mu_b.iter().zip(mu_f).map(|(b, f)| b - f).collect();
    let bg_count = part.bg_grid.count();
    let fg_count = part.fg_grid.count();
    let mut value = 0.0;
    let mut grad = vec![0.0; z.data.len()];
    for (s, &is_fg) in part.fg_grid.bits().iter().enumerate() {
        let (sign, n) = if is_fg {
            (-1.0, fg_count as f64)
        } else {
            (1.0, bg_count as f64)
        };
        let margin = sign * dot(z.vector(s), &diff);
        // -log sigmoid(margin) and its derivative
        value += softplus(-margin) / n;
        let scale = -sign * sigmoid(-margin) / n;
        grad[s * z.dim..(s + 1) * z.dim]
            .iter_mut()
            .zip(&diff)
            .for_each(|(g, d)| *g = scale * d);
    }
    Ok(LossValue { value, grad })
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Mask;

    fn unit_map(w: usize, h: usize, vectors: &[Vec<f64>]) -> EmbeddingMap {
        let mut m = EmbeddingMap::new(w, h, vectors[0].len(), vectors.concat()).unwrap();
        m.normalized = true;
        m
    }

    fn partition_from(fg: Vec<bool>, w: usize, h: usize) -> SaliencyPartition {
        let fg_grid = Mask::new(w, h, fg).unwrap();
        SaliencyPartition {
            fg_mask: fg_grid.clone(),
            bg_mask: fg_grid.complement(),
            m: [0.0; 2],
            m_f: [0.0; 2],
            m_b: [0.0; 2],
            fg_empty: fg_grid.count() == 0,
            bg_empty: fg_grid.count() == w * h,
            bg_grid: fg_grid.complement(),
            fg_grid,
        }
    }

    #[test]
    fn recon_examples() {
        let x = FlowImage::from_channels(1, 1, vec![0.0, 0.0, 0.0]).unwrap();
        let l = recon_loss(&x, &[1.0f64, 2.0, 2.0], 1, 1).unwrap();
        assert_eq!(l.value, 9.0);
        assert_eq!(l.grad, vec![2.0, 4.0, 4.0]);
        let same = recon_loss(&x, &[0.0f32; 3], 1, 1).unwrap();
        assert_eq!(same.value, 0.0);
        assert!(recon_loss(&x, &[0.0f32; 2], 1, 1).is_err());
    }

    #[test]
    fn recon_ignores_padding() {
        let x = FlowImage::from_channels(1, 1, vec![1.0, 1.0, 1.0]).unwrap();
        let mut recon = vec![5.0f64; 3 * 4];
        recon[0] = 0.0;
        recon[4] = 0.0;
        recon[8] = 0.0;
        let l = recon_loss(&x, &recon, 2, 2).unwrap();
        assert_eq!(l.value, 3.0);
        assert_eq!(l.grad.iter().filter(|g| **g != 0.0).count(), 3);
    }

    #[test]
    fn proto_examples() {
        let bank = PrototypeBank::from_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let z = unit_map(2, 1, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(proto_loss(&z, &[0, 1], &bank).unwrap().value, 0.0);
        assert_eq!(proto_loss(&z, &[1, 0], &bank).unwrap().value, 1.0);
        assert!(matches!(proto_loss(&z, &[0], &bank), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn cluster_examples() {
        let one = PrototypeBank::from_rows(1, 2, vec![0.6, 0.8]).unwrap();
        let z = unit_map(2, 1, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(cluster_contrastive_loss(&z, &[0, 0], &one).unwrap().value.abs() < 1e-15);
        let tied = PrototypeBank::from_rows(3, 2, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let l = cluster_contrastive_loss(&z, &[0, 2], &tied).unwrap();
        assert!((l.value - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saliency_balanced_logits_give_two_ln_two() {
        // each set's mean is the zero vector, so every logit pair is equal
        let z = unit_map(
            2,
            2,
            &[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]],
        );
        let part = partition_from(vec![true, true, false, false], 2, 2);
        let l = saliency_contrastive_loss(&z, &part).unwrap();
        assert!((l.value - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saliency_saturates_with_empty_foreground() {
        let z = unit_map(2, 1, &[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let part = partition_from(vec![false, false], 2, 1);
        let anchors = SaliencyAnchors {
            mu_b: Some(vec![60.0, 0.0]),
            mu_f: None,
        };
        let l = saliency_contrastive_loss_with(&z, &part, &anchors).unwrap();
        assert!(l.value < 1e-20);
        let none = SaliencyAnchors { mu_b: None, mu_f: None };
        assert!(matches!(
            saliency_contrastive_loss_with(&z, &part, &none),
            Err(Error::BothSetsEmpty)
        ));
    }

    #[test]
    fn total_examples() {
        let c = LossComponents {
            recon: 1.0,
            proto: 2.0,
            cluster: 3.0,
            saliency: 4.0,
        };
        let w = LossWeights::default();
        assert!((total_loss(&c, &w) - 1.09).abs() < 1e-12);
        let zero = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..w
        };
        assert_eq!(total_loss(&c, &zero), 1.0);
        let double = LossWeights {
            lambda1: 0.02,
            lambda2: 0.02,
            lambda3: 0.02,
            ..w
        };
        assert!((total_loss(&c, &double) - 1.0 - 2.0 * 0.09).abs() < 1e-12);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            eta: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
