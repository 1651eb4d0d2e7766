//! Hybrid metric-learning / classification objective.

use candle_core::{DType, Tensor, D};

use crate::config::LossVariant;
use crate::error::{Error, Result};

/// Minkowski distance `‖a − b‖_p`.
pub fn p_distance(a: &[f32], b: &[f32], p: f64) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| ((*x as f64) - (*y as f64)).abs().powf(p))
        .sum();
    s.powf(1.0 / p)
}

/// `max(0, ‖a−p‖ − ‖a−n‖ + margin)` for single embeddings.
pub fn triplet_loss(
    anchor: &[f32],
    positive: &[f32],
    negative: &[f32],
    margin: f64,
    p: f64,
) -> Result<f64> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(Error::shape(
            format!("three vectors of length {}", anchor.len()),
            format!("lengths {}, {}", positive.len(), negative.len()),
        ));
    }
    if margin < 0.0 {
        return Err(Error::Invalid(format!("negative margin {margin}")));
    }
    let dp = p_distance(anchor, positive, p);
    let dn = p_distance(anchor, negative, p);
    Ok((dp - dn + margin).max(0.0))
}

/// Row-wise `‖a − b‖_p` of two `(B, d)` tensors. A tiny constant inside the
/// root keeps the gradient finite when rows coincide.
pub fn batch_p_distance(a: &Tensor, b: &Tensor, p: f64) -> Result<Tensor> {
    let diff = (a - b)?;
    let eps = 1e-12;
    let out = if p == 2.0 {
        (diff.sqr()?.sum(D::Minus1)? + eps)?.sqrt()?
    } else if p == 1.0 {
        diff.abs()?.sum(D::Minus1)?
    } else {
        // |x|^p computed as exp(p log|x|) with the same guard.
        let powed = ((diff.abs()? + eps)?.log()? * p)?.exp()?;
        (powed.sum(D::Minus1)?.log()? * (1.0 / p))?.exp()?
    };
    Ok(out)
}

/// Per-row triplet hinge, shape `(B,)`.
pub fn batch_triplet_loss(
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    margin: f64,
    p: f64,
) -> Result<Tensor> {
    if anchor.dims() != positive.dims() || anchor.dims() != negative.dims() {
        return Err(Error::shape(
            format!("{:?}", anchor.dims()),
            format!("{:?} / {:?}", positive.dims(), negative.dims()),
        ));
    }
    let dp = batch_p_distance(anchor, positive, p)?;
    let dn = batch_p_distance(anchor, negative, p)?;
    Ok(((dp - dn)? + margin)?.relu()?)
}

/// The combined loss and its two terms, each a batch mean.
#[derive(Debug, Clone)]
pub struct HybridLoss {
    pub total: Tensor,
    pub class: Tensor,
    pub triplet: Tensor,
}

impl HybridLoss {
    pub fn values(&self) -> Result<(f64, f64, f64)> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok((f(&self.total)?, f(&self.class)?, f(&self.triplet)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridParams {
    pub margin: f64,
    pub p: f64,
    pub variant: LossVariant,
}

impl HybridParams {
    pub fn new(margin: f64, p: f64, variant: LossVariant) -> Self {
        Self { margin, p, variant }
    }
}

/// Combines writer cross-entropy on the anchor logits with the triplet term.
/// The variant switches either term off.
pub fn hybrid_loss_from_parts(
    anchor_logits: &Tensor,
    labels: &[usize],
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    params: HybridParams,
) -> Result<HybridLoss> {
    let HybridParams { margin, p, variant } = params;
    let n_classes = anchor_logits.dim(D::Minus1)?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Invalid(format!(
            "writer label {bad} outside classifier range 0..{n_classes}"
        )));
    }
    let zero = anchor_logits.sum_all()?.zeros_like()?;
    let class = if variant == LossVariant::Triplet {
        zero.clone()
    } else {
        let targets = Tensor::from_vec(
            labels.iter().map(|&l| l as u32).collect::<Vec<_>>(),
            labels.len(),
            anchor_logits.device(),
        )?;
        candle_nn::loss::cross_entropy(anchor_logits, &targets)?
    };
    let triplet = if variant == LossVariant::Class {
        zero
    } else {
        batch_triplet_loss(anchor, positive, negative, margin, p)?.mean_all()?
    };
    let total = (&class + &triplet)?;
    Ok(HybridLoss {
        total,
        class,
        triplet,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn coincident_vectors_give_the_margin() {
        let v = [0.3f32, -1.0, 2.0];
        assert_eq!(triplet_loss(&v, &v, &v, 0.7, 2.0).unwrap(), 0.7);
    }

    #[test]
    fn far_negative_gives_zero() {
        // f_a = f_p, ‖f_a − f_n‖₂ = 2, margin 1 → max(0, 0 − 2 + 1) = 0
        let a = [0.0f32, 0.0];
        let n = [0.0f32, 2.0];
        assert_eq!(triplet_loss(&a, &a, &n, 1.0, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn violated_triplet() {
        // δ+ = 3, δ− = 1, margin 1 → 3
        let a = [0.0f32, 0.0];
        let p = [3.0f32, 0.0];
        let n = [0.0f32, 1.0];
        assert!((triplet_loss(&a, &p, &n, 1.0, 2.0).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(triplet_loss(&[0.0], &[0.0, 1.0], &[0.0], 1.0, 2.0).is_err());
        assert!(triplet_loss(&[0.0], &[0.0], &[0.0], -1.0, 2.0).is_err());
    }

    #[test]
    fn batched_matches_scalar_for_several_norms() {
        let dev = Device::Cpu;
        let a = [[0.5f32, -1.0, 2.0], [1.0, 1.0, 1.0]];
        let p = [[0.0f32, 0.0, 1.0], [1.5, 1.0, 0.0]];
        let n = [[0.5f32, -0.5, 2.0], [-2.0, 3.0, 1.0]];
        let t = |x: &[[f32; 3]; 2]| Tensor::new(x, &dev).unwrap();
        for norm in [1.0, 2.0, 3.0] {
            let got: Vec<f32> = batch_triplet_loss(&t(&a), &t(&p), &t(&n), 0.5, norm)
                .unwrap()
                .to_vec1()
                .unwrap();
            for i in 0..2 {
                let want = triplet_loss(&a[i], &p[i], &n[i], 0.5, norm).unwrap();
                assert!((got[i] as f64 - want).abs() < 1e-4, "p={norm}: {} vs {want}", got[i]);
            }
        }
    }

    #[test]
    fn uniform_classifier_over_four_writers_costs_ln4() {
        let dev = Device::Cpu;
        let logits = Tensor::zeros((3, 4), DType::F64, &dev).unwrap();
        let f = Tensor::ones((3, 2), DType::F64, &dev).unwrap();
        let far = (Tensor::ones((3, 2), DType::F64, &dev).unwrap() * 10.0).unwrap();
        let l = hybrid_loss_from_parts(&logits, &[0, 1, 3], &f, &f, &far, HybridParams::new(1.0, 2.0, LossVariant::Hybrid))
            .unwrap();
        let (total, class, triplet) = l.values().unwrap();
        assert!((total - 4f64.ln()).abs() < 1e-9);
        assert!((total - (class + triplet)).abs() < 1e-6);
        assert_eq!(triplet, 0.0);
    }

    #[test]
    fn confident_correct_classifier_and_satisfied_triplets_give_zero() {
        let dev = Device::Cpu;
        let logits = Tensor::new(&[[1e4f64, 0.0], [0.0, 1e4]], &dev).unwrap();
        let f = Tensor::zeros((2, 2), DType::F64, &dev).unwrap();
        let far = Tensor::new(&[[0.0f64, 5.0], [5.0, 0.0]], &dev).unwrap();
        let l = hybrid_loss_from_parts(&logits, &[0, 1], &f, &f, &far, HybridParams::new(1.0, 2.0, LossVariant::Hybrid))
            .unwrap();
        let (total, class, triplet) = l.values().unwrap();
        assert!(class.abs() < 1e-12 && triplet == 0.0 && total.abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let dev = Device::Cpu;
        let logits = Tensor::zeros((1, 2), DType::F64, &dev).unwrap();
        let f = Tensor::zeros((1, 2), DType::F64, &dev).unwrap();
        assert!(
            hybrid_loss_from_parts(&logits, &[2], &f, &f, &f, HybridParams::new(1.0, 2.0, LossVariant::Hybrid)).is_err()
        );
    }

    #[test]
    fn variants_switch_terms_off() {
        let dev = Device::Cpu;
        let logits = Tensor::zeros((1, 2), DType::F64, &dev).unwrap();
        let f = Tensor::zeros((1, 2), DType::F64, &dev).unwrap();
        let (_, c, t) = hybrid_loss_from_parts(&logits, &[0], &f, &f, &f, HybridParams::new(1.0, 2.0, LossVariant::Class))
            .unwrap()
            .values()
            .unwrap();
        assert!(c > 0.0 && t == 0.0);
        let (_, c, t) =
            hybrid_loss_from_parts(&logits, &[0], &f, &f, &f, HybridParams::new(1.0, 2.0, LossVariant::Triplet))
                .unwrap()
                .values()
                .unwrap();
        assert!(c == 0.0 && t > 0.0);
    }
}
