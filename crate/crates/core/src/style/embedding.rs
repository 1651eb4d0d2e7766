//! Style vectors and their projection into the denoiser's context space.

use candle_core::{Device, Module, Tensor};
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::linear;

/// How an embedding came to be.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Single,
    Aggregated { k: usize },
    Interpolated { lambda: f64 },
    Mixed { weights: Vec<f64> },
    Perturbed { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleEmbedding {
    pub values: Vec<f32>,
    pub provenance: Provenance,
}

impl StyleEmbedding {
    pub fn new(values: Vec<f32>, provenance: Provenance) -> Self {
        Self { values, provenance }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.values.clone(), (1, self.dim()), &Device::Cpu)?)
    }
}

pub fn check_same_dim(embeddings: &[&StyleEmbedding]) -> Result<usize> {
    let d = embeddings
        .first()
        .ok_or_else(|| Error::Invalid("no style embeddings given".into()))?
        .dim();
    if let Some(e) = embeddings.iter().find(|e| e.dim() != d) {
        return Err(Error::shape(format!("embedding dim {d}"), format!("dim {}", e.dim())));
    }
    Ok(d)
}

/// Element-wise mean of the exemplar embeddings.
pub fn aggregate_exemplars(embeddings: &[StyleEmbedding]) -> Result<StyleEmbedding> {
    let refs: Vec<&StyleEmbedding> = embeddings.iter().collect();
    let d = check_same_dim(&refs)?;
    let k = embeddings.len();
    // Each coordinate is summed in sorted order, so any input order gives
    // the same bits.
    let mut column = Vec::with_capacity(k);
    let mean = (0..d)
        .map(|j| {
            column.clear();
            column.extend(embeddings.iter().map(|e| e.values[j] as f64));
            column.sort_by(f64::total_cmp);
            (column.iter().sum::<f64>() / k as f64) as f32
        })
        .collect();
    Ok(StyleEmbedding::new(
        mean,
        Provenance::Aggregated { k },
    ))
}

/// Trainable affine map from a d-wide vector to the d_model-wide context.
pub struct Projector {
    layer: candle_nn::Linear,
    in_dim: usize,
    out_dim: usize,
}

impl Projector {
    pub fn new(in_dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            layer: linear(in_dim, out_dim, vb)?,
            in_dim,
            out_dim,
        })
    }

    /// Fixed projector from an explicit `(out, in)` weight and bias.
    pub fn from_weights(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (out_dim, in_dim) = weight.dims2()?;
        if bias.dims() != [out_dim] {
            return Err(Error::shape(format!("[{out_dim}]"), format!("{:?}", bias.dims())));
        }
        Ok(Self {
            layer: candle_nn::Linear::new(weight, Some(bias)),
            in_dim,
            out_dim,
        })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        let dev = Device::Cpu;
        Self::from_weights(
            Tensor::eye(dim, candle_core::DType::F32, &dev)?,
            Tensor::zeros(dim, candle_core::DType::F32, &dev)?,
        )
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `(B, d)` to `(B, d_model)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.dim(candle_core::D::Minus1)?;
        if d != self.in_dim {
            return Err(Error::shape(format!("width {}", self.in_dim), format!("width {d}")));
        }
        Ok(self.layer.forward(x)?)
    }

    pub fn project(&self, style: &StyleEmbedding) -> Result<Vec<f32>> {
        Ok(self.forward(&style.to_tensor()?)?.squeeze(0)?.to_vec1()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(v: &[f32]) -> StyleEmbedding {
        StyleEmbedding::new(v.to_vec(), Provenance::Single)
    }

    #[test]
    fn mean_of_two() {
        let a = aggregate_exemplars(&[emb(&[1.0, 0.0]), emb(&[3.0, 2.0])]).unwrap();
        assert_eq!(a.values, vec![2.0, 1.0]);
        assert_eq!(a.provenance, Provenance::Aggregated { k: 2 });
    }

    #[test]
    fn aggregate_rejects_empty_and_ragged() {
        assert!(aggregate_exemplars(&[]).is_err());
        assert!(aggregate_exemplars(&[emb(&[1.0]), emb(&[1.0, 2.0])]).is_err());
    }

    #[test]
    fn identity_projection() {
        let p = Projector::identity(3).unwrap();
        assert_eq!(p.project(&emb(&[1.0, -2.0, 0.5])).unwrap(), vec![1.0, -2.0, 0.5]);
        assert!(p.project(&emb(&[1.0])).is_err());
    }

    proptest! {
        #[test]
        fn aggregate_of_copies_is_the_vector(v in prop::collection::vec(-5f32..5.0, 1..8), k in 1usize..=5) {
            let copies = vec![emb(&v); k];
            let a = aggregate_exemplars(&copies).unwrap();
            for (x, y) in a.values.iter().zip(&v) {
                prop_assert!((x - y).abs() <= 1e-5 * (1.0 + y.abs()));
            }
        }
    }
}
