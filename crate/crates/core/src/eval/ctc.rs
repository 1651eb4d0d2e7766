//! Connectionist temporal classification loss and greedy decoding.
//!
//! The loss is the negative log of the summed probability of every frame
//! alignment that collapses to the target. It is written as a log-space
//! forward recursion over tensor ops so the gradient comes from autograd.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};

pub const BLANK: u32 = 0;
/// Stand-in for log 0 that keeps `x − max` finite.
const NEG: f64 = -1e30;

/// Whether `frames` frames can emit `label` (repeats need a blank between).
pub fn ctc_feasible(label: &[u32], frames: usize) -> bool {
    let repeats = label.windows(2).filter(|w| w[0] == w[1]).count();
    label.len() + repeats <= frames
}

/// log Σ exp over `dim`, with the shift detached (its gradient cancels).
fn log_sum_exp(x: &Tensor, dim: usize) -> Result<Tensor> {
    let m = x.max_keepdim(dim)?.detach();
    let s = x.broadcast_sub(&m)?.exp()?.sum_keepdim(dim)?.log()?;
    Ok((s + m)?.squeeze(dim)?)
}

fn shift_right(x: &Tensor, by: usize) -> Result<Tensor> {
    let (b, s) = x.dims2()?;
    let pad = Tensor::full(NEG, (b, by.min(s)), x.device())?.to_dtype(x.dtype())?;
    if by >= s {
        return Ok(pad);
    }
    Ok(Tensor::cat(&[&pad, &x.narrow(1, 0, s - by)?], 1)?)
}

/// Per-item CTC negative log-likelihood, shape `(B,)`.
///
/// `log_probs` is `(B, T, C)` log-softmax output with class 0 the blank;
/// targets hold class ids in `1..C`.
pub fn ctc_loss_per_item(log_probs: &Tensor, targets: &[Vec<u32>]) -> Result<Tensor> {
    let (b, t_len, classes) = log_probs.dims3()?;
    if targets.len() != b {
        return Err(Error::shape(format!("{b} targets"), format!("{}", targets.len())));
    }
    for tg in targets {
        if tg.iter().any(|&c| c == BLANK || c as usize >= classes) {
            return Err(Error::Invalid(format!("target ids must lie in 1..{classes}: {tg:?}")));
        }
    }
    let dtype = log_probs.dtype();
    let dev = log_probs.device();
    let l_max = targets.iter().map(Vec::len).max().unwrap_or(0);
    let s = 2 * l_max + 1;
    let mut ext = vec![BLANK; b * s];
    let mut skip = vec![NEG; b * s];
    let mut valid = vec![NEG; b * s];
    let mut init = vec![NEG; b * s];
    let mut ends = vec![0u32; b * 2];
    let mut end_mask = vec![0f64; b * 2];
    for (i, tg) in targets.iter().enumerate() {
        let row = i * s;
        for (j, &c) in tg.iter().enumerate() {
            ext[row + 2 * j + 1] = c;
        }
        let n = 2 * tg.len() + 1;
        for p in 0..n {
            valid[row + p] = 0.0;
            if p >= 2 && ext[row + p] != BLANK && ext[row + p] != ext[row + p - 2] {
                skip[row + p] = 0.0;
            }
        }
        init[row] = 0.0;
        if n > 1 {
            init[row + 1] = 0.0;
        }
        ends[2 * i] = (n - 1) as u32;
        ends[2 * i + 1] = n.saturating_sub(2) as u32;
        if n == 1 {
            end_mask[2 * i + 1] = NEG;
        }
    }
    let as_t = |v: Vec<f64>, shape: (usize, usize)| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, shape, dev)?.to_dtype(dtype)?)
    };
    let idx = Tensor::from_vec(ext, (b, 1, s), dev)?
        .broadcast_as((b, t_len, s))?
        .contiguous()?;
    let emit = log_probs.contiguous()?.gather(&idx, 2)?;
    let skip = as_t(skip, (b, s))?;
    let valid = as_t(valid, (b, s))?;
    let mut alpha = ((emit.get_on_dim(1, 0)? + as_t(init, (b, s))?)? + &valid)?;
    for t in 1..t_len {
        let stay = alpha.clone();
        let step = shift_right(&alpha, 1)?;
        let jump = (shift_right(&alpha, 2)? + &skip)?;
        let merged = log_sum_exp(&Tensor::stack(&[stay, step, jump], 2)?, 2)?;
        alpha = ((merged + emit.get_on_dim(1, t)?)? + &valid)?;
    }
    let ends = Tensor::from_vec(ends, (b, 2), dev)?;
    let last = (alpha.gather(&ends, 1)? + as_t(end_mask, (b, 2))?)?;
    Ok(log_sum_exp(&last, 1)?.neg()?)
}

pub fn ctc_loss(log_probs: &Tensor, targets: &[Vec<u32>]) -> Result<Tensor> {
    Ok(ctc_loss_per_item(log_probs, targets)?.mean_all()?)
}

/// Best class per frame, repeats merged, blanks dropped. Input `(B, T, C)`.
pub fn greedy_decode(log_probs: &Tensor) -> Result<Vec<Vec<u32>>> {
    let best = log_probs.argmax(D::Minus1)?.to_dtype(DType::U32)?.to_vec2::<u32>()?;
    Ok(best
        .into_iter()
        .map(|frames| {
            let mut out = Vec::new();
            let mut prev = None;
            for c in frames {
                if Some(c) != prev && c != BLANK {
                    out.push(c);
                }
                prev = Some(c);
            }
            out
        })
        .collect())
}
