//! Linear β schedule, forward noising and the deterministic DDIM update.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// β linear in t from `beta_start` (t = 1) to `beta_end` (t = T).
pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Config("schedule needs at least one timestep".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..timesteps)
        .map(|i| {
            if timesteps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(timesteps);
    let mut prod = 1.0;
    for b in &betas {
        prod *= 1.0 - b;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        timesteps,
        beta_start,
        beta_end,
        betas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn from_config(c: &crate::config::DiffusionConfig) -> Result<Self> {
        make_schedule(c.timesteps, c.beta_start, c.beta_end)
    }

    /// β_t for 1 ≤ t ≤ T.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// ᾱ_t with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps {
            return Err(Error::Invalid(format!(
                "timestep {t} outside 1..={}",
                self.timesteps
            )));
        }
        Ok(())
    }

    /// `steps` timesteps evenly spaced from T down to 1, each paired with its
    /// successor; the last pair ends at 0.
    pub fn sampling_pairs(&self, steps: usize) -> Result<Vec<(usize, usize)>> {
        self.sampling_pairs_from(self.timesteps, steps)
    }

    /// As `sampling_pairs` but descending from `t_start`; `steps` is capped
    /// at `t_start`.
    pub fn sampling_pairs_from(&self, t_start: usize, steps: usize) -> Result<Vec<(usize, usize)>> {
        self.check_step(t_start)?;
        if steps == 0 || steps > self.timesteps {
            return Err(Error::Invalid(format!(
                "sampler steps {steps} outside 1..={}",
                self.timesteps
            )));
        }
        let steps = steps.min(t_start);
        let top = t_start as f64;
        let mut ts: Vec<usize> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    t_start
                } else {
                    (top - i as f64 * (top - 1.0) / (steps - 1) as f64).round() as usize
                }
            })
            .collect();
        ts.dedup();
        Ok(ts
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, ts.get(i + 1).copied().unwrap_or(0)))
            .collect())
    }
}

fn check_len(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} values", a.len()), format!("{}", b.len())));
    }
    Ok(())
}

/// `√ᾱ_t·z0 + √(1−ᾱ_t)·eps`.
pub fn q_sample(z0: &[f32], t: usize, eps: &[f32], schedule: &NoiseSchedule) -> Result<Vec<f32>> {
    check_len(z0, eps)?;
    schedule.check_step(t)?;
    Ok(q_sample_with(z0, eps, schedule.alpha_bar(t)))
}

/// Forward noising at an explicit ᾱ.
pub fn q_sample_with(z0: &[f32], eps: &[f32], alpha_bar: f64) -> Vec<f32> {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z0.iter()
        .zip(eps)
        .map(|(&z, &e)| (a * z as f64 + s * e as f64) as f32)
        .collect()
}

/// One η = 0 step from ᾱ_t to ᾱ_prev; also returns the x0 estimate.
pub fn ddim_update(z_t: &[f32], eps_hat: &[f32], alpha_bar: f64, alpha_bar_prev: f64) -> (Vec<f32>, Vec<f32>) {
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let (pa, pn) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
    let mut x0 = Vec::with_capacity(z_t.len());
    let mut prev = Vec::with_capacity(z_t.len());
    for (&z, &e) in z_t.iter().zip(eps_hat) {
        let x = (z as f64 - sn * e as f64) / sa;
        x0.push(x as f32);
        prev.push((pa * x + pn * e as f64) as f32);
    }
    (prev, x0)
}

/// Deterministic DDIM step from t to t_prev (t_prev = 0 lands on x0).
pub fn ddim_step(
    z_t: &[f32],
    eps_hat: &[f32],
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f32>> {
    check_len(z_t, eps_hat)?;
    schedule.check_step(t)?;
    if t_prev >= t {
        return Err(Error::Invalid(format!("ddim step must descend, got {t} -> {t_prev}")));
    }
    Ok(ddim_update(z_t, eps_hat, schedule.alpha_bar(t), schedule.alpha_bar(t_prev)).0)
}

/// Per-item `(B,1,1,1)` coefficient tensor.
pub(crate) fn per_item(values: &[f64], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values.to_vec(), (values.len(), 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Batched forward noising with one timestep per item.
pub fn q_sample_tensor(z0: &Tensor, t: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return Err(Error::shape(format!("{:?}", z0.dims()), format!("{:?}", eps.dims())));
    }
    if t.len() != z0.dim(0)? {
        return Err(Error::shape(format!("{} timesteps", z0.dim(0)?), format!("{}", t.len())));
    }
    for &s in t {
        schedule.check_step(s)?;
    }
    let a: Vec<f64> = t.iter().map(|&s| schedule.alpha_bar(s).sqrt()).collect();
    let n: Vec<f64> = t.iter().map(|&s| (1.0 - schedule.alpha_bar(s)).sqrt()).collect();
    let dt = z0.dtype();
    Ok((z0.broadcast_mul(&per_item(&a, dt)?)? + eps.broadcast_mul(&per_item(&n, dt)?)?)?)
}

/// Batched DDIM step where every item shares `(t, t_prev)`.
pub fn ddim_step_tensor(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_step(t)?;
    if t_prev >= t {
        return Err(Error::Invalid(format!("ddim step must descend, got {t} -> {t_prev}")));
    }
    let (ab, abp) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let x0 = ((z_t - (eps_hat * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
    Ok(((x0 * abp.sqrt())? + (eps_hat * (1.0 - abp).sqrt())?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.3, 0.3).unwrap();
        assert!((s.alpha_bar(1) - 0.7).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn standard_schedule_ends_near_zero_and_decreases() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar(1000) < 0.01);
        assert!((s.alpha_bar(1) - (1.0 - 1e-4)).abs() < 1e-15);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        for t in 1..1000 {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
    }

    #[test]
    fn bad_bounds() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 0.01, 1.0).is_err());
    }

    #[test]
    fn q_sample_limits() {
        let z0 = [1.0f32, -2.0, 0.5];
        let eps = [0.3f32, 0.1, -1.0];
        assert_eq!(q_sample_with(&z0, &eps, 1.0), z0.to_vec());
        assert_eq!(q_sample_with(&z0, &eps, 0.0), eps.to_vec());
        assert_eq!(q_sample_with(&[1.0; 4], &[0.0; 4], 0.25), vec![0.5; 4]);
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        assert!(q_sample(&z0, 0, &eps, &s).is_err());
        assert!(q_sample(&z0, 11, &eps, &s).is_err());
        assert!(q_sample(&z0, 1, &eps[..2], &s).is_err());
    }

    #[test]
    fn hand_worked_ddim_update() {
        let (prev, x0) = ddim_update(&[1.0; 3], &[0.5; 3], 0.25, 0.81);
        for (p, x) in prev.iter().zip(&x0) {
            assert!((x - 1.1340).abs() < 1e-4, "{x}");
            assert!((p - 1.2386).abs() < 1e-4, "{p}");
        }
    }

    #[test]
    fn exact_noise_inverts_and_final_step_returns_x0() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let mut r = rng::seeded(0);
        let z0 = rng::normal_vec(&mut r, 64);
        let eps = rng::normal_vec(&mut r, 64);
        let zt = q_sample(&z0, 700, &eps, &s).unwrap();
        let (_, x0) = ddim_update(&zt, &eps, s.alpha_bar(700), s.alpha_bar(0));
        let last = ddim_step(&zt, &eps, 700, 0, &s).unwrap();
        assert_eq!(last, x0);
        for (a, b) in x0.iter().zip(&z0) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!(ddim_step(&zt, &eps, 5, 5, &s).is_err());
    }

    #[test]
    fn oracle_chain_recovers_z0() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let mut r = rng::seeded(1);
        let z0 = rng::normal_vec(&mut r, 128);
        let eps = rng::normal_vec(&mut r, 128);
        let mut z = q_sample(&z0, 1000, &eps, &s).unwrap();
        for (t, tp) in s.sampling_pairs(50).unwrap() {
            // the oracle knows z0, so it reports the exact noise of the current state
            let ab = s.alpha_bar(t);
            let e: Vec<f32> = z
                .iter()
                .zip(&z0)
                .map(|(&zt, &x)| ((zt as f64 - ab.sqrt() * x as f64) / (1.0 - ab).sqrt()) as f32)
                .collect();
            z = ddim_step(&z, &e, t, tp, &s).unwrap();
        }
        let err = z.iter().zip(&z0).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sampling_pairs_layout() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let p = s.sampling_pairs(50).unwrap();
        assert_eq!(p.len(), 50);
        assert_eq!(p[0].0, 1000);
        assert_eq!(p[49], (1, 0));
        assert_eq!(s.sampling_pairs(1).unwrap(), vec![(1000, 0)]);
        assert!(s.sampling_pairs(0).is_err());
        let short = s.sampling_pairs_from(10, 50).unwrap();
        assert_eq!(short.len(), 10);
        assert_eq!(short[0], (10, 9));
        let all = s.sampling_pairs(1000).unwrap();
        assert_eq!(all.len(), 1000);
    }

    #[test]
    fn tensor_forms_match_slices() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let mut r = rng::seeded(2);
        let z0 = rng::normal_vec(&mut r, 8);
        let eps = rng::normal_vec(&mut r, 8);
        let zt = Tensor::from_vec(z0.clone(), (2, 4, 1, 1), &Device::Cpu).unwrap();
        let et = Tensor::from_vec(eps.clone(), (2, 4, 1, 1), &Device::Cpu).unwrap();
        let q = q_sample_tensor(&zt, &[30, 30], &et, &s).unwrap();
        let want = q_sample(&z0, 30, &eps, &s).unwrap();
        let got: Vec<f32> = q.flatten_all().unwrap().to_vec1().unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
        let d = ddim_step_tensor(&q, &et, 30, 10, &s).unwrap();
        let want = ddim_step(&want, &eps, 30, 10, &s).unwrap();
        let got: Vec<f32> = d.flatten_all().unwrap().to_vec1().unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    proptest! {
        #[test]
        fn schedule_invariants(t in 1usize..300, b0 in 1e-5f64..0.05, span in 0f64..0.2) {
            let b1 = (b0 + span).min(0.5);
            let s = make_schedule(t, b0, b1).unwrap();
            for i in 1..=t {
                prop_assert!(s.beta(i) > 0.0 && s.beta(i) < 1.0);
                if i > 1 {
                    prop_assert!(s.alpha_bar(i) < s.alpha_bar(i - 1));
                }
            }
            prop_assert!((s.alpha_bar(1) - (1.0 - b0)).abs() < 1e-12);
        }
    }
}
