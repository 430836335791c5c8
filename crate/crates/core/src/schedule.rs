//! Closed-form diffusion arithmetic: the linear beta schedule, single-shot
//! forward noising, and the ancestral reverse step.
//!
//! Schedule quantities are kept in `f64`; tensors cross the boundary as `f32`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Schedule parameters as persisted in checkpoint metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub num_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule_kind: String,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            num_timesteps: 14_000,
            beta_start: 1e-4,
            beta_end: 0.02,
            schedule_kind: "linear".into(),
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        if self.schedule_kind != "linear" {
            return Err(Error::Unsupported(format!(
                "schedule kind {:?}",
                self.schedule_kind
            )));
        }
        make_linear_schedule(self.num_timesteps, self.beta_start, self.beta_end)
    }
}

/// Precomputed beta, alpha and cumulative-alpha sequences.
///
/// Immutable after construction; share freely across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Coefficients of one reverse step:
/// `x_{t-1} = mean_coeff_x * (x_t - mean_coeff_eps * eps_hat) + sigma * z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReverseStepParams {
    pub mean_coeff_x: f64,
    pub mean_coeff_eps: f64,
    pub sigma: f64,
}

/// Linear schedule with `num_timesteps` betas from `beta_start` to `beta_end`
/// inclusive. A single-step schedule holds just `beta_start`.
pub fn make_linear_schedule(num_timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if num_timesteps == 0 {
        return Err(Error::config("schedule needs at least one timestep"));
    }
    let in_unit = |b: f64| b > 0.0 && b < 1.0;
    if !in_unit(beta_start) || !in_unit(beta_end) {
        return Err(Error::config(format!(
            "betas must lie in (0, 1), got {beta_start} and {beta_end}"
        )));
    }
    if beta_start > beta_end {
        return Err(Error::config(format!(
            "beta_start {beta_start} exceeds beta_end {beta_end}"
        )));
    }
    let last = num_timesteps - 1;
    let betas: Vec<f64> = (0..num_timesteps)
        .map(|i| match i {
            0 => beta_start,
            i if i == last => beta_end,
            i => beta_start + (beta_end - beta_start) * i as f64 / last as f64,
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        params: ScheduleParams {
            num_timesteps,
            beta_start,
            beta_end,
            schedule_kind: "linear".into(),
        },
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn num_timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t >= self.num_timesteps() {
            return Err(Error::TimestepOutOfRange {
                t,
                num_timesteps: self.num_timesteps(),
            });
        }
        Ok(())
    }

    pub fn reverse_params(&self, t: usize) -> Result<ReverseStepParams> {
        self.check_timestep(t)?;
        Ok(ReverseStepParams {
            mean_coeff_x: 1.0 / self.alphas[t].sqrt(),
            mean_coeff_eps: self.betas[t] / (1.0 - self.alpha_bars[t]).sqrt(),
            sigma: if t == 0 { 0.0 } else { self.betas[t].sqrt() },
        })
    }

    /// `sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·eps` with one timestep for the whole tensor.
    pub fn forward_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_timestep(t)?;
        let (a, b) = (self.alpha_bars[t].sqrt(), (1.0 - self.alpha_bars[t]).sqrt());
        x0.zip_map(eps, |x, e| (a * x as f64 + b * e as f64) as f32)
    }

    /// Per-sample forward noising: `timesteps[i]` applies to `x0[i]`.
    pub fn forward_sample_batch(&self, x0: &Tensor, timesteps: &[usize], eps: &Tensor) -> Result<Tensor> {
        x0.ensure_same_shape(eps)?;
        let n = x0.dim(0);
        if timesteps.len() != n {
            return Err(Error::ShapeMismatch {
                expected: vec![n],
                actual: vec![timesteps.len()],
            });
        }
        let inner = x0.numel() / n;
        let mut out = x0.clone();
        for (i, &t) in timesteps.iter().enumerate() {
            self.check_timestep(t)?;
            let (a, b) = (self.alpha_bars[t].sqrt(), (1.0 - self.alpha_bars[t]).sqrt());
            let range = i * inner..(i + 1) * inner;
            for (o, &e) in out.data_mut()[range.clone()].iter_mut().zip(&eps.data()[range]) {
                *o = (a * *o as f64 + b * e as f64) as f32;
            }
        }
        Ok(out)
    }

    /// One ancestral step from `x_t` to `x_{t-1}`. `z` must be given for
    /// `t > 0` and is ignored at `t = 0`.
    pub fn reverse_step(&self, x_t: &Tensor, t: usize, eps_hat: &Tensor, z: Option<&Tensor>) -> Result<Tensor> {
        let p = self.reverse_params(t)?;
        x_t.ensure_same_shape(eps_hat)?;
        let mean = x_t.zip_map(eps_hat, |x, e| {
            (p.mean_coeff_x * (x as f64 - p.mean_coeff_eps * e as f64)) as f32
        })?;
        if t == 0 {
            return Ok(mean);
        }
        let z = z.ok_or_else(|| Error::config(format!("reverse step at t={t} requires a noise tensor")))?;
        mean.zip_map(z, |m, zv| (m as f64 + p.sigma * zv as f64) as f32)
    }
}

/// Mean squared difference between predicted and true noise.
pub fn training_loss(eps_hat: &Tensor, eps: &Tensor) -> Result<f64> {
    eps_hat.ensure_same_shape(eps)?;
    if eps.numel() == 0 {
        return Err(Error::Empty("loss over an empty tensor".into()));
    }
    let sum: f64 = eps_hat
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / eps.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t1(v: &[f32]) -> Tensor {
        Tensor::from_vec(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn two_step_schedule_hits_endpoints() {
        let s = make_linear_schedule(2, 1e-4, 0.02).unwrap();
        assert_eq!(s.betas(), &[1e-4, 0.02]);
    }

    #[test]
    fn single_step_schedule_is_beta_start() {
        let s = make_linear_schedule(1, 0.3, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.3]);
        assert_eq!(s.alpha_bars(), &[0.7]);
    }

    #[test]
    fn three_step_alpha_bars_by_hand() {
        let s = make_linear_schedule(3, 0.1, 0.3).unwrap();
        let expected = [0.9, 0.9 * 0.8, 0.9 * 0.8 * 0.7];
        for (a, e) in s.alpha_bars().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
        assert!((expected[1] - 0.72).abs() < 1e-15 && (expected[2] - 0.504).abs() < 1e-15);
    }

    #[test]
    fn rejects_invalid_arguments() {
        assert!(make_linear_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.02).is_err());
        assert!(make_linear_schedule(10, 1e-4, 1.0).is_err());
        assert!(make_linear_schedule(10, 0.03, 0.02).is_err());
        assert!(ScheduleParams {
            schedule_kind: "cosine".into(),
            ..Default::default()
        }
        .build()
        .is_err());
    }

    #[test]
    fn forward_sample_degenerate_cases() {
        let s = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        let x0 = t1(&[0.5, -1.0, 0.25]);
        let eps = t1(&[1.0, 2.0, -0.5]);
        let ab = s.alpha_bars()[4];
        let attenuated = s.forward_sample(&x0, 4, &Tensor::zeros(vec![3])).unwrap();
        for (o, x) in attenuated.data().iter().zip(x0.data()) {
            assert!((*o as f64 - ab.sqrt() * *x as f64).abs() < 1e-6);
        }
        let noise_only = s.forward_sample(&Tensor::zeros(vec![3]), 4, &eps).unwrap();
        for (o, e) in noise_only.data().iter().zip(eps.data()) {
            assert!((*o as f64 - (1.0 - ab).sqrt() * *e as f64).abs() < 1e-6);
        }
        assert!(s.forward_sample(&x0, 10, &eps).is_err());
        assert!(s.forward_sample(&x0, 0, &t1(&[1.0])).is_err());
    }

    #[test]
    fn reverse_step_final_step_ignores_noise() {
        let s = make_linear_schedule(5, 1e-3, 0.02).unwrap();
        let x = t1(&[0.3, -0.2]);
        let e = t1(&[0.1, 0.4]);
        let a = s.reverse_step(&x, 0, &e, Some(&t1(&[100.0, -100.0]))).unwrap();
        let b = s.reverse_step(&x, 0, &e, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.reverse_params(0).unwrap().sigma, 0.0);
        assert!(s.reverse_step(&x, 3, &e, None).is_err());
    }

    #[test]
    fn reverse_step_mean_by_hand() {
        let s = make_linear_schedule(3, 0.1, 0.3).unwrap();
        let out = s
            .reverse_step(&t1(&[1.0]), 1, &t1(&[0.0]), Some(&t1(&[0.0])))
            .unwrap();
        assert!((out.data()[0] as f64 - 1.118034).abs() < 1e-6);
    }

    #[test]
    fn single_step_inversion_recovers_signal() {
        let s = make_linear_schedule(1, 0.02, 0.02).unwrap();
        let x0 = t1(&[0.9, -0.4, 0.0, 1.0]);
        let eps = t1(&[-1.3, 0.2, 2.2, 0.7]);
        let xt = s.forward_sample(&x0, 0, &eps).unwrap();
        let back = s.reverse_step(&xt, 0, &eps, None).unwrap();
        assert!(back.max_abs_diff(&x0) < 1e-5);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(training_loss(&t1(&[0.3, 0.7]), &t1(&[0.3, 0.7])).unwrap(), 0.0);
        assert_eq!(training_loss(&t1(&[1.0, 1.0]), &t1(&[0.0, 0.0])).unwrap(), 1.0);
        assert_eq!(training_loss(&t1(&[2.0, 0.0]), &t1(&[0.0, 0.0])).unwrap(), 2.0);
        assert!(training_loss(&t1(&[2.0]), &t1(&[0.0, 0.0])).is_err());
    }

    proptest! {
        #[test]
        fn schedule_invariants(t in 1usize..400, start in 1e-5f64..0.1, span in 0.0f64..0.5) {
            let end = (start + span).min(0.99);
            let s = make_linear_schedule(t, start, end).unwrap();
            prop_assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
            prop_assert!((s.alpha_bars()[0] - (1.0 - start)).abs() < 1e-15);
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            prop_assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
            if end > start {
                prop_assert!(s.betas().windows(2).all(|w| w[1] > w[0]));
            }
            for step in 0..t {
                let p = s.reverse_params(step).unwrap();
                prop_assert!(p.mean_coeff_x >= 1.0);
                prop_assert_eq!(p.sigma == 0.0, step == 0);
            }
        }

        #[test]
        fn loss_is_symmetric_and_nonnegative(a in proptest::collection::vec(-5f32..5.0, 1..32), shift in -1f32..1.0) {
            let b: Vec<f32> = a.iter().map(|v| v + shift).collect();
            let (ta, tb) = (t1(&a), t1(&b));
            let l1 = training_loss(&ta, &tb).unwrap();
            let l2 = training_loss(&tb, &ta).unwrap();
            prop_assert!(l1 >= 0.0);
            prop_assert_eq!(l1, l2);
            prop_assert_eq!(l1 == 0.0, ta == tb);
        }
    }
}
