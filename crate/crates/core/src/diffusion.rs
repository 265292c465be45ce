//! Denoising diffusion machinery: cosine noise schedule, forward noising,
//! posterior sampling from a predicted noise pattern, the conditional reverse
//! loop and the noise-regression objective.
//!
//! Steps are 1-based: `t ∈ [1, T]`, with `ᾱ_0 = 1`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, invalid, Result};
use crate::volume::{ChannelVolume, PatchSpec};

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas (each in `(0, 1)`).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(invalid!("schedule needs at least 2 steps"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(invalid!("beta {b} outside (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut run = 1.0;
        for a in &alpha {
            run *= a;
            alpha_bar.push(run);
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Fixed posterior variance `β̃_t = β_t (1 - ᾱ_{t-1}) / (1 - ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid!("step {t} outside [1, {}]", self.steps()));
        }
        Ok(())
    }
}

/// Cosine schedule: `f(t) = cos²(((t/T + s)/(1 + s)) π/2)`, `s = 0.008`,
/// `β_t = min(1 - f(t)/f(t-1), 0.999)`, `ᾱ` the running product of `1 - β`.
pub fn cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(invalid!("cosine schedule needs T >= 2, got {steps}"));
    }
    let f = |t: usize| {
        let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    let beta = (1..=steps).map(|t| (1.0 - f(t) / f(t - 1)).min(MAX_BETA)).collect();
    NoiseSchedule::from_betas(beta)
}

fn same_shape(a: &ChannelVolume, b: &ChannelVolume, what: &str) -> Result<()> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(invalid!(
            "{what}: shape {:?}x{} vs {:?}x{}",
            a.dims(),
            a.channels(),
            b.dims(),
            b.channels()
        ));
    }
    Ok(())
}

fn combine(a: &ChannelVolume, ka: f64, b: &ChannelVolume, kb: f64) -> ChannelVolume {
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = ka * *o + kb * v;
    }
    out
}

/// Standard-normal volume of the given shape, drawn in flat order.
pub fn normal_volume<R: Rng + ?Sized>(
    dims: crate::volume::Dims,
    channels: usize,
    rng: &mut R,
) -> Result<ChannelVolume> {
    let mut v = ChannelVolume::zeros(dims, channels)?;
    for x in v.data_mut() {
        *x = rng.sample(StandardNormal);
    }
    Ok(v)
}

/// Closed-form forward noising `√ᾱ_t s0 + √(1-ᾱ_t) ε`.
pub fn q_sample(
    s0: &ChannelVolume,
    t: usize,
    eps: &ChannelVolume,
    sched: &NoiseSchedule,
) -> Result<ChannelVolume> {
    sched.check_step(t)?;
    same_shape(s0, eps, "q_sample")?;
    let ab = sched.alpha_bar(t);
    Ok(combine(s0, ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// One Markov step `√(1-β_t) s_{t-1} + √β_t ε`.
pub fn q_step(
    s_prev: &ChannelVolume,
    t: usize,
    eps: &ChannelVolume,
    sched: &NoiseSchedule,
) -> Result<ChannelVolume> {
    sched.check_step(t)?;
    same_shape(s_prev, eps, "q_step")?;
    let b = sched.beta(t);
    Ok(combine(s_prev, (1.0 - b).sqrt(), eps, b.sqrt()))
}

/// `(s_t - √(1-ᾱ_t) ε̂) / √ᾱ_t`
pub fn predict_x0(
    st: &ChannelVolume,
    t: usize,
    eps_hat: &ChannelVolume,
    sched: &NoiseSchedule,
) -> Result<ChannelVolume> {
    sched.check_step(t)?;
    same_shape(st, eps_hat, "predict_x0")?;
    let ab = sched.alpha_bar(t);
    let inv = 1.0 / ab.sqrt();
    Ok(combine(st, inv, eps_hat, -(1.0 - ab).sqrt() * inv))
}

/// Posterior mean `(s_t - β_t/√(1-ᾱ_t) ε̂) / √α_t`.
pub fn posterior_mean(
    st: &ChannelVolume,
    t: usize,
    eps_hat: &ChannelVolume,
    sched: &NoiseSchedule,
) -> Result<ChannelVolume> {
    sched.check_step(t)?;
    same_shape(st, eps_hat, "posterior_mean")?;
    let inv = 1.0 / sched.alpha(t).sqrt();
    let k = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    Ok(combine(st, inv, eps_hat, -k * inv))
}

/// Draws `s_{t-1}` from the fixed-variance posterior. No noise is added at `t = 1`.
pub fn p_sample_step<R: Rng + ?Sized>(
    st: &ChannelVolume,
    t: usize,
    eps_hat: &ChannelVolume,
    rng: &mut R,
    sched: &NoiseSchedule,
) -> Result<ChannelVolume> {
    let mut mean = posterior_mean(st, t, eps_hat, sched)?;
    if t > 1 {
        let sigma = sched.posterior_variance(t).sqrt();
        for v in mean.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sigma * z;
        }
    }
    Ok(mean)
}

/// Reverse step through a clamped `ŝ_0`.
///
/// `ŝ_0` is clamped to `[-clip, clip]` and the mean is taken from the
/// x0-form posterior `c_0 ŝ_0 + c_t s_t`. With `clip = ∞` it equals
/// [`p_sample_step`] up to rounding. Near `t = T` the eps form divides by
/// `√α_t ≈ 0.03`, so small errors in `ε̂` are blown up; the clamp bounds them.
pub fn p_sample_step_clipped<R: Rng + ?Sized>(
    st: &ChannelVolume,
    t: usize,
    eps_hat: &ChannelVolume,
    clip: f64,
    rng: &mut R,
    sched: &NoiseSchedule,
) -> Result<ChannelVolume> {
    if !(clip > 0.0) {
        return Err(invalid!("x0 clip must be positive, got {clip}"));
    }
    let mut x0 = predict_x0(st, t, eps_hat, sched)?;
    for v in x0.data_mut() {
        *v = v.clamp(-clip, clip);
    }
    let ab = sched.alpha_bar(t);
    let ab_prev = if t > 1 { sched.alpha_bar(t - 1) } else { 1.0 };
    let c0 = ab_prev.sqrt() * sched.beta(t) / (1.0 - ab);
    let ct = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let mut mean = combine(&x0, c0, st, ct);
    if t > 1 {
        let sigma = sched.posterior_variance(t).sqrt();
        for v in mean.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sigma * z;
        }
    }
    Ok(mean)
}

/// Conditioning for one patch.
#[derive(Debug, Clone)]
pub struct ConditionSet {
    /// Location of the patch inside the (cropped) volume.
    pub spec: PatchSpec,
    /// Low-angular-resolution FOD patch.
    pub lar_patch: ChannelVolume,
    /// Positional encoding patch.
    pub pos_patch: ChannelVolume,
    /// White-matter mask restricted to the patch, one channel.
    pub pk_mask_patch: ChannelVolume,
    /// Whole white-matter mask, one channel.
    pub wm_mask_full: Arc<ChannelVolume>,
}

impl ConditionSet {
    pub fn validate(&self) -> Result<()> {
        let d = self.lar_patch.dims();
        let s = self.spec.size;
        if d != (s, s, s) || self.pos_patch.dims() != d || self.pk_mask_patch.dims() != d {
            return Err(contract!(
                "condition patch dims disagree: spec size {s}, lar {:?}, pos {:?}, mask {:?}",
                d,
                self.pos_patch.dims(),
                self.pk_mask_patch.dims()
            ));
        }
        if self.pk_mask_patch.channels() != 1 || self.wm_mask_full.channels() != 1 {
            return Err(contract!("mask conditions must have exactly one channel"));
        }
        Ok(())
    }
}

/// Anything that predicts the forward noise of `st` at step `t`.
pub trait NoisePredictor {
    fn predict(&self, st: &ChannelVolume, cond: &ConditionSet, t: usize) -> Result<ChannelVolume>;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict(&self, st: &ChannelVolume, cond: &ConditionSet, t: usize) -> Result<ChannelVolume> {
        (**self).predict(st, cond, t)
    }
}

/// Full reverse chain from standard-normal `S_T` down to `S_0`.
pub fn sample_loop<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    cond: &ConditionSet,
    channels: usize,
    rng: &mut R,
    sched: &NoiseSchedule,
) -> Result<ChannelVolume> {
    sample_loop_with(predictor, cond, channels, None, rng, sched)
}

/// [`sample_loop`] with an optional clamp on `ŝ_0` at every step.
pub fn sample_loop_with<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    cond: &ConditionSet,
    channels: usize,
    x0_clip: Option<f64>,
    rng: &mut R,
    sched: &NoiseSchedule,
) -> Result<ChannelVolume> {
    cond.validate()?;
    let mut st = normal_volume(cond.lar_patch.dims(), channels, rng)?;
    for t in (1..=sched.steps()).rev() {
        let eps_hat = predictor.predict(&st, cond, t)?;
        if eps_hat.dims() != st.dims() || eps_hat.channels() != st.channels() {
            return Err(contract!(
                "predictor returned {:?}x{}, expected {:?}x{}",
                eps_hat.dims(),
                eps_hat.channels(),
                st.dims(),
                st.channels()
            ));
        }
        st = match x0_clip {
            Some(c) => p_sample_step_clipped(&st, t, &eps_hat, c, rng, sched)?,
            None => p_sample_step(&st, t, &eps_hat, rng, sched)?,
        };
    }
    Ok(st)
}

/// A noised training example: uniformly drawn step, noise and `S_t`.
#[derive(Debug, Clone)]
pub struct TrainingDraw {
    pub t: usize,
    pub eps: ChannelVolume,
    pub st: ChannelVolume,
}

pub fn draw_training_sample<R: Rng + ?Sized>(
    s0: &ChannelVolume,
    rng: &mut R,
    sched: &NoiseSchedule,
) -> Result<TrainingDraw> {
    let t = rng.random_range(1..=sched.steps());
    let eps = normal_volume(s0.dims(), s0.channels(), rng)?;
    let st = q_sample(s0, t, &eps, sched)?;
    Ok(TrainingDraw { t, eps, st })
}

/// Mean squared difference over all voxels and channels.
pub fn mse(pred: &ChannelVolume, target: &ChannelVolume) -> Result<f64> {
    same_shape(pred, target, "mse")?;
    let n = pred.data().len() as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

/// Noise-regression loss for one patch. The draw is returned so a trainer
/// can differentiate the same example.
pub fn training_loss<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    s0: &ChannelVolume,
    cond: &ConditionSet,
    rng: &mut R,
    sched: &NoiseSchedule,
) -> Result<(f64, TrainingDraw)> {
    let draw = draw_training_sample(s0, rng, sched)?;
    let eps_hat = predictor.predict(&draw.st, cond, draw.t)?;
    Ok((mse(&eps_hat, &draw.eps)?, draw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vol(rng: &mut ChaCha8Rng, s: usize, c: usize) -> ChannelVolume {
        normal_volume((s, s, s), c, rng).unwrap()
    }

    #[test]
    fn cosine_properties() {
        let s = cosine_schedule(250).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(1) > 0.99);
        assert!(s.alpha_bar(250) < 0.01);
        for t in 1..=250 {
            assert!(s.beta(t) > 0.0 && s.beta(t) <= 0.999);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        let prod: f64 = (1..=250).map(|t| s.alpha(t)).product();
        assert!((prod - s.alpha_bar(250)).abs() < 1e-12);
        assert!(cosine_schedule(1).is_err());
    }

    #[test]
    fn forward_closed_form_basics() {
        let sched = cosine_schedule(250).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s0 = vol(&mut rng, 3, 4);
        let zero = ChannelVolume::zeros(s0.dims(), 4).unwrap();
        let st = q_sample(&s0, 10, &zero, &sched).unwrap();
        let k = sched.alpha_bar(10).sqrt();
        for (a, b) in st.data().iter().zip(s0.data()) {
            assert_eq!(*a, k * b);
        }
        let eps = vol(&mut rng, 3, 4);
        let s1 = q_sample(&s0, 1, &eps, &sched).unwrap();
        let rel = mse(&s1, &s0).unwrap().sqrt() / mse(&s0, &zero).unwrap().sqrt();
        assert!(rel < 0.1);
        assert_eq!(q_step(&s0, 1, &eps, &sched).unwrap(), s1);
        assert!(q_sample(&s0, 0, &eps, &sched).is_err());
        assert!(q_sample(&s0, 251, &eps, &sched).is_err());
        assert!(q_sample(&s0, 3, &vol(&mut rng, 2, 4), &sched).is_err());
    }

    #[test]
    fn tiny_beta_step_is_identity() {
        let sched = NoiseSchedule::from_betas(vec![1e-300, 1e-300]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = vol(&mut rng, 2, 3);
        let eps = vol(&mut rng, 2, 3);
        assert_eq!(q_step(&s, 1, &eps, &sched).unwrap(), s);
    }

    #[test]
    fn x0_inversion() {
        let sched = cosine_schedule(250).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s0 = vol(&mut rng, 3, 5);
        let eps = vol(&mut rng, 3, 5);
        for t in [1, 50, 125, 249, 250] {
            let st = q_sample(&s0, t, &eps, &sched).unwrap();
            let back = predict_x0(&st, t, &eps, &sched).unwrap();
            let err = mse(&back, &s0).unwrap().sqrt() / mse(&s0, &ChannelVolume::zeros(s0.dims(), 5).unwrap()).unwrap().sqrt();
            assert!(err < 1e-5, "t={t}: {err}");
        }
        let st = vol(&mut rng, 2, 2);
        let zero = ChannelVolume::zeros(st.dims(), 2).unwrap();
        let x0 = predict_x0(&st, 7, &zero, &sched).unwrap();
        for (a, b) in x0.data().iter().zip(st.data()) {
            assert!((a - b / sched.alpha_bar(7).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_mean_matches_x0_form() {
        let sched = cosine_schedule(250).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in [2, 10, 100, 200, 250] {
            let st = vol(&mut rng, 2, 3);
            let eh = vol(&mut rng, 2, 3);
            let mu = posterior_mean(&st, t, &eh, &sched).unwrap();
            let x0 = predict_x0(&st, t, &eh, &sched).unwrap();
            let (ab, abp, b, a) = (sched.alpha_bar(t), sched.alpha_bar(t - 1), sched.beta(t), sched.alpha(t));
            let c0 = abp.sqrt() * b / (1.0 - ab);
            let ct = a.sqrt() * (1.0 - abp) / (1.0 - ab);
            for i in 0..mu.data().len() {
                let want = c0 * x0.data()[i] + ct * st.data()[i];
                assert!((mu.data()[i] - want).abs() < 1e-10 * (1.0 + want.abs()), "t={t}");
            }
        }
    }

    #[test]
    fn last_step_is_deterministic() {
        let sched = cosine_schedule(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let st = vol(&mut rng, 2, 3);
        let eh = vol(&mut rng, 2, 3);
        let a = p_sample_step(&st, 1, &eh, &mut ChaCha8Rng::seed_from_u64(1), &sched).unwrap();
        let b = p_sample_step(&st, 1, &eh, &mut ChaCha8Rng::seed_from_u64(2), &sched).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, posterior_mean(&st, 1, &eh, &sched).unwrap());
        assert_eq!(sched.posterior_variance(1), 0.0);
        assert!(p_sample_step(&st, 0, &eh, &mut rng, &sched).is_err());
    }

    #[test]
    fn mse_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = vol(&mut rng, 2, 4);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let zero = ChannelVolume::zeros(a.dims(), 4).unwrap();
        let big = normal_volume((40, 50, 50), 1, &mut rng).unwrap();
        let l = mse(&ChannelVolume::zeros(big.dims(), 1).unwrap(), &big).unwrap();
        // variance of a 1e5-sample chi-square mean: sd ≈ sqrt(2/1e5)
        assert!((l - 1.0).abs() < 5.0 * (2.0f64 / 1e5).sqrt(), "{l}");
        let b = vol(&mut rng, 2, 4);
        let perm = |v: &ChannelVolume| {
            let mut out = v.clone();
            let n = v.voxels();
            for c in 0..4 {
                out.data_mut()[c * n..(c + 1) * n].copy_from_slice(v.channel(3 - c));
            }
            out
        };
        assert!((mse(&a, &b).unwrap() - mse(&perm(&a), &perm(&b)).unwrap()).abs() < 1e-15);
        assert!(mse(&a, &zero).unwrap() > 0.0);
    }
}
