//! Forward noising and a full reverse chain driven by an oracle predictor
//! that knows the clean patch.
//!
//! `cargo run --example diffusion_chain`

use std::sync::Arc;

use fodiff::diffusion::{cosine_schedule, normal_volume, predict_x0, q_sample, sample_loop, ConditionSet, NoisePredictor};
use fodiff::volume::{ChannelVolume, PatchSpec};
use rand::SeedableRng;

struct Oracle {
    s0: ChannelVolume,
    alpha_bar: Vec<f64>,
}

impl NoisePredictor for Oracle {
    fn predict(&self, st: &ChannelVolume, _: &ConditionSet, t: usize) -> fodiff::Result<ChannelVolume> {
        let ab = self.alpha_bar[t];
        let data = st.data().iter().zip(self.s0.data()).map(|(s, x)| (s - ab.sqrt() * x) / (1.0 - ab).sqrt()).collect();
        ChannelVolume::from_vec(st.dims(), st.channels(), data)
    }
}

fn main() -> fodiff::Result<()> {
    let sched = cosine_schedule(250)?;
    println!("alpha_bar: t=1 {:.5}, t=125 {:.5}, t=250 {:.2e}", sched.alpha_bar(1), sched.alpha_bar(125), sched.alpha_bar(250));

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let s0 = normal_volume((2, 2, 2), 45, &mut rng)?;
    let eps = normal_volume((2, 2, 2), 45, &mut rng)?;
    let st = q_sample(&s0, 100, &eps, &sched)?;
    let back = predict_x0(&st, 100, &eps, &sched)?;
    let err = back.data().iter().zip(s0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("x0 recovered from (S_100, eps) with max error {err:.2e}");

    let cond = ConditionSet {
        spec: PatchSpec::new((0, 0, 0), 2),
        lar_patch: ChannelVolume::zeros((2, 2, 2), 45)?,
        pos_patch: ChannelVolume::zeros((2, 2, 2), 18)?,
        pk_mask_patch: ChannelVolume::zeros((2, 2, 2), 1)?,
        wm_mask_full: Arc::new(ChannelVolume::zeros((2, 2, 2), 1)?),
    };
    let oracle = Oracle { s0: s0.clone(), alpha_bar: (0..=250).map(|t| sched.alpha_bar(t)).collect() };
    let out = sample_loop(&oracle, &cond, 45, &mut rng, &sched)?;
    let num: f64 = out.data().iter().zip(s0.data()).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = s0.data().iter().map(|b| b * b).sum();
    println!("reverse chain relative error {:.2e}", (num / den).sqrt());
    Ok(())
}
