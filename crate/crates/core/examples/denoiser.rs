//! Forward pass, SHAM gating and one gradient step of the desk denoiser.
//!
//! `cargo run --release --example denoiser`

use std::sync::Arc;

use fodiff::diffusion::{normal_volume, ConditionSet};
use fodiff::nn::{adam_step, AdamState, Denoiser, DenoiserConfig};
use fodiff::volume::{BinaryMask, PatchSpec};
use rand::SeedableRng;

fn main() -> fodiff::Result<()> {
    let cfg = DenoiserConfig::desk();
    let mut net = Denoiser::new(cfg.clone())?;
    println!("{} parameter tensors, {} scalars, {} input channels", net.params().len(), net.params().numel(), cfg.in_channels());
    println!("SHFE widths {:?}", net.shfe_widths());

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let wm = BinaryMask::from_fn((12, 12, 12), |x, y, _| x > 2 && y < 9)?;
    let spec = PatchSpec::new((2, 2, 2), 8);
    let cond = ConditionSet {
        spec,
        lar_patch: normal_volume((8, 8, 8), 45, &mut rng)?,
        pos_patch: normal_volume((8, 8, 8), cfg.pos_channels, &mut rng)?,
        pk_mask_patch: wm.extract(&spec)?.to_volume(),
        wm_mask_full: Arc::new(wm.to_volume()),
    };
    let st = normal_volume((8, 8, 8), 45, &mut rng)?;
    let eps = normal_volume((8, 8, 8), 45, &mut rng)?;

    let parts = net.forward_parts(&st, &cond, 120)?;
    println!("initial gate (zero-initialized): {:?}", &parts.gate[..5]);

    let mut adam = AdamState::new(net.params());
    for step in 0..5 {
        let (loss, grads) = net.loss_and_gradients(&st, &cond, 120, &eps)?;
        println!("step {step}: loss {loss:.4}");
        adam_step(net.params_mut(), &grads, &mut adam, 1e-3)?;
    }
    let (_, gate) = net.sham_forward(&parts.pre_gate)?;
    println!("gate after training steps: min {:.4}, max {:.4}", gate.iter().cloned().fold(1.0, f64::min), gate.iter().cloned().fold(0.0, f64::max));
    Ok(())
}
