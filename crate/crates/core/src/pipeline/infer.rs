//! Tile, sample, crop and merge inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::standardize::destandardize;
use super::train::PreparedSubject;
use crate::diffusion::{cosine_schedule, sample_loop_with, NoisePredictor};
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Denoiser};
use crate::volume::{apply_mask, center_crop, merge_patches, restore_from_bbox, BinaryMask, ChannelVolume};

/// Rebuilds the run config and network stored in a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<(RunConfig, Denoiser)> {
    let run = RunConfig::from_text(&ckpt.config_text)?;
    let net = Denoiser::from_params(run.denoiser(), ckpt.params.clone())?;
    Ok((run, net))
}

/// Runs the reverse chain on every tile with any noise predictor.
///
/// Tile `i` draws from its own random stream `(seed, i + 1)`, so results do
/// not depend on evaluation order.
pub fn infer_with<P: NoisePredictor + ?Sized>(
    predictor: &P,
    run: &RunConfig,
    lar: &ChannelVolume,
    wm: &BinaryMask,
    brain: &BinaryMask,
    seed: u64,
) -> Result<ChannelVolume> {
    run.validate()?;
    let (har_stats, lar_stats) = match (&run.har_stats, &run.lar_stats) {
        (Some(h), Some(l)) => (h, l),
        _ => return Err(Error::Config("run config carries no standardization statistics".into())),
    };
    if brain.dims() != lar.dims() {
        return Err(Error::Contract(format!("brain mask {:?} does not match LAR {:?}", brain.dims(), lar.dims())));
    }
    let prep = PreparedSubject::new(run, None, lar, wm, None, lar_stats)?;
    let sched = cosine_schedule(run.diffusion_steps)?;
    let tiles = prep.tiles(run)?;
    let mut patches = Vec::with_capacity(tiles.len());
    let mut placements = Vec::with_capacity(tiles.len());
    for (i, spec) in tiles.iter().enumerate() {
        let cond = prep.condition(*spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let s0 = sample_loop_with(predictor, &cond, 45, run.x0_clip, &mut rng, &sched)?;
        patches.push(center_crop(&s0, run.target)?);
        placements.push(spec.centered(run.target)?);
    }
    let dims = prep.wm.dims();
    let merged = destandardize(&merge_patches(&patches, &placements, dims)?, har_stats)?;
    let covered = BinaryMask::from_fn(dims, |x, y, z| placements.iter().any(|p| p.contains(x, y, z)))?;
    let cropped_brain = brain.crop(&prep.bbox)?;
    let adjusted = apply_mask(&apply_mask(&merged, &covered)?, &cropped_brain)?;
    restore_from_bbox(&adjusted, &prep.bbox, lar.dims(), 0.0)
}

/// Inference with the network stored in `ckpt`.
pub fn infer(ckpt: &Checkpoint, lar: &ChannelVolume, wm: &BinaryMask, brain: &BinaryMask, seed: u64) -> Result<ChannelVolume> {
    let (run, net) = load_model(ckpt)?;
    infer_with(&net, &run, lar, wm, brain, seed)
}
