//! Training loop.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::phantom::Subject;
use super::standardize::{compute_stats, standardize, ChannelStats};
use crate::ccm::{positional_patch, positional_volume};
use crate::diffusion::{cosine_schedule, draw_training_sample, ConditionSet};
use crate::error::{Error, Result};
use crate::fpa::{build_table, schedule, PatchSampler};
use crate::nn::{adam_step, AdamState, Checkpoint, Denoiser};
use crate::volume::{crop, extract_patch, mask_bbox, sliding_positions, BinaryMask, BoundingBox, ChannelVolume, PatchSpec};

/// A subject cropped to its WM bounding box, with standardized channels.
#[derive(Debug, Clone)]
pub struct PreparedSubject {
    pub bbox: BoundingBox,
    pub har: Option<ChannelVolume>,
    pub lar: ChannelVolume,
    pub wm: BinaryMask,
    pub wm_volume: Arc<ChannelVolume>,
    pub positions: ChannelVolume,
}

impl PreparedSubject {
    pub fn new(
        run: &RunConfig,
        har: Option<&ChannelVolume>,
        lar: &ChannelVolume,
        wm: &BinaryMask,
        har_stats: Option<&ChannelStats>,
        lar_stats: &ChannelStats,
    ) -> Result<Self> {
        if lar.dims() != wm.dims() || lar.channels() != 45 {
            return Err(Error::Contract(format!(
                "LAR {:?}x{} does not match WM mask {:?} with 45 channels",
                lar.dims(),
                lar.channels(),
                wm.dims()
            )));
        }
        let bbox = mask_bbox(wm, run.patch, run.bbox_margin)?;
        let har = match (har, har_stats) {
            (Some(h), Some(st)) => {
                if h.dims() != lar.dims() || h.channels() != 45 {
                    return Err(Error::Contract("HAR and LAR shapes differ".into()));
                }
                Some(standardize(&crop(h, &bbox)?, st)?)
            }
            (None, _) => None,
            (Some(_), None) => return Err(Error::Contract("HAR given without statistics".into())),
        };
        let lar = standardize(&crop(lar, &bbox)?, lar_stats)?;
        let wm = wm.crop(&bbox)?;
        let positions = positional_volume(wm.dims(), &run.band()?)?;
        Ok(Self { bbox, har, lar, wm_volume: Arc::new(wm.to_volume()), wm, positions })
    }

    pub fn condition(&self, spec: PatchSpec) -> Result<ConditionSet> {
        Ok(ConditionSet {
            spec,
            lar_patch: extract_patch(&self.lar, &spec)?,
            pos_patch: positional_patch(&self.positions, &spec)?,
            pk_mask_patch: self.wm.extract(&spec)?.to_volume(),
            wm_mask_full: Arc::clone(&self.wm_volume),
        })
    }

    /// Tiles used at inference, in the cropped frame.
    pub fn tiles(&self, run: &RunConfig) -> Result<Vec<PatchSpec>> {
        sliding_positions(self.wm.dims(), run.patch, run.infer_stride)
    }
}

/// Statistics over the WM voxels (after cropping) of all subjects.
pub fn dataset_stats(subjects: &[Subject]) -> Result<(ChannelStats, ChannelStats)> {
    let har: Vec<_> = subjects.iter().map(|s| (&s.har, &s.wm)).collect();
    let lar: Vec<_> = subjects.iter().map(|s| (&s.lar, &s.wm)).collect();
    Ok((compute_stats(&har)?, compute_stats(&lar)?))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Config with the standardization statistics filled in.
    pub run: RunConfig,
    pub checkpoint: Checkpoint,
    /// Batch-mean loss per iteration.
    pub losses: Vec<f64>,
    pub log_csv: String,
}

/// Trains a fresh denoiser. `on_checkpoint` is called every
/// `checkpoint_every` iterations and after the last one. Checkpoints hold the
/// weight average when `ema_decay` is set.
pub fn train(
    run: &RunConfig,
    subjects: &[Subject],
    mut on_checkpoint: impl FnMut(usize, &Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    run.validate()?;
    if subjects.is_empty() {
        return Err(Error::Config("training needs at least one subject".into()));
    }
    let (har_stats, lar_stats) = dataset_stats(subjects)?;
    let mut run = run.clone();
    run.har_stats = Some(har_stats.clone());
    run.lar_stats = Some(lar_stats.clone());
    let config_text = run.to_text();

    let mut prepared = Vec::with_capacity(subjects.len());
    let mut samplers = Vec::with_capacity(subjects.len());
    for s in subjects {
        let p = PreparedSubject::new(&run, Some(&s.har), &s.lar, &s.wm, Some(&har_stats), &lar_stats)?;
        let table = build_table(&p.wm, run.patch, run.train_stride, &p.tiles(&run)?)?;
        samplers.push(PatchSampler::new(table));
        prepared.push(p);
    }
    let sched = cosine_schedule(run.diffusion_steps)?;
    let sampler_cfg = run.sampler();
    let mut net = Denoiser::new(run.denoiser())?;
    let mut adam = AdamState::new(net.params());
    let mut ema = run.ema_decay.map(|_| net.params().clone());
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    rng.set_stream(2);

    let mut losses = Vec::with_capacity(run.iterations);
    let mut log_csv = String::from("iteration,loss,lr,a,b\n");
    let inv_batch = 1.0 / run.batch_size as f64;
    for iter in 0..run.iterations {
        let (a, b) = schedule(iter, &sampler_cfg);
        let mut grads = net.params().zeros_like();
        let mut loss = 0.0;
        for _ in 0..run.batch_size {
            let k = rng.random_range(0..prepared.len());
            let spec = samplers[k].sample(a, b, &mut rng)?;
            let p = &prepared[k];
            let s0 = extract_patch(p.har.as_ref().expect("training subjects carry HAR"), &spec)?;
            let cond = p.condition(spec)?;
            let draw = draw_training_sample(&s0, &mut rng, &sched)?;
            let (l, g) = net.loss_and_gradients(&draw.st, &cond, draw.t, &draw.eps)?;
            loss += l * inv_batch;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                for (x, y) in acc.iter_mut().zip(gi) {
                    *x += y * inv_batch;
                }
            }
        }
        let lr = run.learning_rate(iter);
        adam_step(net.params_mut(), &grads, &mut adam, lr)?;
        if let (Some(avg), Some(decay)) = (ema.as_mut(), run.ema_decay) {
            // short warm-up so the average is not dominated by the initial weights
            let n = (iter + 1) as f64;
            avg.ema_update(net.params(), decay.min((1.0 + n) / (10.0 + n)))?;
        }
        if !loss.is_finite() || !net.params().is_finite() {
            return Err(Error::Contract(format!("training diverged at iteration {iter}")));
        }
        losses.push(loss);
        log_csv.push_str(&format!("{iter},{loss},{lr},{a},{b}\n"));
        let done = iter + 1;
        if done % run.checkpoint_every == 0 || done == run.iterations {
            let ck = Checkpoint { config_text: config_text.clone(), params: ema.as_ref().unwrap_or(net.params()).clone() };
            on_checkpoint(done, &ck)?;
        }
    }
    let checkpoint = Checkpoint { config_text, params: ema.unwrap_or_else(|| net.params().clone()) };
    Ok(TrainOutcome { run, checkpoint, losses, log_csv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::phantom::generate_dataset;

    fn small_run() -> RunConfig {
        RunConfig { iterations: 10, checkpoint_every: 4, ..RunConfig::desk() }
    }

    #[test]
    fn seeded_runs_repeat_exactly() {
        let data = generate_dataset(2, (16, 16, 16), 11).unwrap();
        let mut seen = Vec::new();
        let a = train(&small_run(), &data, |i, _| {
            seen.push(i);
            Ok(())
        })
        .unwrap();
        let b = train(&small_run(), &data, |_, _| Ok(())).unwrap();
        assert_eq!(seen, vec![4, 8, 10]);
        assert_eq!(a.losses.len(), 10);
        assert_eq!(a.log_csv, b.log_csv);
        assert_eq!(a.checkpoint, b.checkpoint);
        assert!(a.log_csv.starts_with("iteration,loss,lr,a,b\n0,"));
    }

    #[test]
    fn first_loss_is_near_one() {
        let data = generate_dataset(1, (16, 16, 16), 12).unwrap();
        let run = RunConfig { iterations: 1, batch_size: 8, ..RunConfig::desk() };
        let out = train(&run, &data, |_, _| Ok(())).unwrap();
        assert!((out.losses[0] - 1.0).abs() < 0.3, "loss {}", out.losses[0]);
    }

    #[test]
    fn startup_errors_leave_nothing_behind() {
        let data = generate_dataset(1, (16, 16, 16), 13).unwrap();
        let bad = RunConfig { target: 3, ..RunConfig::desk() };
        let mut called = false;
        assert_eq!(
            train(&bad, &data, |_, _| {
                called = true;
                Ok(())
            })
            .unwrap_err()
            .class(),
            "config"
        );
        assert!(!called);
        assert!(train(&RunConfig::desk(), &[], |_, _| Ok(())).is_err());
    }
}
