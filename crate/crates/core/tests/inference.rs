use fodiff::diffusion::{cosine_schedule, ConditionSet, NoisePredictor, NoiseSchedule};
use fodiff::pipeline::infer::infer_with;
use fodiff::pipeline::phantom::generate_dataset;
use fodiff::pipeline::train::{dataset_stats, PreparedSubject};
use fodiff::pipeline::RunConfig;
use fodiff::volume::{extract_patch, ChannelVolume};
use fodiff::Result;

/// Knows the clean standardized HAR, so it returns the exact noise that maps
/// the current state back to it.
struct Oracle {
    har: ChannelVolume,
    sched: NoiseSchedule,
}

impl NoisePredictor for Oracle {
    fn predict(&self, st: &ChannelVolume, cond: &ConditionSet, t: usize) -> Result<ChannelVolume> {
        let s0 = extract_patch(&self.har, &cond.spec)?;
        let ab = self.sched.alpha_bar(t);
        let mut eps = st.clone();
        for (e, x) in eps.data_mut().iter_mut().zip(s0.data()) {
            *e = (*e - ab.sqrt() * x) / (1.0 - ab).sqrt();
        }
        Ok(eps)
    }
}

fn oracle_run(x0_clip: Option<f64>) {
    let data = generate_dataset(2, (20, 20, 20), 9).unwrap();
    let (h, l) = dataset_stats(&data).unwrap();
    let run = RunConfig { diffusion_steps: 50, x0_clip, har_stats: Some(h.clone()), lar_stats: Some(l.clone()), ..RunConfig::desk() };
    let s = &data[1];
    let prep = PreparedSubject::new(&run, Some(&s.har), &s.lar, &s.wm, Some(&h), &l).unwrap();
    let oracle = Oracle { har: prep.har.clone().unwrap(), sched: cosine_schedule(run.diffusion_steps).unwrap() };
    let pred = infer_with(&oracle, &run, &s.lar, &s.wm, &s.brain, 4).unwrap();

    let (mut num, mut den) = (0.0, 0.0);
    let (x, y, z) = s.wm.dims();
    for k in 0..z {
        for j in 0..y {
            for i in 0..x {
                if s.wm.get(i, j, k) {
                    for (p, t) in pred.voxel(i, j, k).iter().zip(s.har.voxel(i, j, k)) {
                        num += (p - t) * (p - t);
                        den += t * t;
                    }
                } else if !s.brain.get(i, j, k) {
                    assert!(pred.voxel(i, j, k).iter().all(|&v| v == 0.0));
                }
            }
        }
    }
    let rel = (num / den).sqrt();
    assert!(rel < 1e-3, "relative error {rel:e}");
}

#[test]
fn exact_noise_recovers_har_on_wm() {
    oracle_run(None);
}

#[test]
fn clamped_sampler_keeps_exact_recovery_inside_the_clamp() {
    oracle_run(Some(50.0));
}
