//! White-matter-weighted patch sampling with the decaying (a, b) schedule.
//!
//! `cargo run --example fpa_sampling`

use fodiff::fpa::{build_table, normalized_prob, schedule, PatchSampler, SamplerConfig};
use fodiff::volume::{sliding_positions, BinaryMask};
use rand::SeedableRng;

fn main() -> fodiff::Result<()> {
    let dims = (16, 16, 16);
    let wm = BinaryMask::from_fn(dims, |x, y, z| x + y + z > 18 && x < 13)?;
    let targets = sliding_positions(dims, 8, 4)?;
    let table = build_table(&wm, 8, 2, &targets)?;
    println!("{} windows, {} inference targets, max importance {:.3}", table.len(), table.target_count(), table.max_importance());

    let cfg = SamplerConfig { total_iterations: 1000, ..SamplerConfig::default() };
    for it in [0, 500, 1000] {
        let (a, b) = schedule(it, &cfg);
        let p = normalized_prob(&table, a, b)?;
        let on_target: f64 = p.iter().zip(table.entries()).filter(|(_, e)| e.is_target).map(|(p, _)| p).sum();
        println!("iteration {it}: a = {a:.3}, b = {b:.3}, mass on targets {on_target:.3}");
    }

    let mut sampler = PatchSampler::new(table);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let (a, b) = schedule(0, &cfg);
    for _ in 0..3 {
        println!("sampled {:?}", sampler.sample(a, b, &mut rng)?);
    }
    Ok(())
}
