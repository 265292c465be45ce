//! Short end-to-end run: phantoms, training, tiled inference, evaluation.
//! Iterations and diffusion steps are cut so it finishes in well under a minute;
//! the desk preset uses 2,000 iterations and 250 steps.
//!
//! `cargo run --release --example train_and_infer`

use fodiff::pipeline::eval::evaluate;
use fodiff::pipeline::infer::infer;
use fodiff::pipeline::phantom::generate_dataset;
use fodiff::pipeline::train::train;
use fodiff::pipeline::RunConfig;

fn main() -> fodiff::Result<()> {
    let data = generate_dataset(3, (24, 24, 24), 1)?;
    let (train_set, test) = data.split_at(2);
    let run = RunConfig { iterations: 60, lr_halve_at: 30, checkpoint_every: 20, diffusion_steps: 20, ..RunConfig::desk() };
    let out = train(&run, train_set, |it, _| {
        println!("checkpoint at iteration {it}");
        Ok(())
    })?;
    println!("loss: first {:.3}, last {:.3}", out.losses[0], out.losses[out.losses.len() - 1]);

    let s = &test[0];
    let pred = infer(&out.checkpoint, &s.lar, &s.wm, &s.brain, 0)?;
    print!("prediction\n{}", evaluate(&pred, &s.har, &s.wm, &s.brain)?.to_text());
    print!("LAR baseline\n{}", evaluate(&s.lar, &s.har, &s.wm, &s.brain)?.to_text());
    Ok(())
}
