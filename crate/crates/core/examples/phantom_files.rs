//! Generate a phantom subject, store it as FVOL files and read it back.
//!
//! `cargo run --release --example phantom_files`

use fodiff::pipeline::dataset::{read_subject, write_subject};
use fodiff::pipeline::eval::evaluate;
use fodiff::pipeline::phantom::{generate, PhantomSpec};

fn main() -> fodiff::Result<()> {
    let spec = PhantomSpec::random((24, 24, 24), 5)?;
    for r in &spec.regions[..2] {
        println!("region {:?}..{:?}: {} fiber(s)", r.min, r.max, r.directions.len());
    }
    let s = generate(&spec)?;
    println!("WM voxels {}, brain voxels {}", s.wm.count(), s.brain.count());

    let dir = std::env::temp_dir().join("fodiff_phantom_example");
    write_subject(&dir, &s)?;
    let back = read_subject(&dir)?;
    assert_eq!(back.wm, s.wm);
    println!("written to {}", dir.display());

    // LAR against HAR: the identity baseline
    print!("{}", evaluate(&back.lar, &back.har, &back.wm, &back.brain)?.to_text());
    Ok(())
}
