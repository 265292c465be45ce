//! Export FOD amplitudes on a sphere for a few voxels as CSV.
//!
//! `cargo run --release --example glyphs`

use fodiff::pipeline::glyphs::export_glyph_samples;
use fodiff::pipeline::phantom::{generate, PhantomSpec};

fn main() -> fodiff::Result<()> {
    let s = generate(&PhantomSpec::random((16, 16, 16), 2)?)?;
    let csv = export_glyph_samples(&s.har, &[(7, 7, 7), (9, 6, 8)], 64)?;
    for line in csv.lines().take(4) {
        println!("{line}");
    }
    println!("... {} rows", csv.lines().count() - 1);
    Ok(())
}
