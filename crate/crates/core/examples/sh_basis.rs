//! Evaluate the real even-order SH basis and reconstruct a FOD.
//!
//! `cargo run --example sh_basis`

use fodiff::pipeline::sphere::icosphere;
use fodiff::sh::{coeff_count, eval_basis, order_block_sizes, reconstruct_fod, sh_indices, FodCoefficients};

fn main() -> fodiff::Result<()> {
    println!("coefficients for h_max = 8: {}", coeff_count(8)?);
    println!("order blocks: {:?}", order_block_sizes(8)?);
    let idx = sh_indices(8)?;
    println!("first indices: {:?}", &idx[..6]);

    // c00 plus a z-aligned order-2 term gives a prolate FOD along z
    let mut c = vec![0.0; 45];
    c[0] = 0.28;
    c[3] = 0.25;
    let fod = FodCoefficients::new(c)?;
    let dirs = icosphere(3);
    let basis = eval_basis(&dirs, 8)?;
    let amps = reconstruct_fod(&fod, &basis)?;
    let best = (0..amps.len()).max_by(|&a, &b| amps[a].total_cmp(&amps[b])).unwrap();
    println!("{} directions, peak {:.3} at {:?}", dirs.len(), amps[best], dirs[best]);
    Ok(())
}
