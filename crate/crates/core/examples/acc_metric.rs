//! Angular correlation between coefficient vectors and over a masked region.
//!
//! `cargo run --example acc_metric`

use fodiff::sh::{acc_region, acc_voxel};
use fodiff::volume::{BinaryMask, ChannelVolume};

fn main() -> fodiff::Result<()> {
    let u: Vec<f64> = (0..45).map(|i| (i as f64 * 0.3).sin()).collect();
    let mut v = u.clone();
    v[0] = 100.0; // the constant term is ignored
    println!("ACC(u, u with other c00) = {:?}", acc_voxel(&u, &v)?);
    let w: Vec<f64> = u.iter().map(|x| -x).collect();
    println!("ACC(u, -u) = {:?}", acc_voxel(&u, &w)?);
    println!("ACC(u, 0) = {:?}", acc_voxel(&u, &[0.0; 45])?);

    let dims = (4, 4, 4);
    let mut truth = ChannelVolume::zeros(dims, 45)?;
    let mut pred = ChannelVolume::zeros(dims, 45)?;
    for z in 0..4 {
        for y in 0..4 {
            for x in 0..4 {
                let t: Vec<f64> = (0..45).map(|c| ((x + 2 * y + 3 * z + c) as f64).cos()).collect();
                let p: Vec<f64> = t.iter().enumerate().map(|(c, a)| a + 0.3 * (c as f64).sin()).collect();
                truth.set_voxel(x, y, z, &t);
                pred.set_voxel(x, y, z, &p);
            }
        }
    }
    let mask = BinaryMask::from_fn(dims, |x, _, _| x >= 1)?;
    let s = acc_region(&pred, &truth, &mask)?;
    println!("region ACC {:.4} ± {:.4} over {} voxels", s.mean, s.std, s.counted_voxels);
    Ok(())
}
