//! Fourier positional channels and their patch windows.
//!
//! `cargo run --example positional_encoding`

use fodiff::ccm::{encode_axis, frequencies, positional_patch, positional_volume};
use fodiff::volume::PatchSpec;

fn main() -> fodiff::Result<()> {
    let band = frequencies(2, 2.0)?;
    println!("omegas {:?}, {} channels", band.omegas(), band.channels());
    println!("u = 0.5 -> {:?}", encode_axis(0.5, &band));

    let pv = positional_volume((16, 16, 16), &band)?;
    let spec = PatchSpec::new((4, 8, 2), 8);
    let patch = positional_patch(&pv, &spec)?;
    // patch voxel (0,0,0) carries the code of global voxel (4,8,2)
    assert_eq!(patch.voxel(0, 0, 0), pv.voxel(4, 8, 2));
    println!("patch {:?} x {} channels", patch.dims(), patch.channels());
    Ok(())
}
