//! Per-voxel FOD amplitudes on a sphere grid, for external glyph rendering.

use super::sphere::antipodal_fibonacci;
use crate::error::{invalid, Result};
use crate::sh::{eval_basis, h_max_for_len, reconstruct_fod, FodCoefficients};
use crate::volume::ChannelVolume;

/// CSV rows `x,y,z,dir_x,dir_y,dir_z,amplitude`, voxel by voxel, over
/// `n_dirs` antipodally paired directions.
pub fn export_glyph_samples(fod: &ChannelVolume, voxels: &[(usize, usize, usize)], n_dirs: usize) -> Result<String> {
    let h_max = h_max_for_len(fod.channels())?;
    let dirs = antipodal_fibonacci(n_dirs)?;
    let basis = eval_basis(&dirs, h_max)?;
    let (nx, ny, nz) = fod.dims();
    let mut out = String::from("x,y,z,dir_x,dir_y,dir_z,amplitude\n");
    for &(x, y, z) in voxels {
        if x >= nx || y >= ny || z >= nz {
            return Err(invalid!("voxel ({x},{y},{z}) outside volume {:?}", fod.dims()));
        }
        let amps = reconstruct_fod(&FodCoefficients::new(fod.voxel(x, y, z))?, &basis)?;
        for (d, a) in dirs.iter().zip(amps) {
            out.push_str(&format!("{x},{y},{z},{},{},{},{a}\n", d[0], d[1], d[2]));
        }
    }
    Ok(out)
}

/// Parses `x,y,z;x,y,z;…`.
pub fn parse_voxel_list(s: &str) -> Result<Vec<(usize, usize, usize)>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let v: Vec<usize> = p
                .split(',')
                .map(|q| q.trim().parse().map_err(|_| invalid!("bad voxel coordinate {q:?}")))
                .collect::<Result<_>>()?;
            match v.as_slice() {
                [x, y, z] => Ok((*x, *y, *z)),
                _ => Err(invalid!("voxel {p:?} needs three coordinates")),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(csv: &str) -> Vec<Vec<f64>> {
        csv.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect()
    }

    #[test]
    fn constant_term_is_flat() {
        let mut v = ChannelVolume::zeros((2, 2, 2), 45).unwrap();
        v.set(1, 0, 1, 0, 1.0);
        let r = rows(&export_glyph_samples(&v, &[(1, 0, 1)], 20).unwrap());
        assert_eq!(r.len(), 20);
        let want = 1.0 / (2.0 * std::f64::consts::PI.sqrt());
        assert!(r.iter().all(|row| (row[6] - want).abs() < 1e-12));
    }

    #[test]
    fn antipodes_match_and_bounds_checked() {
        let mut v = ChannelVolume::zeros((2, 2, 2), 45).unwrap();
        for c in 0..45 {
            v.set(0, 1, 0, c, (c as f64 * 0.37).sin());
        }
        let r = rows(&export_glyph_samples(&v, &[(0, 1, 0)], 30).unwrap());
        for i in 0..15 {
            assert!((r[i][6] - r[i + 15][6]).abs() < 1e-12);
        }
        assert!(export_glyph_samples(&v, &[(2, 0, 0)], 30).is_err());
        assert_eq!(parse_voxel_list("1,2,3; 4,5,6").unwrap(), vec![(1, 2, 3), (4, 5, 6)]);
        assert!(parse_voxel_list("1,2").is_err());
    }
}
