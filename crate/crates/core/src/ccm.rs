//! Voxel-level Fourier positional conditioning.
//!
//! Frequencies are log-spaced: `ω_l = 2^(l · f_max / L)` for `l = 0..=L`, which
//! yields `L + 1` values. Each normalized coordinate `u ∈ [0, 1]` is mapped to
//! `[sin ω_0 u, cos ω_0 u, …, sin ω_L u, cos ω_L u]` and the three axes are
//! concatenated x, y, z, giving `6 (L + 1)` channels per voxel.

use crate::error::{invalid, Result};
use crate::volume::{extract_patch, ChannelVolume, Dims, PatchSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyBand {
    levels: usize,
    f_max: f64,
    omegas: Vec<f64>,
}

impl FrequencyBand {
    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    /// The `L` of the band; there are `L + 1` frequencies.
    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn f_max(&self) -> f64 {
        self.f_max
    }

    /// Channels contributed per axis.
    pub fn axis_channels(&self) -> usize {
        2 * self.omegas.len()
    }

    /// Channels of the full three-axis encoding.
    pub fn channels(&self) -> usize {
        3 * self.axis_channels()
    }
}

/// Builds the log-spaced band. `levels` is the `L` of the formula.
pub fn frequencies(levels: i64, f_max: f64) -> Result<FrequencyBand> {
    if levels < 0 {
        return Err(invalid!("frequency level count must be >= 0, got {levels}"));
    }
    if !(f_max > 0.0) || !f_max.is_finite() {
        return Err(invalid!("f_max must be positive and finite, got {f_max}"));
    }
    let l_count = levels as usize;
    let omegas = if l_count == 0 {
        vec![1.0]
    } else {
        (0..=l_count).map(|l| (l as f64 * f_max / l_count as f64).exp2()).collect()
    };
    Ok(FrequencyBand { levels: l_count, f_max, omegas })
}

/// Sin/cos features of one coordinate.
pub fn encode_axis(u: f64, band: &FrequencyBand) -> Vec<f64> {
    debug_assert!((0.0..=1.0).contains(&u), "coordinate {u} outside [0, 1]");
    let mut out = Vec::with_capacity(band.axis_channels());
    for &w in &band.omegas {
        out.push((w * u).sin());
        out.push((w * u).cos());
    }
    out
}

fn normalized(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        i as f64 / (n - 1) as f64
    }
}

/// Encodes every voxel of a `dims` volume. Coordinates are normalized to
/// `[0, 1]` per axis over the full extent.
pub fn positional_volume(dims: Dims, band: &FrequencyBand) -> Result<ChannelVolume> {
    let ac = band.axis_channels();
    let mut vol = ChannelVolume::zeros(dims, band.channels())?;
    let ex: Vec<Vec<f64>> = (0..dims.0).map(|i| encode_axis(normalized(i, dims.0), band)).collect();
    let ey: Vec<Vec<f64>> = (0..dims.1).map(|i| encode_axis(normalized(i, dims.1), band)).collect();
    let ez: Vec<Vec<f64>> = (0..dims.2).map(|i| encode_axis(normalized(i, dims.2), band)).collect();
    for z in 0..dims.2 {
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                for k in 0..ac {
                    vol.set(x, y, z, k, ex[x][k]);
                    vol.set(x, y, z, ac + k, ey[y][k]);
                    vol.set(x, y, z, 2 * ac + k, ez[z][k]);
                }
            }
        }
    }
    Ok(vol)
}

/// Window of a precomputed encoding; positions stay global.
pub fn positional_patch(pv: &ChannelVolume, spec: &PatchSpec) -> Result<ChannelVolume> {
    extract_patch(pv, spec)
}
