//! Per-channel affine standardization of coefficient volumes.

use crate::error::{contract, invalid, Result};
use crate::volume::{BinaryMask, ChannelVolume};

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(invalid!("stats need equal, nonzero lengths ({} vs {})", mean.len(), std.len()));
        }
        if mean.iter().chain(&std).any(|v| !v.is_finite()) || std.iter().any(|&s| s < STD_FLOOR) {
            return Err(invalid!("stats must be finite with std >= {STD_FLOOR}"));
        }
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Two-pass mean and population std over the masked voxels of all volumes.
pub fn compute_stats(vols: &[(&ChannelVolume, &BinaryMask)]) -> Result<ChannelStats> {
    let channels = match vols.first() {
        Some((v, _)) => v.channels(),
        None => return Err(invalid!("no volumes to compute statistics from")),
    };
    let mut sum = vec![0.0; channels];
    let mut count = 0usize;
    for (v, m) in vols {
        if v.dims() != m.dims() || v.channels() != channels {
            return Err(invalid!("volume/mask shapes disagree"));
        }
        let n = v.voxels();
        for idx in m.nonzero_indices() {
            for (c, s) in sum.iter_mut().enumerate() {
                *s += v.data()[c * n + idx];
            }
        }
        count += m.count();
    }
    if count == 0 {
        return Err(crate::Error::EmptyMask("no masked voxels for statistics".into()));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; channels];
    for (v, m) in vols {
        let n = v.voxels();
        for idx in m.nonzero_indices() {
            for (c, s) in sq.iter_mut().enumerate() {
                *s += (v.data()[c * n + idx] - mean[c]).powi(2);
            }
        }
    }
    let std = sq.iter().map(|s| (s / count as f64).sqrt().max(STD_FLOOR)).collect();
    ChannelStats::new(mean, std)
}

fn check(vol: &ChannelVolume, stats: &ChannelStats) -> Result<()> {
    if vol.channels() != stats.channels() {
        return Err(contract!("volume has {} channels, stats {}", vol.channels(), stats.channels()));
    }
    Ok(())
}

pub fn standardize(vol: &ChannelVolume, stats: &ChannelStats) -> Result<ChannelVolume> {
    check(vol, stats)?;
    let mut out = vol.clone();
    let n = vol.voxels();
    for c in 0..vol.channels() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for v in &mut out.data_mut()[c * n..(c + 1) * n] {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

pub fn destandardize(vol: &ChannelVolume, stats: &ChannelStats) -> Result<ChannelVolume> {
    check(vol, stats)?;
    let mut out = vol.clone();
    let n = vol.voxels();
    for c in 0..vol.channels() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for v in &mut out.data_mut()[c * n..(c + 1) * n] {
            *v = *v * s + m;
        }
    }
    Ok(out)
}
