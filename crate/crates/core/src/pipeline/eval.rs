//! ACC reports over the WM and whole-brain masks.

use crate::error::{invalid, Error, Result};
use crate::sh::{acc_region, AccSummary};
use crate::volume::{BinaryMask, ChannelVolume};

/// Outcome for one region: statistics, or why there are none.
#[derive(Debug, Clone, PartialEq)]
pub enum RegionAcc {
    Valid(AccSummary),
    NoValidVoxels { masked: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub wm: RegionAcc,
    pub brain: RegionAcc,
}

impl EvalReport {
    /// True when both regions produced statistics.
    pub fn is_complete(&self) -> bool {
        matches!((&self.wm, &self.brain), (RegionAcc::Valid(_), RegionAcc::Valid(_)))
    }

    pub fn to_text(&self) -> String {
        let line = |name: &str, r: &RegionAcc| match r {
            RegionAcc::Valid(s) => format!(
                "{name} ACC {:.4}±{:.4} (voxels {}, undefined {})\n",
                s.mean, s.std, s.counted_voxels, s.undefined_voxels
            ),
            RegionAcc::NoValidVoxels { masked } => format!("{name} ACC n/a: no valid voxels ({masked} masked)\n"),
        };
        line("WM", &self.wm) + &line("brain", &self.brain)
    }

    pub fn to_csv(&self) -> String {
        let row = |name: &str, r: &RegionAcc| match r {
            RegionAcc::Valid(s) => format!("{name},{},{},{},{},ok\n", s.mean, s.std, s.counted_voxels, s.undefined_voxels),
            RegionAcc::NoValidVoxels { masked } => format!("{name},,,0,{masked},no-valid-voxels\n"),
        };
        String::from("region,mean,std,counted_voxels,undefined_voxels,status\n") + &row("wm", &self.wm) + &row("brain", &self.brain)
    }
}

fn region(pred: &ChannelVolume, truth: &ChannelVolume, mask: &BinaryMask) -> Result<RegionAcc> {
    match acc_region(pred, truth, mask) {
        Ok(s) => Ok(RegionAcc::Valid(s)),
        Err(Error::NoValidVoxels(_)) => Ok(RegionAcc::NoValidVoxels { masked: mask.count() }),
        Err(e) => Err(e),
    }
}

pub fn evaluate(pred: &ChannelVolume, truth: &ChannelVolume, wm: &BinaryMask, brain: &BinaryMask) -> Result<EvalReport> {
    if pred.dims() != truth.dims() || wm.dims() != pred.dims() || brain.dims() != pred.dims() {
        return Err(invalid!(
            "dims differ: pred {:?}, truth {:?}, wm {:?}, brain {:?}",
            pred.dims(),
            truth.dims(),
            wm.dims(),
            brain.dims()
        ));
    }
    Ok(EvalReport { wm: region(pred, truth, wm)?, brain: region(pred, truth, brain)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::normal_volume;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_volumes_report_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = normal_volume((4, 4, 4), 45, &mut rng).unwrap();
        let wm = BinaryMask::from_fn((4, 4, 4), |x, _, _| x < 2).unwrap();
        let brain = BinaryMask::filled((4, 4, 4), true).unwrap();
        let r = evaluate(&v, &v, &wm, &brain).unwrap();
        assert!(r.is_complete());
        assert!(r.to_text().starts_with("WM ACC 1.0000±0.0000 (voxels 32, undefined 0)"));
        let row: Vec<String> = r.to_csv().lines().nth(1).unwrap().split(',').map(String::from).collect();
        assert_eq!(row[0], "wm");
        assert!((row[1].parse::<f64>().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(&row[3..], &["32", "0", "ok"]);
    }

    #[test]
    fn empty_region_is_reported() {
        let v = ChannelVolume::zeros((3, 3, 3), 45).unwrap();
        let m = BinaryMask::filled((3, 3, 3), true).unwrap();
        let r = evaluate(&v, &v, &m, &m).unwrap();
        assert!(!r.is_complete());
        assert_eq!(r.wm, RegionAcc::NoValidVoxels { masked: 27 });
        assert!(r.to_csv().contains("wm,,,0,27,no-valid-voxels"));
        assert!(evaluate(&v, &ChannelVolume::zeros((3, 3, 2), 45).unwrap(), &m, &m).is_err());
    }
}
