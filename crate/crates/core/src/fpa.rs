//! Anatomy-weighted patch sampling.
//!
//! Candidate windows are enumerated over the white-matter mask at the training
//! stride. Each window's importance is its fraction of mask voxels, and its
//! sampling weight is
//!
//! ```text
//! P(p) = w(p) · ((1 - b) + b · Imp(p) / max Imp),   w(p) = a if p is an inference tile else 1 - a
//! ```
//!
//! normalized over all candidates. `a` and `b` decay linearly over training.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::volume::{sliding_positions, BinaryMask, PatchSpec};

/// Linear decay of the sampling hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub a_start: f64,
    pub b_start: f64,
    pub a_end: f64,
    pub b_end: f64,
    pub total_iterations: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { a_start: 0.99, b_start: 0.8, a_end: 0.8, b_end: 0.5, total_iterations: 100_000 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if ![self.a_start, self.b_start, self.a_end, self.b_end].into_iter().all(in_unit) {
            return Err(invalid!("sampler a/b endpoints must lie in (0, 1): {self:?}"));
        }
        if self.a_end > self.a_start || self.b_end > self.b_start {
            return Err(invalid!("sampler endpoints must not increase: {self:?}"));
        }
        if self.total_iterations == 0 {
            return Err(invalid!("sampler total_iterations must be >= 1"));
        }
        Ok(())
    }
}

/// `(a, b)` at `iteration`, clamped at the end values.
pub fn schedule(iteration: usize, cfg: &SamplerConfig) -> (f64, f64) {
    if iteration >= cfg.total_iterations {
        return (cfg.a_end, cfg.b_end);
    }
    let f = iteration as f64 / cfg.total_iterations as f64;
    (
        cfg.a_start + (cfg.a_end - cfg.a_start) * f,
        cfg.b_start + (cfg.b_end - cfg.b_start) * f,
    )
}

/// Fraction of nonzero voxels.
pub fn importance(mask_patch: &BinaryMask) -> f64 {
    mask_patch.count() as f64 / mask_patch.data().len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableEntry {
    pub spec: PatchSpec,
    pub importance: f64,
    pub is_target: bool,
}

/// Candidate windows with their importance and inference-tile flag.
#[derive(Debug, Clone)]
pub struct PatchImportanceTable {
    entries: Vec<TableEntry>,
    max_importance: f64,
}

impl PatchImportanceTable {
    pub fn from_entries(entries: Vec<TableEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid!("importance table needs at least one entry"));
        }
        if let Some(e) = entries.iter().find(|e| !(0.0..=1.0).contains(&e.importance)) {
            return Err(invalid!("importance {} outside [0, 1]", e.importance));
        }
        let max_importance = entries.iter().map(|e| e.importance).fold(0.0, f64::max);
        Ok(Self { entries, max_importance })
    }

    pub fn entries(&self) -> &[TableEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_importance(&self) -> f64 {
        self.max_importance
    }

    pub fn target_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_target).count()
    }
}

/// Enumerates training windows over `wm_mask` and flags those that are also
/// inference tiles.
pub fn build_table(
    wm_mask: &BinaryMask,
    patch: usize,
    train_stride: usize,
    target_specs: &[PatchSpec],
) -> Result<PatchImportanceTable> {
    let dims = wm_mask.dims();
    let candidates = sliding_positions(dims, patch, train_stride)?;
    let integral = IntegralVolume::new(wm_mask);
    let voxels = (patch * patch * patch) as f64;
    let entries: Vec<TableEntry> = candidates
        .into_iter()
        .map(|spec| TableEntry {
            spec,
            importance: integral.window_sum(&spec) as f64 / voxels,
            is_target: target_specs.contains(&spec),
        })
        .collect();
    let table = PatchImportanceTable::from_entries(entries)?;
    if table.max_importance <= 0.0 {
        return Err(Error::EmptyMask("white-matter mask has no voxels inside any window".into()));
    }
    Ok(table)
}

/// Summed-volume table for O(1) window counts.
struct IntegralVolume {
    dims: (usize, usize, usize),
    sums: Vec<i64>,
}

impl IntegralVolume {
    fn new(mask: &BinaryMask) -> Self {
        let (nx, ny, nz) = mask.dims();
        let (sx, sy) = (nx + 1, ny + 1);
        let mut sums = vec![0i64; sx * sy * (nz + 1)];
        let at = |x: usize, y: usize, z: usize| (z * sy + y) * sx + x;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = mask.get(x, y, z) as i64;
                    sums[at(x + 1, y + 1, z + 1)] = v + sums[at(x, y + 1, z + 1)] + sums[at(x + 1, y, z + 1)]
                        + sums[at(x + 1, y + 1, z)]
                        - sums[at(x, y, z + 1)]
                        - sums[at(x, y + 1, z)]
                        - sums[at(x + 1, y, z)]
                        + sums[at(x, y, z)];
                }
            }
        }
        Self { dims: (sx, sy, nz + 1), sums }
    }

    fn window_sum(&self, spec: &PatchSpec) -> i64 {
        let (sx, sy, _) = self.dims;
        let at = |x: usize, y: usize, z: usize| self.sums[(z * sy + y) * sx + x];
        let (x0, y0, z0) = spec.origin;
        let s = spec.size;
        let (x1, y1, z1) = (x0 + s, y0 + s, z0 + s);
        (at(x1, y1, z1) + at(x0, y0, z1) + at(x0, y1, z0) + at(x1, y0, z0))
            - (at(x0, y1, z1) + at(x1, y0, z1) + at(x1, y1, z0) + at(x0, y0, z0))
    }
}

/// Unnormalized sampling weight of every entry.
pub fn unnormalized_prob(table: &PatchImportanceTable, a: f64, b: f64) -> Result<Vec<f64>> {
    if table.max_importance <= 0.0 {
        return Err(invalid!("max importance is zero"));
    }
    Ok(table
        .entries
        .iter()
        .map(|e| {
            let group = if e.is_target { a } else { 1.0 - a };
            group * ((1.0 - b) + b * e.importance / table.max_importance)
        })
        .collect())
}

/// Weights normalized to sum to one.
pub fn normalized_prob(table: &PatchImportanceTable, a: f64, b: f64) -> Result<Vec<f64>> {
    let w = unnormalized_prob(table, a, b)?;
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(invalid!("total sampling weight is zero"));
    }
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Inverse-CDF sampler over a table. Weights are rebuilt only when `(a, b)`
/// moves by more than `1e-6`.
#[derive(Debug, Clone)]
pub struct PatchSampler {
    table: PatchImportanceTable,
    cached: Option<(f64, f64)>,
    cdf: Vec<f64>,
}

impl PatchSampler {
    pub fn new(table: PatchImportanceTable) -> Self {
        Self { table, cached: None, cdf: Vec::new() }
    }

    pub fn table(&self) -> &PatchImportanceTable {
        &self.table
    }

    fn refresh(&mut self, a: f64, b: f64) -> Result<()> {
        if let Some((ca, cb)) = self.cached {
            if (ca - a).abs() <= 1e-6 && (cb - b).abs() <= 1e-6 {
                return Ok(());
            }
        }
        let w = unnormalized_prob(&self.table, a, b)?;
        let mut cdf = Vec::with_capacity(w.len());
        let mut run = 0.0;
        for v in w {
            run += v;
            cdf.push(run);
        }
        if !(run > 0.0) {
            return Err(invalid!("total sampling weight is zero"));
        }
        self.cdf = cdf;
        self.cached = Some((a, b));
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, a: f64, b: f64, rng: &mut R) -> Result<PatchSpec> {
        self.refresh(a, b)?;
        let total = *self.cdf.last().unwrap();
        let u = rng.random::<f64>() * total;
        let i = self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1);
        Ok(self.table.entries[i].spec)
    }
}

/// One draw from `table` with probability proportional to its weights.
pub fn sample<R: Rng + ?Sized>(
    table: &PatchImportanceTable,
    a: f64,
    b: f64,
    rng: &mut R,
) -> Result<PatchSpec> {
    PatchSampler::new(table.clone()).sample(a, b, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(i: usize, imp: f64, target: bool) -> TableEntry {
        TableEntry { spec: PatchSpec::new((i, 0, 0), 1), importance: imp, is_target: target }
    }

    #[test]
    fn importance_examples() {
        assert_eq!(importance(&BinaryMask::filled((4, 4, 4), true).unwrap()), 1.0);
        assert_eq!(importance(&BinaryMask::filled((4, 4, 4), false).unwrap()), 0.0);
        let m = BinaryMask::new((2, 2, 2), vec![1, 0, 1, 0, 0, 1, 0, 0]).unwrap();
        assert_eq!(importance(&m), 0.375);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = SamplerConfig { total_iterations: 1000, ..Default::default() };
        assert_eq!(schedule(0, &cfg), (0.99, 0.8));
        assert_eq!(schedule(1000, &cfg), (0.8, 0.5));
        assert_eq!(schedule(5000, &cfg), (0.8, 0.5));
        let (a, b) = schedule(500, &cfg);
        assert!((a - 0.895).abs() < 1e-12 && (b - 0.65).abs() < 1e-12);
        let mut prev = schedule(0, &cfg);
        for i in 1..=1000 {
            let cur = schedule(i, &cfg);
            assert!(cur.0 <= prev.0 && cur.1 <= prev.1);
            prev = cur;
        }
    }

    #[test]
    fn sampler_config_validation() {
        assert!(SamplerConfig::default().validate().is_ok());
        assert!(SamplerConfig { a_end: 0.995, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { b_start: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn single_window_table() {
        let mask = BinaryMask::filled((8, 8, 8), true).unwrap();
        let t = build_table(&mask, 8, 2, &[PatchSpec::new((0, 0, 0), 8)]).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.entries()[0].importance, 1.0);
        assert!(t.entries()[0].is_target);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(sample(&t, 0.99, 0.8, &mut rng).unwrap(), PatchSpec::new((0, 0, 0), 8));
        }
    }

    #[test]
    fn table_enumeration_count() {
        let mask = BinaryMask::filled((12, 12, 12), true).unwrap();
        let t = build_table(&mask, 8, 2, &[]).unwrap();
        assert_eq!(t.len(), 27);
        let empty = BinaryMask::filled((12, 12, 12), false).unwrap();
        assert!(matches!(build_table(&empty, 8, 2, &[]), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn table_importance_matches_window_popcount() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let dims = (11, 9, 10);
        let data: Vec<u8> = (0..dims.0 * dims.1 * dims.2).map(|_| rng.random_bool(0.3) as u8).collect();
        let mask = BinaryMask::new(dims, data).unwrap();
        let t = build_table(&mask, 4, 3, &[]).unwrap();
        for e in t.entries() {
            let mut n = 0;
            for z in 0..4 {
                for y in 0..4 {
                    for x in 0..4 {
                        n += mask.get(e.spec.origin.0 + x, e.spec.origin.1 + y, e.spec.origin.2 + z) as usize;
                    }
                }
            }
            assert_eq!(e.importance, n as f64 / 64.0);
        }
    }

    #[test]
    fn eq2_arithmetic() {
        let t = PatchImportanceTable::from_entries(vec![entry(0, 0.5, true), entry(1, 0.0, false)]).unwrap();
        let w = unnormalized_prob(&t, 0.99, 0.8).unwrap();
        assert!((w[0] - 0.99).abs() < 1e-15);
        assert!((w[1] - 0.002).abs() < 1e-15);
        let zero = PatchImportanceTable::from_entries(vec![entry(0, 0.0, true)]).unwrap();
        assert!(unnormalized_prob(&zero, 0.99, 0.8).is_err());
    }

    #[test]
    fn equal_importance_ratio_is_a_over_one_minus_a() {
        let t = PatchImportanceTable::from_entries(vec![entry(0, 0.4, true), entry(1, 0.4, false)]).unwrap();
        for a in [0.6, 0.8, 0.99] {
            let w = unnormalized_prob(&t, a, 0.5).unwrap();
            assert!((w[0] / w[1] - a / (1.0 - a)).abs() < 1e-9);
        }
    }

    #[test]
    fn two_entry_frequency_band() {
        // weights 0.99 / 0.01 at b -> 0 limit: use equal importance, a = 0.99
        let t = PatchImportanceTable::from_entries(vec![entry(0, 1.0, true), entry(1, 1.0, false)]).unwrap();
        let mut s = PatchSampler::new(t);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 200_000;
        let first = (0..n).filter(|_| s.sample(0.99, 0.8, &mut rng).unwrap().origin.0 == 0).count();
        let f = first as f64 / n as f64;
        assert!((0.985..=0.995).contains(&f), "{f}");
    }

    #[test]
    fn symmetric_groups_at_half() {
        let entries: Vec<_> = (0..10).map(|i| entry(i, 0.7, i < 5)).collect();
        let t = PatchImportanceTable::from_entries(entries).unwrap();
        let p = normalized_prob(&t, 0.5, 0.8).unwrap();
        let tgt: f64 = p[..5].iter().sum();
        assert!((tgt - 0.5).abs() < 1e-12);
    }
}
