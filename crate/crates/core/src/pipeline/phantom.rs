//! Synthetic FOD phantoms.
//!
//! Each white-matter voxel holds a sum of axially symmetric kernels
//! `w · exp(κ((v·d)² − 1))`, one per fiber direction `d`, projected onto the
//! order-8 SH basis by least squares against an icosphere grid. Directions can
//! bend smoothly across a region. Brain voxels outside the WM get a single
//! broad kernel. The LAR volume keeps orders up to the truncation order, adds
//! Gaussian noise to every coefficient and is zeroed outside the WM.
//!
//! Datasets are cohorts: every subject perturbs one shared template layout,
//! the way individual brains vary around a common anatomy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::sphere::icosphere;
use crate::error::{invalid, Result};
use crate::sh::{self, DEFAULT_H_MAX};
use crate::volume::{BinaryMask, ChannelVolume, Dims};

/// Axis-aligned block `[min, max)` with one or two fiber populations.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberRegion {
    pub min: (usize, usize, usize),
    pub max: (usize, usize, usize),
    pub directions: Vec<[f64; 3]>,
    /// Kernel weight per direction.
    pub weights: Vec<f64>,
    /// Rotation vector (axis × angle in radians). A voxel's directions are
    /// rotated by `bend · u`, where `u ∈ [-0.5, 0.5]` is its mean normalized
    /// offset from the region center.
    pub bend: [f64; 3],
}

impl FiberRegion {
    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        (self.min.0..self.max.0).contains(&x) && (self.min.1..self.max.1).contains(&y) && (self.min.2..self.max.2).contains(&z)
    }

    /// Fiber directions at a voxel of the region.
    pub fn directions_at(&self, x: usize, y: usize, z: usize) -> Vec<[f64; 3]> {
        let rel = |v: usize, lo: usize, hi: usize| {
            let n = (hi - lo) as f64;
            if n <= 1.0 {
                0.0
            } else {
                (v - lo) as f64 / (n - 1.0) - 0.5
            }
        };
        let u = (rel(x, self.min.0, self.max.0) + rel(y, self.min.1, self.max.1) + rel(z, self.min.2, self.max.2)) / 3.0;
        let r = [self.bend[0] * u, self.bend[1] * u, self.bend[2] * u];
        self.directions.iter().map(|d| rotate(*d, r)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub regions: Vec<FiberRegion>,
    /// Sharpness of WM kernels.
    pub kappa: f64,
    /// Sharpness of the broad kernel in non-WM brain voxels.
    pub gm_kappa: f64,
    pub truncation_order: usize,
    /// Standard deviation of the additive LAR coefficient noise.
    pub noise_level: f64,
    pub seed: u64,
}

/// One generated subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub har: ChannelVolume,
    pub lar: ChannelVolume,
    pub wm: BinaryMask,
    pub brain: BinaryMask,
}

pub const DEFAULT_KAPPA: f64 = 20.0;
pub const DEFAULT_GM_KAPPA: f64 = 2.0;
pub const DEFAULT_NOISE: f64 = 0.01;
/// Largest per-subject rotation (radians) of each of the two direction
/// perturbations in a cohort.
pub const COHORT_SPREAD: f64 = 0.25;

fn rotate(v: [f64; 3], r: [f64; 3]) -> [f64; 3] {
    let th = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if th < 1e-15 {
        return v;
    }
    let k = [r[0] / th, r[1] / th, r[2] / th];
    let (s, c) = th.sin_cos();
    let kv = [k[1] * v[2] - k[2] * v[1], k[2] * v[0] - k[0] * v[2], k[0] * v[1] - k[1] * v[0]];
    let kd = k[0] * v[0] + k[1] * v[1] + k[2] * v[2];
    [0, 1, 2].map(|i| v[i] * c + kv[i] * s + k[i] * kd * (1.0 - c))
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Ellipsoidal brain with semi-axes `0.45 · dims`.
pub fn brain_mask(dims: Dims) -> Result<BinaryMask> {
    let c = [(dims.0 as f64 - 1.0) / 2.0, (dims.1 as f64 - 1.0) / 2.0, (dims.2 as f64 - 1.0) / 2.0];
    let r = [0.45 * dims.0 as f64, 0.45 * dims.1 as f64, 0.45 * dims.2 as f64];
    BinaryMask::from_fn(dims, |x, y, z| {
        let q = [(x as f64 - c[0]) / r[0], (y as f64 - c[1]) / r[1], (z as f64 - c[2]) / r[2]];
        q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= 1.0
    })
}

impl PhantomSpec {
    /// Randomized layout: the central half-extent block is split into 2×2×2
    /// regions at jittered planes, each with one fiber or a crossing pair.
    pub fn random(dims: Dims, seed: u64) -> Result<Self> {
        Self::layout(dims, seed, seed, 0.0)
    }

    /// A subject of a cohort that shares one template layout (fiber
    /// directions, crossings, weights, bends) drawn from `cohort_seed`. Per
    /// subject the split planes are jittered, every direction is turned by a
    /// global and a per-region rotation of up to [`COHORT_SPREAD`] each, and
    /// weights and bend angles are rescaled.
    pub fn cohort_member(dims: Dims, cohort_seed: u64, subject: u64) -> Result<Self> {
        Self::layout(dims, cohort_seed, subject, COHORT_SPREAD)
    }

    fn layout(dims: Dims, template_seed: u64, subject_seed: u64, spread: f64) -> Result<Self> {
        if dims.0 < 8 || dims.1 < 8 || dims.2 < 8 {
            return Err(invalid!("phantom dims must be >= 8 per axis, got {dims:?}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(template_seed);
        let mut subj = ChaCha8Rng::seed_from_u64(subject_seed);
        subj.set_stream(1);
        let axis = |n: usize, rng: &mut ChaCha8Rng| {
            let (lo, hi) = (n / 4, n - n / 4);
            let mid = (lo + hi) / 2;
            let jitter = ((hi - lo) / 6) as i64;
            let split = (mid as i64 + rng.random_range(-jitter..=jitter)) as usize;
            [lo, split, hi]
        };
        let ax = [axis(dims.0, &mut subj), axis(dims.1, &mut subj), axis(dims.2, &mut subj)];
        let turn = |rng: &mut ChaCha8Rng| {
            let a = random_unit(rng);
            let angle = if spread > 0.0 { rng.random_range(0.0..spread) } else { 0.0 };
            a.map(|v| v * angle)
        };
        let global = turn(&mut subj);
        let mut regions = Vec::new();
        for k in 0..2 {
            for j in 0..2 {
                for i in 0..2 {
                    let first = random_unit(&mut rng);
                    let mut directions = vec![first];
                    if rng.random_bool(0.4) {
                        loop {
                            let d = random_unit(&mut rng);
                            let cos = (d[0] * first[0] + d[1] * first[1] + d[2] * first[2]).abs();
                            if cos < 50f64.to_radians().cos() {
                                directions.push(d);
                                break;
                            }
                        }
                    }
                    let mut weights: Vec<f64> = directions.iter().map(|_| rng.random_range(0.6..1.0)).collect();
                    let bend_axis = random_unit(&mut rng);
                    let mut angle = rng.random_range(0.0..0.8);
                    if spread > 0.0 {
                        let local = turn(&mut subj);
                        for d in directions.iter_mut() {
                            *d = rotate(rotate(*d, local), global);
                        }
                        for w in weights.iter_mut() {
                            *w = (*w * subj.random_range(0.85..1.15)).clamp(0.5, 1.0);
                        }
                        angle *= subj.random_range(0.7..1.3);
                    }
                    regions.push(FiberRegion {
                        min: (ax[0][i], ax[1][j], ax[2][k]),
                        max: (ax[0][i + 1], ax[1][j + 1], ax[2][k + 1]),
                        directions,
                        weights,
                        bend: bend_axis.map(|a| a * angle),
                    });
                }
            }
        }
        Ok(Self {
            dims,
            regions,
            kappa: DEFAULT_KAPPA,
            gm_kappa: DEFAULT_GM_KAPPA,
            truncation_order: 4,
            noise_level: DEFAULT_NOISE,
            seed: subject_seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.truncation_order % 2 != 0 || self.truncation_order > DEFAULT_H_MAX {
            return Err(invalid!("truncation order must be even and <= 8, got {}", self.truncation_order));
        }
        if !(self.kappa > 0.0) || !(self.gm_kappa > 0.0) || !(self.noise_level >= 0.0) {
            return Err(invalid!("kappa values must be positive and noise non-negative"));
        }
        for (n, r) in self.regions.iter().enumerate() {
            if r.directions.is_empty() || r.directions.len() > 2 || r.weights.len() != r.directions.len() {
                return Err(invalid!("region {n} needs 1 or 2 directions with one weight each"));
            }
            for d in &r.directions {
                let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                    return Err(invalid!("region {n} direction {d:?} is not unit length"));
                }
            }
            if r.max.0 > self.dims.0 || r.max.1 > self.dims.1 || r.max.2 > self.dims.2 {
                return Err(invalid!("region {n} exceeds dims {:?}", self.dims));
            }
        }
        Ok(())
    }
}

/// Least-squares projector `(BᵀB)⁻¹Bᵀ` onto the order-8 basis, 45 × N.
pub struct Projector {
    grid: Vec<[f64; 3]>,
    pinv: Vec<f64>,
}

impl Projector {
    pub fn new(grid: Vec<[f64; 3]>) -> Result<Self> {
        let basis = sh::eval_basis(&grid, DEFAULT_H_MAX)?;
        let (n, k) = (basis.n_directions(), basis.n_coeffs());
        let b = basis.amplitudes();
        let mut gram = vec![0.0; k * k];
        for r in 0..n {
            let row = &b[r * k..(r + 1) * k];
            for i in 0..k {
                for j in 0..k {
                    gram[i * k + j] += row[i] * row[j];
                }
            }
        }
        let l = cholesky(&gram, k)?;
        // pinv column r = gram⁻¹ · row r
        let mut pinv = vec![0.0; k * n];
        for r in 0..n {
            let x = cholesky_solve(&l, k, &b[r * k..(r + 1) * k]);
            for i in 0..k {
                pinv[i * n + r] = x[i];
            }
        }
        Ok(Self { grid, pinv })
    }

    pub fn grid(&self) -> &[[f64; 3]] {
        &self.grid
    }

    pub fn project(&self, samples: &[f64]) -> Vec<f64> {
        let n = self.grid.len();
        (0..self.pinv.len() / n)
            .map(|i| self.pinv[i * n..(i + 1) * n].iter().zip(samples).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Coefficients of `Σ w_i exp(κ((v·d_i)² − 1))`.
    pub fn kernel_sum(&self, dirs: &[[f64; 3]], weights: &[f64], kappa: f64) -> Vec<f64> {
        let samples: Vec<f64> = self
            .grid
            .iter()
            .map(|v| {
                dirs.iter()
                    .zip(weights)
                    .map(|(d, w)| {
                        let c = v[0] * d[0] + v[1] * d[1] + v[2] * d[2];
                        w * (kappa * (c * c - 1.0)).exp()
                    })
                    .sum()
            })
            .collect();
        self.project(&samples)
    }
}

fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= 0.0 {
                    return Err(invalid!("direction grid does not determine the SH basis"));
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i * n + k] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k * n + i] * x[k]).sum::<f64>()) / l[i * n + i];
    }
    x
}

/// Grid used for the projection.
pub const PROJECTION_LEVEL: usize = 4;

pub fn generate(spec: &PhantomSpec) -> Result<Subject> {
    spec.validate()?;
    let dims = spec.dims;
    let proj = Projector::new(icosphere(PROJECTION_LEVEL))?;
    let brain = brain_mask(dims)?;
    let wm = BinaryMask::from_fn(dims, |x, y, z| brain.get(x, y, z) && spec.regions.iter().any(|r| r.contains(x, y, z)))?;
    let mut har = ChannelVolume::zeros(dims, 45)?;
    let gm_coeffs = proj.kernel_sum(&[[0.0, 0.0, 1.0]], &[0.5], spec.gm_kappa);
    for z in 0..dims.2 {
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                if !brain.get(x, y, z) {
                    continue;
                }
                let c = match spec.regions.iter().find(|r| r.contains(x, y, z)) {
                    Some(r) => proj.kernel_sum(&r.directions_at(x, y, z), &r.weights, spec.kappa),
                    None => gm_coeffs.clone(),
                };
                har.set_voxel(x, y, z, &c);
            }
        }
    }
    let lar = degrade(&har, &wm, spec.truncation_order, spec.noise_level, spec.seed)?;
    Ok(Subject { har, lar, wm, brain })
}

/// Truncates orders above `order`, adds N(0, noise²) to every coefficient of
/// every WM voxel and zeroes everything outside the WM.
pub fn degrade(har: &ChannelVolume, wm: &BinaryMask, order: usize, noise: f64, seed: u64) -> Result<ChannelVolume> {
    let keep = sh::coeff_count(order)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut lar = ChannelVolume::zeros(har.dims(), har.channels())?;
    let n = har.voxels();
    for idx in wm.nonzero_indices() {
        for c in 0..har.channels() {
            let base = if c < keep { har.data()[c * n + idx] } else { 0.0 };
            let e: f64 = rng.sample(StandardNormal);
            lar.data_mut()[c * n + idx] = base + noise * e;
        }
    }
    Ok(lar)
}

/// Per-subject seed derived from a dataset seed.
pub fn subject_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

/// `n` members of the cohort `seed`.
pub fn generate_dataset(n: usize, dims: Dims, seed: u64) -> Result<Vec<Subject>> {
    (0..n).map(|i| generate(&PhantomSpec::cohort_member(dims, seed, subject_seed(seed, i))?)).collect()
}
