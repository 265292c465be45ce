//! Real, even-order spherical harmonics.
//!
//! Coefficients are flattened by order `h` ascending, then degree `m`
//! ascending from `-h` to `+h`. For `h_max = 8` this gives 45 coefficients in
//! blocks of 1, 5, 9, 13 and 17.
//!
//! Basis convention (orthonormal on the unit sphere, Condon–Shortley phase in
//! the associated Legendre functions `P_h^m`):
//!
//! ```text
//! Y(h, 0)      = N(h,0) P_h^0(cos θ)
//! Y(h, m > 0)  = √2 (-1)^m N(h,m) P_h^m(cos θ) cos(m φ)     = √2 (-1)^m Re Y_h^m
//! Y(h, m < 0)  = √2 (-1)^m N(h,|m|) P_h^|m|(cos θ) sin(|m| φ) = √2 (-1)^m Im Y_h^|m|
//! N(h,m)       = sqrt((2h+1)/(4π) · (h-m)!/(h+m)!)
//! ```
//!
//! `θ` is the polar angle from +z and `φ = atan2(y, x)`. Trigonometric terms
//! are built from `x/ρ`, `y/ρ` by recurrence, which makes `Y(v) == Y(-v)`
//! bit-exact for every even order.

use crate::error::{invalid, Result};
use crate::volume::{BinaryMask, ChannelVolume};

/// Harmonic order used for every FOD volume in this crate.
pub const DEFAULT_H_MAX: usize = 8;
/// Largest order the basis evaluator accepts.
pub const MAX_SUPPORTED_H_MAX: usize = 16;
/// Norm floor below which the angular correlation is undefined.
pub const ACC_NORM_FLOOR: f64 = 1e-8;

const UNIT_TOLERANCE: f64 = 1e-9;

/// Number of real even-order coefficients up to and including `h_max`.
pub fn coeff_count(h_max: usize) -> Result<usize> {
    check_h_max(h_max)?;
    Ok((h_max + 1) * (h_max + 2) / 2)
}

/// Block widths `2h + 1` for every even order `h <= h_max`.
pub fn order_block_sizes(h_max: usize) -> Result<Vec<usize>> {
    check_h_max(h_max)?;
    Ok((0..=h_max).step_by(2).map(|h| 2 * h + 1).collect())
}

/// Inverse of [`coeff_count`]: the order implied by a coefficient vector length.
pub fn h_max_for_len(len: usize) -> Result<usize> {
    (0..=MAX_SUPPORTED_H_MAX)
        .step_by(2)
        .find(|&h| (h + 1) * (h + 2) / 2 == len)
        .ok_or_else(|| invalid!("{len} is not a valid even-order SH coefficient count"))
}

fn check_h_max(h_max: usize) -> Result<()> {
    if h_max % 2 != 0 {
        return Err(invalid!("h_max must be even, got {h_max}"));
    }
    if h_max > MAX_SUPPORTED_H_MAX {
        return Err(invalid!("h_max {h_max} exceeds supported maximum {MAX_SUPPORTED_H_MAX}"));
    }
    Ok(())
}

/// One `(h, m)` pair of the even-order basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShIndex {
    h: usize,
    m: i32,
}

impl ShIndex {
    pub fn new(h: usize, m: i32) -> Result<Self> {
        if h % 2 != 0 {
            return Err(invalid!("order {h} is odd"));
        }
        if m.unsigned_abs() as usize > h {
            return Err(invalid!("|m| = {} exceeds order {h}", m.abs()));
        }
        Ok(Self { h, m })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn m(&self) -> i32 {
        self.m
    }

    /// Position in the flattened `(h asc, m asc)` ordering.
    pub fn flat(&self) -> usize {
        let before = if self.h == 0 { 0 } else { (self.h - 1) * self.h / 2 };
        before + (self.m + self.h as i32) as usize
    }

    pub fn from_flat(k: usize) -> Self {
        let mut h = 0usize;
        let mut start = 0usize;
        while start + 2 * h + 1 <= k {
            start += 2 * h + 1;
            h += 2;
        }
        Self { h, m: (k - start) as i32 - h as i32 }
    }
}

/// Every index up to `h_max` in flattened order.
pub fn sh_indices(h_max: usize) -> Result<Vec<ShIndex>> {
    let n = coeff_count(h_max)?;
    Ok((0..n).map(ShIndex::from_flat).collect())
}

/// A single voxel's SH coefficient vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FodCoefficients {
    h_max: usize,
    values: Vec<f64>,
}

impl FodCoefficients {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let h_max = h_max_for_len(values.len())?;
        Ok(Self { h_max, values })
    }

    pub fn zeros(h_max: usize) -> Result<Self> {
        Ok(Self { h_max, values: vec![0.0; coeff_count(h_max)?] })
    }

    /// Unit vector along the flattened index `k`.
    pub fn unit(h_max: usize, k: usize) -> Result<Self> {
        let mut c = Self::zeros(h_max)?;
        if k >= c.values.len() {
            return Err(invalid!("index {k} out of range for h_max {h_max}"));
        }
        c.values[k] = 1.0;
        Ok(c)
    }

    pub fn h_max(&self) -> usize {
        self.h_max
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, idx: ShIndex) -> f64 {
        self.values[idx.flat()]
    }
}

/// Basis functions evaluated over a set of unit directions.
#[derive(Debug, Clone)]
pub struct ShBasisMatrix {
    h_max: usize,
    directions: Vec<[f64; 3]>,
    /// Row-major `N x K`.
    amplitudes: Vec<f64>,
}

impl ShBasisMatrix {
    pub fn h_max(&self) -> usize {
        self.h_max
    }

    pub fn directions(&self) -> &[[f64; 3]] {
        &self.directions
    }

    pub fn n_directions(&self) -> usize {
        self.directions.len()
    }

    pub fn n_coeffs(&self) -> usize {
        (self.h_max + 1) * (self.h_max + 2) / 2
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let k = self.n_coeffs();
        &self.amplitudes[n * k..(n + 1) * k]
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }
}

/// Evaluates the real symmetric basis at every direction.
pub fn eval_basis(directions: &[[f64; 3]], h_max: usize) -> Result<ShBasisMatrix> {
    let k = coeff_count(h_max)?;
    let mut amplitudes = Vec::with_capacity(directions.len() * k);
    let mut row = vec![0.0; k];
    for (n, d) in directions.iter().enumerate() {
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(invalid!("direction {n} has norm {norm}, expected 1"));
        }
        basis_row(*d, h_max, &mut row);
        amplitudes.extend_from_slice(&row);
    }
    Ok(ShBasisMatrix { h_max, directions: directions.to_vec(), amplitudes })
}

/// Fills `out` (length `coeff_count(h_max)`) with the basis values at `dir`.
/// `dir` must already be unit length.
pub(crate) fn basis_row(dir: [f64; 3], h_max: usize, out: &mut [f64]) {
    let [x, y, z] = dir;
    let rho = (x * x + y * y).sqrt();
    let (cphi, sphi) = if rho > 0.0 { (x / rho, y / rho) } else { (1.0, 0.0) };

    // cos(mφ), sin(mφ) by angle-addition recurrence.
    let mut cos_m = vec![1.0; h_max + 1];
    let mut sin_m = vec![0.0; h_max + 1];
    for m in 1..=h_max {
        cos_m[m] = cos_m[m - 1] * cphi - sin_m[m - 1] * sphi;
        sin_m[m] = sin_m[m - 1] * cphi + cos_m[m - 1] * sphi;
    }

    let legendre = associated_legendre(z, rho, h_max);
    let four_pi = 4.0 * std::f64::consts::PI;
    for h in (0..=h_max).step_by(2) {
        let base = if h == 0 { 0 } else { (h - 1) * h / 2 } + h;
        out[base] = ((2 * h + 1) as f64 / four_pi).sqrt() * legendre[h][0];
        for m in 1..=h {
            let norm = ((2 * h + 1) as f64 / four_pi * factorial_ratio(h, m)).sqrt();
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            let p = std::f64::consts::SQRT_2 * sign * norm * legendre[h][m];
            out[base + m] = p * cos_m[m];
            out[base - m] = p * sin_m[m];
        }
    }
}

/// `(h - m)! / (h + m)!`
fn factorial_ratio(h: usize, m: usize) -> f64 {
    ((h - m + 1)..=(h + m)).fold(1.0, |acc, k| acc / k as f64)
}

/// `P_l^m(cos θ)` for `0 <= m <= l <= l_max`, Condon–Shortley phase included.
/// `sin_theta` is passed explicitly so that sign flips of `cos_theta` stay exact.
fn associated_legendre(cos_theta: f64, sin_theta: f64, l_max: usize) -> Vec<Vec<f64>> {
    let mut p = vec![vec![0.0; l_max + 1]; l_max + 1];
    let mut pmm = 1.0;
    for m in 0..=l_max {
        if m > 0 {
            pmm *= -((2 * m - 1) as f64) * sin_theta;
        }
        p[m][m] = pmm;
        if m + 1 <= l_max {
            p[m + 1][m] = cos_theta * (2 * m + 1) as f64 * pmm;
        }
        for l in (m + 2)..=l_max {
            p[l][m] = ((2 * l - 1) as f64 * cos_theta * p[l - 1][m]
                - (l + m - 1) as f64 * p[l - 2][m])
                / (l - m) as f64;
        }
    }
    p
}

/// FOD amplitude at every basis direction: the linear combination `Σ_k c_k Y_k(v)`.
pub fn reconstruct_fod(coeffs: &FodCoefficients, basis: &ShBasisMatrix) -> Result<Vec<f64>> {
    reconstruct_slice(coeffs.values(), basis)
}

pub(crate) fn reconstruct_slice(coeffs: &[f64], basis: &ShBasisMatrix) -> Result<Vec<f64>> {
    let k = basis.n_coeffs();
    if coeffs.len() != k {
        return Err(invalid!("{} coefficients for a basis with {k} columns", coeffs.len()));
    }
    Ok((0..basis.n_directions())
        .map(|n| basis.row(n).iter().zip(coeffs).map(|(y, c)| y * c).sum())
        .collect())
}

/// Angular correlation coefficient of two coefficient vectors.
///
/// The order-0 coefficient is excluded from both vectors. Returns `None` when
/// either remaining vector has norm at most [`ACC_NORM_FLOOR`].
pub fn acc_voxel(u: &[f64], v: &[f64]) -> Result<Option<f64>> {
    if u.len() != v.len() {
        return Err(invalid!("ACC length mismatch: {} vs {}", u.len(), v.len()));
    }
    h_max_for_len(u.len())?;
    Ok(acc_unchecked(u, v))
}

fn acc_unchecked(u: &[f64], v: &[f64]) -> Option<f64> {
    let (mut dot, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u[1..].iter().zip(&v[1..]) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    let (nu, nv) = (uu.sqrt(), vv.sqrt());
    if nu <= ACC_NORM_FLOOR || nv <= ACC_NORM_FLOOR {
        return None;
    }
    Some((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Regional ACC statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccSummary {
    pub mean: f64,
    /// Population standard deviation over counted voxels.
    pub std: f64,
    pub counted_voxels: usize,
    /// Masked voxels skipped because ACC was undefined there.
    pub undefined_voxels: usize,
}

/// Mean and standard deviation of the voxelwise ACC over `mask`.
pub fn acc_region(
    pred: &ChannelVolume,
    truth: &ChannelVolume,
    mask: &BinaryMask,
) -> Result<AccSummary> {
    if pred.dims() != truth.dims() || pred.dims() != mask.dims() {
        return Err(invalid!(
            "dimension mismatch: pred {:?}, truth {:?}, mask {:?}",
            pred.dims(),
            truth.dims(),
            mask.dims()
        ));
    }
    if pred.channels() != truth.channels() {
        return Err(invalid!(
            "channel mismatch: {} vs {}",
            pred.channels(),
            truth.channels()
        ));
    }
    h_max_for_len(pred.channels())?;

    let mut values = Vec::new();
    let mut undefined = 0usize;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for idx in mask.nonzero_indices() {
        pred.voxel_into(idx, &mut a);
        truth.voxel_into(idx, &mut b);
        match acc_unchecked(&a, &b) {
            Some(v) => values.push(v),
            None => undefined += 1,
        }
    }
    if values.is_empty() {
        return Err(crate::error::Error::NoValidVoxels(format!(
            "mask selects {} voxels, none with defined ACC",
            undefined
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(AccSummary { mean, std: var.sqrt(), counted_voxels: values.len(), undefined_voxels: undefined })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
        loop {
            let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 0.1 && n <= 1.0 {
                return [v[0] / n, v[1] / n, v[2] / n];
            }
        }
    }

    #[test]
    fn counts_and_blocks() {
        assert_eq!(coeff_count(8).unwrap(), 45);
        assert_eq!(coeff_count(0).unwrap(), 1);
        // brute force: Σ (2h+1) over h ∈ {0,2,4}
        assert_eq!(coeff_count(4).unwrap(), [0, 2, 4].iter().map(|h| 2 * h + 1).sum::<usize>());
        assert_eq!(order_block_sizes(8).unwrap(), vec![1, 5, 9, 13, 17]);
        assert_eq!(order_block_sizes(0).unwrap(), vec![1]);
        assert_eq!(order_block_sizes(6).unwrap(), vec![1, 5, 9, 13]);
        assert!(matches!(coeff_count(3), Err(crate::Error::InvalidArgument(_))));
        assert!(order_block_sizes(7).is_err());
        assert!(coeff_count(18).is_err());
    }

    #[test]
    fn index_round_trip() {
        for k in 0..45 {
            let idx = ShIndex::from_flat(k);
            assert_eq!(idx.flat(), k);
            assert_eq!(ShIndex::new(idx.h(), idx.m()).unwrap(), idx);
        }
        assert_eq!(ShIndex::from_flat(0), ShIndex::new(0, 0).unwrap());
        assert_eq!(ShIndex::from_flat(1), ShIndex::new(2, -2).unwrap());
        assert_eq!(ShIndex::from_flat(44), ShIndex::new(8, 8).unwrap());
        assert!(ShIndex::new(3, 0).is_err());
        assert!(ShIndex::new(2, 3).is_err());
    }

    #[test]
    fn constant_term_and_non_unit_rejection() {
        let b = eval_basis(&[[0.0, 0.0, 1.0], [0.6, 0.0, 0.8]], 8).unwrap();
        let y00 = 0.5 / std::f64::consts::PI.sqrt();
        assert!((b.row(0)[0] - y00).abs() < 1e-15);
        assert!((b.row(1)[0] - 0.2820947918).abs() < 1e-10);
        assert!(matches!(eval_basis(&[[1.0, 1.0, 0.0]], 8), Err(crate::Error::InvalidArgument(_))));
    }

    /// Closed forms for order 2 in this convention.
    #[test]
    fn order_two_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = (15.0 / (4.0 * std::f64::consts::PI)).sqrt();
        for _ in 0..50 {
            let d = random_unit(&mut rng);
            let [x, y, z] = d;
            let row = eval_basis(&[d], 2).unwrap().row(0).to_vec();
            let y20 = (5.0 / (16.0 * std::f64::consts::PI)).sqrt() * (3.0 * z * z - 1.0);
            assert!((row[3] - y20).abs() < 1e-12);
            assert!((row[4] - c * x * z).abs() < 1e-12);
            assert!((row[2] - c * y * z).abs() < 1e-12);
            assert!((row[5] - 0.5 * c * (x * x - y * y)).abs() < 1e-12);
            assert!((row[1] - c * x * y).abs() < 1e-12);
        }
    }

    #[test]
    fn antipodal_rows_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let d = random_unit(&mut rng);
            let b = eval_basis(&[d, [-d[0], -d[1], -d[2]]], 8).unwrap();
            assert_eq!(b.row(0), b.row(1));
        }
    }

    #[test]
    fn reconstruct_matches_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dirs: Vec<_> = (0..30).map(|_| random_unit(&mut rng)).collect();
        let basis = eval_basis(&dirs, 8).unwrap();
        let coeffs = FodCoefficients::new((0..45).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let f = reconstruct_fod(&coeffs, &basis).unwrap();
        for (n, d) in dirs.iter().enumerate() {
            let single = eval_basis(&[*d], 8).unwrap();
            let mut s = 0.0;
            for h in (0..=8usize).step_by(2) {
                for m in -(h as i32)..=(h as i32) {
                    let idx = ShIndex::new(h, m).unwrap();
                    s += coeffs.get(idx) * single.row(0)[idx.flat()];
                }
            }
            assert!((s - f[n]).abs() < 1e-12);
        }
        let e0 = FodCoefficients::unit(8, 0).unwrap();
        for v in reconstruct_fod(&e0, &basis).unwrap() {
            assert!((v - 0.2820947917738781).abs() < 1e-15);
        }
        let short = FodCoefficients::new(vec![0.0; 15]).unwrap();
        assert!(reconstruct_fod(&short, &basis).is_err());
    }

    #[test]
    fn acc_basic_cases() {
        let mut u = vec![0.0; 45];
        u[0] = 3.0;
        u[1] = 1.0;
        let mut v = vec![0.0; 45];
        v[2] = 1.0;
        assert_eq!(acc_voxel(&u, &u).unwrap(), Some(1.0));
        assert_eq!(acc_voxel(&u, &v).unwrap(), Some(0.0));
        let iso = {
            let mut w = vec![0.0; 45];
            w[0] = 1.0;
            w
        };
        assert_eq!(acc_voxel(&iso, &u).unwrap(), None);
        assert!(acc_voxel(&u[..15], &v).is_err());
        assert!(acc_voxel(&u[..14], &v[..14]).is_err());
    }

    #[test]
    fn acc_matches_cosine_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let u: Vec<f64> = (0..45).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..45).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dot: f64 = (1..45).map(|k| u[k] * v[k]).sum();
            let nu: f64 = (1..45).map(|k| u[k] * u[k]).sum::<f64>().sqrt();
            let nv: f64 = (1..45).map(|k| v[k] * v[k]).sum::<f64>().sqrt();
            let got = acc_voxel(&u, &v).unwrap().unwrap();
            assert!((got - dot / (nu * nv)).abs() < 1e-12);
        }
    }
}
