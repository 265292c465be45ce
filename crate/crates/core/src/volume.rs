//! Multi-channel volumes, binary masks and the patch plumbing used by training
//! and inference: bounding-box crop/restore, patch extraction, sliding-window
//! enumeration, center cropping and hit-count merging.
//!
//! Layout is channel-major planes: the value at `(x, y, z, c)` lives at flat
//! index `((c * Z + z) * Y + y) * X + x`. The same order is used on disk.

use crate::error::{invalid, Error, Result};

/// Spatial extent `(X, Y, Z)`.
pub type Dims = (usize, usize, usize);

fn voxel_count(d: Dims) -> usize {
    d.0 * d.1 * d.2
}

/// A real-valued volume with `C` channels per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVolume {
    dims: Dims,
    channels: usize,
    data: Vec<f64>,
}

impl ChannelVolume {
    pub fn zeros(dims: Dims, channels: usize) -> Result<Self> {
        check_dims(dims)?;
        if channels == 0 {
            return Err(invalid!("channel count must be >= 1"));
        }
        Ok(Self { dims, channels, data: vec![0.0; voxel_count(dims) * channels] })
    }

    /// Wraps existing data. Rejects non-finite values.
    pub fn from_vec(dims: Dims, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        if channels == 0 {
            return Err(invalid!("channel count must be >= 1"));
        }
        if data.len() != voxel_count(dims) * channels {
            return Err(invalid!(
                "data length {} does not match {:?} x {} channels",
                data.len(),
                dims,
                channels
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid!("non-finite value at flat index {i}"));
        }
        Ok(Self { dims, channels, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn spatial_index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims.1 + y) * self.dims.0 + x
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize, c: usize) -> usize {
        c * self.voxels() + self.spatial_index(x, y, z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> f64 {
        self.data[self.index(x, y, z, c)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, c: usize, v: f64) {
        let i = self.index(x, y, z, c);
        self.data[i] = v;
    }

    /// All channels of one voxel.
    pub fn voxel(&self, x: usize, y: usize, z: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.channels);
        self.voxel_into(self.spatial_index(x, y, z), &mut out);
        out
    }

    pub(crate) fn voxel_into(&self, spatial: usize, out: &mut Vec<f64>) {
        let n = self.voxels();
        out.clear();
        out.extend((0..self.channels).map(|c| self.data[c * n + spatial]));
    }

    pub fn set_voxel(&mut self, x: usize, y: usize, z: usize, values: &[f64]) {
        assert_eq!(values.len(), self.channels);
        let n = self.voxels();
        let s = self.spatial_index(x, y, z);
        for (c, v) in values.iter().enumerate() {
            self.data[c * n + s] = *v;
        }
    }

    /// One channel as a contiguous plane.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Stacks volumes with identical spatial dims along the channel axis.
    pub fn concat_channels(parts: &[&ChannelVolume]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid!("nothing to concatenate"))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.dims != first.dims {
                return Err(invalid!("concat dims mismatch: {:?} vs {:?}", p.dims, first.dims));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Ok(Self { dims: first.dims, channels, data })
    }
}

fn check_dims(d: Dims) -> Result<()> {
    if d.0 == 0 || d.1 == 0 || d.2 == 0 {
        return Err(invalid!("all dimensions must be >= 1, got {d:?}"));
    }
    Ok(())
}

/// A strictly binary spatial mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    dims: Dims,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != voxel_count(dims) {
            return Err(invalid!("mask length {} does not match {:?}", data.len(), dims));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(invalid!("mask value {} at index {i} is not binary", data[i]));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Dims, value: bool) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self { dims, data: vec![value as u8; voxel_count(dims)] })
    }

    pub fn from_fn(dims: Dims, f: impl Fn(usize, usize, usize) -> bool) -> Result<Self> {
        check_dims(dims)?;
        let mut data = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims.2 {
            for y in 0..dims.1 {
                for x in 0..dims.0 {
                    data.push(f(x, y, z) as u8);
                }
            }
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[(z * self.dims.1 + y) * self.dims.0 + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn nonzero_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| i)
    }

    /// Single-channel float view (0.0 / 1.0).
    pub fn to_volume(&self) -> ChannelVolume {
        ChannelVolume {
            dims: self.dims,
            channels: 1,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn crop(&self, bbox: &BoundingBox) -> Result<BinaryMask> {
        let v = crop(&self.to_volume(), bbox)?;
        Ok(BinaryMask { dims: v.dims, data: v.data.iter().map(|&x| x as u8).collect() })
    }

    pub fn extract(&self, spec: &PatchSpec) -> Result<BinaryMask> {
        let v = extract_patch(&self.to_volume(), spec)?;
        Ok(BinaryMask { dims: v.dims, data: v.data.iter().map(|&x| x as u8).collect() })
    }

    /// Voxelwise AND.
    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.dims != other.dims {
            return Err(invalid!("mask dims mismatch: {:?} vs {:?}", self.dims, other.dims));
        }
        Ok(BinaryMask {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a & b).collect(),
        })
    }
}

/// Cubic window `[origin, origin + size)` along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchSpec {
    pub origin: (usize, usize, usize),
    pub size: usize,
}

impl PatchSpec {
    pub fn new(origin: (usize, usize, usize), size: usize) -> Self {
        Self { origin, size }
    }

    pub fn fits(&self, dims: Dims) -> bool {
        self.size >= 1
            && self.origin.0 + self.size <= dims.0
            && self.origin.1 + self.size <= dims.1
            && self.origin.2 + self.size <= dims.2
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let s = self.size;
        (self.origin.0..self.origin.0 + s).contains(&x)
            && (self.origin.1..self.origin.1 + s).contains(&y)
            && (self.origin.2..self.origin.2 + s).contains(&z)
    }

    /// The central `target`-sized window of this one.
    pub fn centered(&self, target: usize) -> Result<PatchSpec> {
        let off = center_offset(self.size, target)?;
        Ok(PatchSpec {
            origin: (self.origin.0 + off, self.origin.1 + off, self.origin.2 + off),
            size: target,
        })
    }
}

/// Half-open box `[min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub min: (usize, usize, usize),
    pub max: (usize, usize, usize),
}

impl BoundingBox {
    pub fn full(dims: Dims) -> Self {
        Self { min: (0, 0, 0), max: dims }
    }

    pub fn extent(&self) -> Dims {
        (self.max.0 - self.min.0, self.max.1 - self.min.1, self.max.2 - self.min.2)
    }

    fn check(&self, dims: Dims) -> Result<()> {
        let ok = self.min.0 < self.max.0
            && self.min.1 < self.max.1
            && self.min.2 < self.max.2
            && self.max.0 <= dims.0
            && self.max.1 <= dims.1
            && self.max.2 <= dims.2;
        if ok {
            Ok(())
        } else {
            Err(invalid!("bounding box {self:?} invalid for dims {dims:?}"))
        }
    }
}

/// Tight box around the nonzero voxels, grown by `margin` on every side and
/// then, where needed, symmetrically up to `patch` voxels per axis. Growth is
/// clamped to the volume; an axis that cannot reach `patch` is an error.
pub fn mask_bbox(mask: &BinaryMask, patch: usize, margin: usize) -> Result<BoundingBox> {
    let (nx, ny, nz) = mask.dims;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.get(x, y, z) {
                    any = true;
                    for (a, v) in [x, y, z].into_iter().enumerate() {
                        lo[a] = lo[a].min(v);
                        hi[a] = hi[a].max(v + 1);
                    }
                }
            }
        }
    }
    if !any {
        return Err(Error::EmptyMask("cannot compute bounding box of an all-zero mask".into()));
    }
    let dims = [nx, ny, nz];
    for a in 0..3 {
        if patch > dims[a] {
            return Err(invalid!("patch {patch} exceeds volume extent {} on axis {a}", dims[a]));
        }
        lo[a] = lo[a].saturating_sub(margin);
        hi[a] = (hi[a] + margin).min(dims[a]);
        let len = hi[a] - lo[a];
        if len < patch {
            let grow = patch - len;
            let before = grow / 2;
            let mut new_lo = lo[a].saturating_sub(before);
            let mut new_hi = new_lo + patch.max(hi[a] - new_lo);
            if new_hi > dims[a] {
                new_hi = dims[a];
                new_lo = new_hi - patch;
            }
            if new_hi - new_lo < patch {
                new_hi = new_lo + patch;
            }
            lo[a] = new_lo;
            hi[a] = new_hi;
        }
    }
    Ok(BoundingBox { min: (lo[0], lo[1], lo[2]), max: (hi[0], hi[1], hi[2]) })
}

/// Copies the `bbox` region out of `vol`.
pub fn crop(vol: &ChannelVolume, bbox: &BoundingBox) -> Result<ChannelVolume> {
    bbox.check(vol.dims)?;
    let ext = bbox.extent();
    copy_region(vol, bbox.min, ext)
}

/// Crops `vol` to the padded bounding box of `mask`.
pub fn crop_to_mask_bbox(
    vol: &ChannelVolume,
    mask: &BinaryMask,
    patch: usize,
    margin: usize,
) -> Result<(ChannelVolume, BoundingBox)> {
    if vol.dims != mask.dims {
        return Err(invalid!("volume {:?} and mask {:?} dims differ", vol.dims, mask.dims));
    }
    let bbox = mask_bbox(mask, patch, margin)?;
    Ok((crop(vol, &bbox)?, bbox))
}

/// Places `cropped` at `bbox` inside a `full_dims` volume filled with `fill`.
pub fn restore_from_bbox(
    cropped: &ChannelVolume,
    bbox: &BoundingBox,
    full_dims: Dims,
    fill: f64,
) -> Result<ChannelVolume> {
    bbox.check(full_dims)?;
    if bbox.extent() != cropped.dims {
        return Err(invalid!(
            "cropped dims {:?} do not match bbox extent {:?}",
            cropped.dims,
            bbox.extent()
        ));
    }
    let mut out = ChannelVolume::zeros(full_dims, cropped.channels)?;
    out.data.fill(fill);
    paste_region(&mut out, cropped, bbox.min);
    Ok(out)
}

fn copy_region(vol: &ChannelVolume, origin: (usize, usize, usize), ext: Dims) -> Result<ChannelVolume> {
    let mut out = ChannelVolume::zeros(ext, vol.channels)?;
    for c in 0..vol.channels {
        for z in 0..ext.2 {
            for y in 0..ext.1 {
                let src = vol.index(origin.0, origin.1 + y, origin.2 + z, c);
                let dst = out.index(0, y, z, c);
                out.data[dst..dst + ext.0].copy_from_slice(&vol.data[src..src + ext.0]);
            }
        }
    }
    Ok(out)
}

fn paste_region(dst: &mut ChannelVolume, src: &ChannelVolume, origin: (usize, usize, usize)) {
    let ext = src.dims;
    for c in 0..src.channels {
        for z in 0..ext.2 {
            for y in 0..ext.1 {
                let d = dst.index(origin.0, origin.1 + y, origin.2 + z, c);
                let s = src.index(0, y, z, c);
                dst.data[d..d + ext.0].copy_from_slice(&src.data[s..s + ext.0]);
            }
        }
    }
}

/// Copies the cubic window `spec` out of `vol`, all channels.
pub fn extract_patch(vol: &ChannelVolume, spec: &PatchSpec) -> Result<ChannelVolume> {
    if !spec.fits(vol.dims) {
        return Err(invalid!("patch {spec:?} out of bounds for dims {:?}", vol.dims));
    }
    copy_region(vol, spec.origin, (spec.size, spec.size, spec.size))
}

/// Window origins along one axis: `0, stride, 2·stride, …` plus a final
/// clamped origin `len - patch` when the regular grid misses the far edge.
pub fn axis_origins(len: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch == 0 || patch > len {
        return Err(invalid!("patch {patch} does not fit axis of length {len}"));
    }
    if stride == 0 {
        return Err(invalid!("stride must be >= 1"));
    }
    let last = len - patch;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    Ok(out)
}

/// Every window of edge `patch` at the given stride, in lexicographic
/// `(z, y, x)` order with x fastest.
pub fn sliding_positions(dims: Dims, patch: usize, stride: usize) -> Result<Vec<PatchSpec>> {
    let xs = axis_origins(dims.0, patch, stride)?;
    let ys = axis_origins(dims.1, patch, stride)?;
    let zs = axis_origins(dims.2, patch, stride)?;
    let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                out.push(PatchSpec::new((x, y, z), patch));
            }
        }
    }
    Ok(out)
}

fn center_offset(size: usize, target: usize) -> Result<usize> {
    if target == 0 || target > size || (size - target) % 2 != 0 {
        return Err(invalid!(
            "cannot center-crop {size} to {target}: need 0 < target <= size with even difference"
        ));
    }
    Ok((size - target) / 2)
}

/// Central `target³` region of a cubic patch.
pub fn center_crop(patch: &ChannelVolume, target: usize) -> Result<ChannelVolume> {
    let (x, y, z) = patch.dims;
    if x != y || y != z {
        return Err(invalid!("center_crop expects a cubic patch, got {:?}", patch.dims));
    }
    let off = center_offset(x, target)?;
    copy_region(patch, (off, off, off), (target, target, target))
}

/// Averages patches placed at `placements` into a `dims` volume. Voxels with no
/// contribution are zero.
pub fn merge_patches(
    patches: &[ChannelVolume],
    placements: &[PatchSpec],
    dims: Dims,
) -> Result<ChannelVolume> {
    if patches.len() != placements.len() {
        return Err(invalid!("{} patches but {} placements", patches.len(), placements.len()));
    }
    let channels = match patches.first() {
        Some(p) => p.channels,
        None => return Err(invalid!("no patches to merge")),
    };
    let mut acc = ChannelVolume::zeros(dims, channels)?;
    let mut hits = vec![0u32; voxel_count(dims)];
    for (p, spec) in patches.iter().zip(placements) {
        if !spec.fits(dims) {
            return Err(invalid!("placement {spec:?} outside dims {dims:?}"));
        }
        let s = spec.size;
        if p.dims != (s, s, s) || p.channels != channels {
            return Err(invalid!(
                "patch {:?}x{} does not match placement size {s} / {channels} channels",
                p.dims,
                p.channels
            ));
        }
        let (ox, oy, oz) = spec.origin;
        for z in 0..s {
            for y in 0..s {
                let row = acc.spatial_index(ox, oy + y, oz + z);
                for h in &mut hits[row..row + s] {
                    *h += 1;
                }
                for c in 0..channels {
                    let d = acc.index(ox, oy + y, oz + z, c);
                    let src = p.index(0, y, z, c);
                    for (a, b) in acc.data[d..d + s].iter_mut().zip(&p.data[src..src + s]) {
                        *a += *b;
                    }
                }
            }
        }
    }
    let n = voxel_count(dims);
    for c in 0..channels {
        for (v, &h) in acc.data[c * n..(c + 1) * n].iter_mut().zip(&hits) {
            if h > 1 {
                *v /= h as f64;
            }
        }
    }
    Ok(acc)
}

/// Zeroes every channel where `mask` is 0.
pub fn apply_mask(vol: &ChannelVolume, mask: &BinaryMask) -> Result<ChannelVolume> {
    if vol.dims != mask.dims {
        return Err(invalid!("volume {:?} and mask {:?} dims differ", vol.dims, mask.dims));
    }
    let mut out = vol.clone();
    let n = vol.voxels();
    for c in 0..vol.channels {
        for (v, &m) in out.data[c * n..(c + 1) * n].iter_mut().zip(&mask.data) {
            if m == 0 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}
