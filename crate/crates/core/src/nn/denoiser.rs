//! Conditional noise predictor.
//!
//! A small 3D encoder–decoder: the noised HAR patch, the LAR condition patch
//! and the positional patch are concatenated on the channel axis. Each level
//! is a residual block with group normalization and a per-channel time
//! embedding shift. At the deepest level the white-matter features
//! `F_m = relu([f_e(p_k), f_e(M_0)])` are concatenated to the features, mixed
//! by a 3D convolution and passed through single-head spatial self-attention.
//! The output head adds a time-modulated path from the inputs, which an
//! 8-channel body cannot carry for 45 coefficients on its own, and expresses
//! the noise through a velocity-like quantity `v`:
//!
//! ```text
//! v = (1 + γ_x(t)) ⊙ (W·lar + mlp(S_t, lar, t) + body) + γ_s(t) ⊙ S_t
//! y = √(1-ᾱ_t) S_t + √ᾱ_t v
//! ```
//!
//! `γ_s`, `γ_x` are per-channel projections of the time embedding (zero at
//! initialization) and `mlp` is a per-voxel two-layer network whose hidden
//! units are shifted by the time embedding. With `v = √ᾱ ε - √(1-ᾱ) S_0`, `y`
//! is exactly the noise, so `v ≈ -S_0 ≈ -W·lar` holds at every step instead
//! of only where `ᾱ_t` is large. `y` is then
//! gated per channel by the spherical-harmonic attention module (SHAM):
//!
//! ```text
//! s = SHFE(avgpool(y)) + SHFE(maxpool(y))      SHFE = concat of 5 relu(1x1 conv) stages, widths 1,5,9,13,17
//! y' = y ⊙ sigmoid(W_gate s + b_gate)
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Shape, Tape, Var};
use crate::diffusion::{cosine_schedule, ConditionSet, NoisePredictor};
use crate::error::{contract, invalid, Result};
use crate::sh;
use crate::volume::ChannelVolume;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    /// Encoder depth; the deepest level hosts the mask fusion and attention.
    pub levels: usize,
    pub widths: Vec<usize>,
    pub har_channels: usize,
    pub lar_channels: usize,
    pub pos_channels: usize,
    pub patch_edge: usize,
    pub time_embed_dim: usize,
    /// Output width of each `f_e` branch.
    pub fusion_channels: usize,
    pub groups: usize,
    /// Whether the average- and max-pool SHAM branches share SHFE weights.
    pub share_shfe: bool,
    /// Hidden width of the per-voxel head network; 0 disables it.
    pub head_hidden: usize,
    /// Length of the cosine schedule the head is tied to.
    pub diffusion_steps: usize,
    pub seed: u64,
}

impl DenoiserConfig {
    /// Desk-scale preset: 8³ patches, two levels of width 8 and 16.
    pub fn desk() -> Self {
        Self {
            levels: 2,
            widths: vec![8, 16],
            har_channels: 45,
            lar_channels: 45,
            pos_channels: 18,
            patch_edge: 8,
            time_embed_dim: 16,
            fusion_channels: 4,
            groups: 4,
            share_shfe: true,
            head_hidden: 64,
            diffusion_steps: 250,
            seed: 0,
        }
    }

    /// Smallest useful network, for gradient checks.
    pub fn tiny() -> Self {
        Self { widths: vec![4, 8], patch_edge: 4, time_embed_dim: 8, fusion_channels: 2, head_hidden: 4, groups: 2, ..Self::desk() }
    }

    /// Published scale: 32³ patches, four levels of width 128, 256, 256, 512.
    pub fn paper() -> Self {
        Self {
            levels: 4,
            widths: vec![128, 256, 256, 512],
            patch_edge: 32,
            time_embed_dim: 128,
            fusion_channels: 32,
            groups: 4,
            head_hidden: 0,
            ..Self::desk()
        }
    }

    pub fn in_channels(&self) -> usize {
        self.har_channels + self.lar_channels + self.pos_channels
    }

    pub fn out_channels(&self) -> usize {
        self.har_channels
    }

    /// Edge of the deepest feature grid.
    pub fn deepest_edge(&self) -> usize {
        self.patch_edge >> (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.widths.len() != self.levels {
            return Err(invalid!("need {} widths for {} levels", self.levels, self.widths.len()));
        }
        if self.har_channels != 45 {
            return Err(invalid!("output must have 45 channels, got {}", self.har_channels));
        }
        let div = 1usize << (self.levels - 1);
        if self.patch_edge == 0 || self.patch_edge % div != 0 {
            return Err(invalid!("patch edge {} not divisible by {div}", self.patch_edge));
        }
        if self.groups == 0 {
            return Err(invalid!("groups must be >= 1"));
        }
        for (i, w) in self.widths.iter().enumerate() {
            if *w == 0 || w % self.groups != 0 {
                return Err(invalid!("width {w} at level {i} not divisible by {} groups", self.groups));
            }
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(invalid!("time embedding dim must be even and >= 2"));
        }
        if self.fusion_channels == 0 || self.lar_channels == 0 {
            return Err(invalid!("fusion and LAR channel counts must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
    k: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    g: ParamId,
    b: ParamId,
    groups: usize,
}

#[derive(Debug, Clone)]
struct ResBlockIds {
    norm1: NormIds,
    conv1: ConvIds,
    time: ConvIds,
    norm2: NormIds,
    conv2: ConvIds,
    skip: Option<ConvIds>,
}

#[derive(Debug, Clone)]
struct FusionIds {
    fe_patch: ConvIds,
    fe_mask: ConvIds,
    mix: ConvIds,
    attn_norm: NormIds,
    q: ConvIds,
    k: ConvIds,
    v: ConvIds,
    proj: ConvIds,
}

#[derive(Debug, Clone)]
struct ShamIds {
    avg_stages: Vec<ConvIds>,
    max_stages: Vec<ConvIds>,
    gate: ConvIds,
}

/// Time-modulated linear path from the inputs to the output.
#[derive(Debug, Clone)]
struct HeadIds {
    st_scale: ConvIds,
    x_scale: ConvIds,
    lar_map: ConvIds,
    mlp: Option<(ConvIds, ConvIds, ConvIds)>,
}

#[derive(Debug, Clone)]
struct Layout {
    time1: ConvIds,
    time2: ConvIds,
    conv_in: ConvIds,
    enc: Vec<ResBlockIds>,
    fusion: FusionIds,
    dec: Vec<ResBlockIds>,
    out_norm: NormIds,
    out_conv: ConvIds,
    head: HeadIds,
    sham: ShamIds,
}

/// Creates fresh parameters, or looks existing ones up by name and checks
/// their shapes.
enum Builder<'a> {
    Init { store: ParamStore, rng: ChaCha8Rng },
    Load { store: &'a ParamStore },
}

#[derive(Clone, Copy)]
enum Init {
    FanIn,
    Zero,
}

impl Builder<'_> {
    fn tensor(&mut self, name: &str, shape: Vec<usize>, fill: impl FnOnce(&mut ChaCha8Rng, usize) -> Vec<f64>) -> Result<ParamId> {
        match self {
            Builder::Init { store, rng } => {
                let n = shape.iter().product();
                let data = fill(rng, n);
                Ok(store.add(name, shape, data))
            }
            Builder::Load { store } => {
                let id = store.id(name).ok_or_else(|| contract!("checkpoint is missing parameter {name}"))?;
                if store.shape(id) != shape.as_slice() {
                    return Err(contract!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        store.shape(id),
                        shape
                    ));
                }
                Ok(id)
            }
        }
    }

    fn conv(&mut self, name: &str, co: usize, ci: usize, k: usize, init: Init) -> Result<ConvIds> {
        let fan_in = ci * k * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.tensor(&format!("{name}.weight"), vec![co, ci, k, k, k], |rng, n| match init {
            Init::FanIn => (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
            Init::Zero => vec![0.0; n],
        })?;
        let b = self.tensor(&format!("{name}.bias"), vec![co], |_, n| vec![0.0; n])?;
        Ok(ConvIds { w, b, k })
    }

    fn norm(&mut self, name: &str, c: usize, groups: usize) -> Result<NormIds> {
        let g = self.tensor(&format!("{name}.gamma"), vec![c], |_, n| vec![1.0; n])?;
        let b = self.tensor(&format!("{name}.beta"), vec![c], |_, n| vec![0.0; n])?;
        Ok(NormIds { g, b, groups: norm_groups(c, groups) })
    }

    fn res_block(&mut self, name: &str, ci: usize, co: usize, cfg: &DenoiserConfig) -> Result<ResBlockIds> {
        Ok(ResBlockIds {
            norm1: self.norm(&format!("{name}.norm1"), ci, cfg.groups)?,
            conv1: self.conv(&format!("{name}.conv1"), co, ci, 3, Init::FanIn)?,
            time: self.conv(&format!("{name}.time"), co, cfg.time_embed_dim, 1, Init::FanIn)?,
            norm2: self.norm(&format!("{name}.norm2"), co, cfg.groups)?,
            conv2: self.conv(&format!("{name}.conv2"), co, co, 3, Init::FanIn)?,
            skip: if ci != co { Some(self.conv(&format!("{name}.skip"), co, ci, 1, Init::FanIn)?) } else { None },
        })
    }
}

/// `ᾱ_t` for `t = 0..=T`, with `ᾱ_0 = 1`.
fn alpha_bars(cfg: &DenoiserConfig) -> Result<Vec<f64>> {
    let sched = cosine_schedule(cfg.diffusion_steps)?;
    Ok((0..=cfg.diffusion_steps).map(|t| sched.alpha_bar(t)).collect())
}

/// Largest group count `<= wanted` dividing `c`.
fn norm_groups(c: usize, wanted: usize) -> usize {
    (1..=wanted.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

impl Layout {
    fn build(cfg: &DenoiserConfig, b: &mut Builder<'_>) -> Result<Self> {
        let td = cfg.time_embed_dim;
        let time1 = b.conv("time.fc1", td, td, 1, Init::FanIn)?;
        let time2 = b.conv("time.fc2", td, td, 1, Init::FanIn)?;
        let conv_in = b.conv("input", cfg.widths[0], cfg.in_channels(), 3, Init::FanIn)?;
        let mut enc = Vec::new();
        let mut prev = cfg.widths[0];
        for (l, &w) in cfg.widths.iter().enumerate() {
            enc.push(b.res_block(&format!("enc{l}"), prev, w, cfg)?);
            prev = w;
        }
        let deep = *cfg.widths.last().unwrap();
        let fc = cfg.fusion_channels;
        let fusion = FusionIds {
            fe_patch: b.conv("fusion.fe_patch", fc, 1, 3, Init::FanIn)?,
            fe_mask: b.conv("fusion.fe_mask", fc, 1, 3, Init::FanIn)?,
            mix: b.conv("fusion.mix", deep, deep + 2 * fc, 3, Init::FanIn)?,
            attn_norm: b.norm("fusion.attn_norm", deep, cfg.groups)?,
            q: b.conv("fusion.q", deep, deep, 1, Init::FanIn)?,
            k: b.conv("fusion.k", deep, deep, 1, Init::FanIn)?,
            v: b.conv("fusion.v", deep, deep, 1, Init::FanIn)?,
            proj: b.conv("fusion.proj", deep, deep, 1, Init::FanIn)?,
        };
        let mut dec = Vec::new();
        for l in (0..cfg.levels - 1).rev() {
            let ci = prev + cfg.widths[l];
            dec.push(b.res_block(&format!("dec{l}"), ci, cfg.widths[l], cfg)?);
            prev = cfg.widths[l];
        }
        let out_norm = b.norm("output.norm", prev, cfg.groups)?;
        let out_conv = b.conv("output.conv", cfg.out_channels(), prev, 3, Init::FanIn)?;

        let oc = cfg.out_channels();
        let head = HeadIds {
            st_scale: b.conv("head.st_scale", oc, td, 1, Init::Zero)?,
            x_scale: b.conv("head.x_scale", oc, td, 1, Init::Zero)?,
            lar_map: b.conv("head.lar_map", oc, cfg.lar_channels, 1, Init::FanIn)?,
            mlp: match cfg.head_hidden {
                0 => None,
                hh => Some((
                    b.conv("head.mlp1", hh, oc + cfg.lar_channels, 1, Init::FanIn)?,
                    b.conv("head.mlp_time", hh, td, 1, Init::FanIn)?,
                    b.conv("head.mlp2", oc, hh, 1, Init::FanIn)?,
                )),
            },
        };
        let blocks = sh::order_block_sizes(sh::h_max_for_len(oc)?)?;
        let mut avg_stages = Vec::new();
        for (i, &w) in blocks.iter().enumerate() {
            avg_stages.push(b.conv(&format!("sham.shfe{i}"), w, oc, 1, Init::FanIn)?);
        }
        let max_stages = if cfg.share_shfe {
            avg_stages.clone()
        } else {
            let mut v = Vec::new();
            for (i, &w) in blocks.iter().enumerate() {
                v.push(b.conv(&format!("sham.shfe_max{i}"), w, oc, 1, Init::FanIn)?);
            }
            v
        };
        let gate = b.conv("sham.gate", oc, oc, 1, Init::Zero)?;
        Ok(Layout {
            time1,
            time2,
            conv_in,
            enc,
            fusion,
            dec,
            out_norm,
            out_conv,
            head,
            sham: ShamIds { avg_stages, max_stages, gate },
        })
    }
}

/// Sinusoidal embedding `[sin(t f_i)…, cos(t f_i)…]`, `f_i = 10000^(-i/half)`.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
    let mut out: Vec<f64> = freqs.iter().map(|f| (t as f64 * f).sin()).collect();
    out.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
    out
}

fn vol_shape(v: &ChannelVolume) -> Shape {
    let (x, y, z) = v.dims();
    [v.channels(), z, y, x]
}

fn shape_to_volume(tape: &Tape, v: Var) -> ChannelVolume {
    let s = tape.shape(v);
    ChannelVolume::from_vec((s[3], s[2], s[1]), s[0], tape.value(v).to_vec())
        .expect("tape values are finite and well-shaped")
}

/// Intermediate results of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardParts {
    pub pre_gate: ChannelVolume,
    /// Per-channel SHAM weights in `(0, 1)`.
    pub gate: Vec<f64>,
    pub output: ChannelVolume,
}

/// Network with its parameters.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
    layout: Layout,
    alpha_bar: Vec<f64>,
}

struct GraphOut {
    pre_gate: Var,
    gate: Var,
    output: Var,
}

impl Denoiser {
    /// Freshly initialized network (seeded by `config.seed`).
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::Init { store: ParamStore::default(), rng: ChaCha8Rng::seed_from_u64(config.seed) };
        let layout = Layout::build(&config, &mut b)?;
        let Builder::Init { store, .. } = b else { unreachable!() };
        let alpha_bar = alpha_bars(&config)?;
        Ok(Self { config, params: store, layout, alpha_bar })
    }

    /// Wraps loaded parameters, verifying names and shapes.
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = Layout::build(&config, &mut Builder::Load { store: &params })?;
        let alpha_bar = alpha_bars(&config)?;
        Ok(Self { config, params, layout, alpha_bar })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Widths of the SHFE stages.
    pub fn shfe_widths(&self) -> Vec<usize> {
        self.layout.sham.avg_stages.iter().map(|c| self.params.shape(c.b)[0]).collect()
    }

    /// Zeroes the SHAM gate weights and bias.
    pub fn zero_gate(&mut self) {
        let g = self.layout.sham.gate;
        self.params.data_mut(g.w).fill(0.0);
        self.params.data_mut(g.b).fill(0.0);
    }

    fn check_inputs(&self, st: &ChannelVolume, cond: &ConditionSet, t: usize) -> Result<()> {
        if t == 0 || t > self.config.diffusion_steps {
            return Err(invalid!("time step {t} outside [1, {}]", self.config.diffusion_steps));
        }
        let s = self.config.patch_edge;
        if st.dims() != (s, s, s) || st.channels() != self.config.har_channels {
            return Err(contract!(
                "noised patch is {:?}x{}, expected {s}³x{}",
                st.dims(),
                st.channels(),
                self.config.har_channels
            ));
        }
        cond.validate()?;
        if cond.lar_patch.dims() != st.dims() {
            return Err(contract!("condition dims {:?} differ from {:?}", cond.lar_patch.dims(), st.dims()));
        }
        if cond.lar_patch.channels() != self.config.lar_channels || cond.pos_patch.channels() != self.config.pos_channels {
            return Err(contract!(
                "condition channels {}+{} do not match config {}+{}",
                cond.lar_patch.channels(),
                cond.pos_patch.channels(),
                self.config.lar_channels,
                self.config.pos_channels
            ));
        }
        Ok(())
    }

    fn conv(tape: &mut Tape, p: &ParamStore, x: Var, c: ConvIds) -> Var {
        let w = tape.param(p, c.w);
        let b = tape.param(p, c.b);
        tape.conv(x, w, b, c.k)
    }

    fn norm(tape: &mut Tape, p: &ParamStore, x: Var, n: NormIds) -> Var {
        let g = tape.param(p, n.g);
        let b = tape.param(p, n.b);
        tape.group_norm(x, g, b, n.groups)
    }

    fn res_block(tape: &mut Tape, p: &ParamStore, x: Var, temb: Var, r: &ResBlockIds) -> Var {
        let h = Self::norm(tape, p, x, r.norm1);
        let h = tape.silu(h);
        let h = Self::conv(tape, p, h, r.conv1);
        let shift = Self::conv(tape, p, temb, r.time);
        let h = tape.add_channel(h, shift);
        let h = Self::norm(tape, p, h, r.norm2);
        let h = tape.silu(h);
        let h = Self::conv(tape, p, h, r.conv2);
        let skip = match r.skip {
            Some(c) => Self::conv(tape, p, x, c),
            None => x,
        };
        tape.add(h, skip)
    }

    fn time_mlp(&self, tape: &mut Tape, p: &ParamStore, t: usize) -> Var {
        let d = self.config.time_embed_dim;
        let e = tape.leaf([d, 1, 1, 1], sinusoidal_embedding(t, d));
        let h = Self::conv(tape, p, e, self.layout.time1);
        let h = tape.silu(h);
        let h = Self::conv(tape, p, h, self.layout.time2);
        tape.silu(h)
    }

    fn fusion_graph(&self, tape: &mut Tape, p: &ParamStore, pk: &ChannelVolume, m0: &ChannelVolume) -> Var {
        let e = self.config.deepest_edge();
        let f = &self.layout.fusion;
        let branch = |tape: &mut Tape, v: &ChannelVolume, c: ConvIds| {
            let x = tape.leaf(vol_shape(v), v.data().to_vec());
            let h = Self::conv(tape, p, x, c);
            let h = tape.pool(h, [e, e, e]);
            tape.relu(h)
        };
        let a = branch(tape, pk, f.fe_patch);
        let b = branch(tape, m0, f.fe_mask);
        let cat = tape.concat(&[a, b]);
        tape.relu(cat)
    }

    fn sham_graph(&self, tape: &mut Tape, p: &ParamStore, y: Var) -> (Var, Var) {
        let s = &self.layout.sham;
        let stages = |tape: &mut Tape, v: Var, ids: &[ConvIds]| {
            let outs: Vec<Var> = ids
                .iter()
                .map(|c| {
                    let h = Self::conv(tape, p, v, *c);
                    tape.relu(h)
                })
                .collect();
            tape.concat(&outs)
        };
        let avg = tape.global_avg(y);
        let mx = tape.global_max(y);
        let a = stages(tape, avg, &s.avg_stages);
        let m = stages(tape, mx, &s.max_stages);
        let sum = tape.add(a, m);
        let logits = Self::conv(tape, p, sum, s.gate);
        let gate = tape.sigmoid(logits);
        (tape.scale_channel(y, gate), gate)
    }

    fn graph(&self, tape: &mut Tape, p: &ParamStore, st: &ChannelVolume, cond: &ConditionSet, t: usize) -> GraphOut {
        let cfg = &self.config;
        let st_v = tape.leaf(vol_shape(st), st.data().to_vec());
        let lar_v = tape.leaf(vol_shape(&cond.lar_patch), cond.lar_patch.data().to_vec());
        let pos_v = tape.leaf(vol_shape(&cond.pos_patch), cond.pos_patch.data().to_vec());
        let x = tape.concat(&[st_v, lar_v, pos_v]);
        let temb = self.time_mlp(tape, p, t);
        let mut h = Self::conv(tape, p, x, self.layout.conv_in);
        let mut skips = Vec::new();
        for l in 0..cfg.levels {
            if l > 0 {
                let e = cfg.patch_edge >> l;
                h = tape.pool(h, [e, e, e]);
            }
            h = Self::res_block(tape, p, h, temb, &self.layout.enc[l]);
            if l + 1 < cfg.levels {
                skips.push(h);
            }
        }
        // deepest level: mask fusion followed by spatial self-attention
        let fm = self.fusion_graph(tape, p, &cond.pk_mask_patch, &cond.wm_mask_full);
        let cat = tape.concat(&[h, fm]);
        let f = &self.layout.fusion;
        let mixed = Self::conv(tape, p, cat, f.mix);
        let hn = Self::norm(tape, p, mixed, f.attn_norm);
        let q = Self::conv(tape, p, hn, f.q);
        let k = Self::conv(tape, p, hn, f.k);
        let v = Self::conv(tape, p, hn, f.v);
        let a = tape.attention(q, k, v);
        let a = Self::conv(tape, p, a, f.proj);
        h = tape.add(mixed, a);

        for (i, l) in (0..cfg.levels - 1).rev().enumerate() {
            let up = tape.upsample2(h);
            let cat = tape.concat(&[up, skips[l]]);
            h = Self::res_block(tape, p, cat, temb, &self.layout.dec[i]);
        }
        let h = Self::norm(tape, p, h, self.layout.out_norm);
        let h = tape.silu(h);
        let body = Self::conv(tape, p, h, self.layout.out_conv);
        let hd = &self.layout.head;
        let lin = Self::conv(tape, p, lar_v, hd.lar_map);
        let mut xhat = tape.add(body, lin);
        if let Some((m1, mt, m2)) = hd.mlp {
            let inp = tape.concat(&[st_v, lar_v]);
            let h = Self::conv(tape, p, inp, m1);
            let shift = Self::conv(tape, p, temb, mt);
            let h = tape.add_channel(h, shift);
            let h = tape.silu(h);
            let m = Self::conv(tape, p, h, m2);
            xhat = tape.add(xhat, m);
        }
        let gs = Self::conv(tape, p, temb, hd.st_scale);
        let gx = Self::conv(tape, p, temb, hd.x_scale);
        let a = tape.scale_channel(st_v, gs);
        let b = tape.scale_channel(xhat, gx);
        let v = tape.add(xhat, b);
        let v = tape.add(v, a);
        let oc = cfg.out_channels();
        let ab = self.alpha_bar[t];
        let cs = tape.leaf([oc, 1, 1, 1], vec![(1.0 - ab).sqrt(); oc]);
        let cv = tape.leaf([oc, 1, 1, 1], vec![ab.sqrt(); oc]);
        let a = tape.scale_channel(st_v, cs);
        let b = tape.scale_channel(v, cv);
        let pre_gate = tape.add(a, b);
        let (output, gate) = self.sham_graph(tape, p, pre_gate);
        GraphOut { pre_gate, gate, output }
    }

    /// Predicted noise for `st` at step `t`.
    pub fn forward(&self, st: &ChannelVolume, cond: &ConditionSet, t: usize) -> Result<ChannelVolume> {
        Ok(self.forward_parts(st, cond, t)?.output)
    }

    pub fn forward_parts(&self, st: &ChannelVolume, cond: &ConditionSet, t: usize) -> Result<ForwardParts> {
        self.check_inputs(st, cond, t)?;
        let mut tape = Tape::new();
        let g = self.graph(&mut tape, &self.params, st, cond, t);
        Ok(ForwardParts {
            pre_gate: shape_to_volume(&tape, g.pre_gate),
            gate: tape.value(g.gate).to_vec(),
            output: shape_to_volume(&tape, g.output),
        })
    }

    /// `F_m` on the deepest grid.
    pub fn fusion_features(&self, pk_mask_patch: &ChannelVolume, wm_mask_full: &ChannelVolume) -> Result<ChannelVolume> {
        let s = self.config.patch_edge;
        if pk_mask_patch.dims() != (s, s, s) || pk_mask_patch.channels() != 1 || wm_mask_full.channels() != 1 {
            return Err(contract!("fusion inputs must be one-channel, patch {s}³"));
        }
        let mut tape = Tape::new();
        let v = self.fusion_graph(&mut tape, &self.params, pk_mask_patch, wm_mask_full);
        Ok(shape_to_volume(&tape, v))
    }

    /// SHAM gating applied to an arbitrary 45-channel feature map.
    pub fn sham_forward(&self, features: &ChannelVolume) -> Result<(ChannelVolume, Vec<f64>)> {
        if features.channels() != self.config.out_channels() {
            return Err(contract!("SHAM expects {} channels, got {}", self.config.out_channels(), features.channels()));
        }
        let mut tape = Tape::new();
        let y = tape.leaf(vol_shape(features), features.data().to_vec());
        let (out, gate) = self.sham_graph(&mut tape, &self.params, y);
        Ok((shape_to_volume(&tape, out), tape.value(gate).to_vec()))
    }

    /// Time embedding after both projection stages.
    pub fn time_embed(&self, t: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let v = self.time_mlp(&mut tape, &self.params, t);
        tape.value(v).to_vec()
    }

    /// Noise-regression loss and its parameter gradients, evaluated with an
    /// explicit parameter set.
    pub fn loss_and_gradients_with(
        &self,
        params: &ParamStore,
        st: &ChannelVolume,
        cond: &ConditionSet,
        t: usize,
        eps: &ChannelVolume,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check_inputs(st, cond, t)?;
        if eps.dims() != st.dims() || eps.channels() != st.channels() {
            return Err(contract!("noise target shape differs from the noised patch"));
        }
        let mut tape = Tape::new();
        let g = self.graph(&mut tape, params, st, cond, t);
        let loss = tape.mse(g.output, eps.data());
        let mut grads = params.zeros_like();
        tape.backward(loss, &mut grads);
        Ok((tape.value(loss)[0], grads))
    }

    pub fn loss_and_gradients(
        &self,
        st: &ChannelVolume,
        cond: &ConditionSet,
        t: usize,
        eps: &ChannelVolume,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        self.loss_and_gradients_with(&self.params, st, cond, t, eps)
    }

    /// Loss only, with an explicit parameter set (finite-difference checks).
    pub fn loss_with(
        &self,
        params: &ParamStore,
        st: &ChannelVolume,
        cond: &ConditionSet,
        t: usize,
        eps: &ChannelVolume,
    ) -> Result<f64> {
        self.check_inputs(st, cond, t)?;
        let mut tape = Tape::new();
        let g = self.graph(&mut tape, params, st, cond, t);
        let loss = tape.mse(g.output, eps.data());
        Ok(tape.value(loss)[0])
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, st: &ChannelVolume, cond: &ConditionSet, t: usize) -> Result<ChannelVolume> {
        self.forward(st, cond, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::normal_volume;
    use crate::volume::PatchSpec;
    use std::sync::Arc;

    pub(crate) fn random_cond(cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> ConditionSet {
        let s = cfg.patch_edge;
        let mut pk = ChannelVolume::zeros((s, s, s), 1).unwrap();
        for v in pk.data_mut() {
            *v = rng.random_bool(0.5) as u8 as f64;
        }
        let mut m0 = ChannelVolume::zeros((s + 3, s + 2, s + 1), 1).unwrap();
        for v in m0.data_mut() {
            *v = rng.random_bool(0.4) as u8 as f64;
        }
        ConditionSet {
            spec: PatchSpec::new((0, 0, 0), s),
            lar_patch: normal_volume((s, s, s), cfg.lar_channels, rng).unwrap(),
            pos_patch: normal_volume((s, s, s), cfg.pos_channels, rng).unwrap(),
            pk_mask_patch: pk,
            wm_mask_full: Arc::new(m0),
        }
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig::desk().validate().is_ok());
        assert!(DenoiserConfig::paper().validate().is_ok());
        assert_eq!(DenoiserConfig::desk().in_channels(), 108);
        assert!(DenoiserConfig { patch_edge: 6, levels: 3, widths: vec![8, 8, 8], ..DenoiserConfig::desk() }.validate().is_err());
        assert!(DenoiserConfig { widths: vec![8], ..DenoiserConfig::desk() }.validate().is_err());
        assert!(DenoiserConfig { har_channels: 15, ..DenoiserConfig::desk() }.validate().is_err());
    }

    #[test]
    fn shapes_and_determinism() {
        let cfg = DenoiserConfig::desk();
        let net = Denoiser::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cond = random_cond(&cfg, &mut rng);
        let st = normal_volume((8, 8, 8), 45, &mut rng).unwrap();
        let a = net.forward(&st, &cond, 17).unwrap();
        let b = net.forward(&st, &cond, 17).unwrap();
        assert_eq!(a.dims(), (8, 8, 8));
        assert_eq!(a.channels(), 45);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.is_finite()));
        let wrong = normal_volume((4, 4, 4), 45, &mut rng).unwrap();
        assert!(matches!(net.forward(&wrong, &cond, 1), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn shfe_widths_are_sh_blocks() {
        let net = Denoiser::new(DenoiserConfig::desk()).unwrap();
        assert_eq!(net.shfe_widths(), vec![1, 5, 9, 13, 17]);
        assert_eq!(net.shfe_widths().iter().sum::<usize>(), 45);
    }

    #[test]
    fn zero_gate_halves_output() {
        let cfg = DenoiserConfig::desk();
        let net = Denoiser::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cond = random_cond(&cfg, &mut rng);
        let st = normal_volume((8, 8, 8), 45, &mut rng).unwrap();
        let parts = net.forward_parts(&st, &cond, 100).unwrap();
        assert!(parts.gate.iter().all(|&g| g == 0.5));
        for (o, p) in parts.output.data().iter().zip(parts.pre_gate.data()) {
            assert_eq!(*o, p * 0.5);
        }
    }

    #[test]
    fn fusion_is_nonnegative_on_deepest_grid() {
        let cfg = DenoiserConfig::desk();
        let net = Denoiser::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cond = random_cond(&cfg, &mut rng);
        let fm = net.fusion_features(&cond.pk_mask_patch, &cond.wm_mask_full).unwrap();
        assert_eq!(fm.dims(), (4, 4, 4));
        assert_eq!(fm.channels(), 2 * cfg.fusion_channels);
        assert!(fm.data().iter().all(|&v| v >= 0.0));
        let zeros = ChannelVolume::zeros((8, 8, 8), 1).unwrap();
        let zm = ChannelVolume::zeros((10, 9, 8), 1).unwrap();
        let fz = net.fusion_features(&zeros, &zm).unwrap();
        assert!(fz.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn time_embedding_properties() {
        let raw: Vec<Vec<f64>> = (1..=250).map(|t| sinusoidal_embedding(t, 16)).collect();
        for e in &raw {
            assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        for i in 0..raw.len() {
            for j in i + 1..raw.len() {
                let gap = raw[i].iter().zip(&raw[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(gap > 1e-6, "t={} and t={}", i + 1, j + 1);
            }
        }
        let net = Denoiser::new(DenoiserConfig::desk()).unwrap();
        assert_eq!(net.time_embed(42), net.time_embed(42));
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let net = Denoiser::new(DenoiserConfig::tiny()).unwrap();
        let again = Denoiser::from_params(DenoiserConfig::tiny(), net.params().clone()).unwrap();
        assert_eq!(again.params(), net.params());
        assert!(Denoiser::from_params(DenoiserConfig::desk(), net.params().clone()).is_err());
    }
}
