//! Run configuration and its `key = value` text form.
//!
//! One setting per line, `#` starts a comment, lists are comma separated.
//! Unknown keys are errors. [`RunConfig::to_text`] writes every key, and
//! floats are printed in shortest round-trip form, so reading a written file
//! gives back an identical config.
//!
//! | key | desk | published scale |
//! |---|---|---|
//! | `seed` | 0 | |
//! | `diffusion_steps` | 250 | 250 |
//! | `patch` | 8 | 32 |
//! | `target` | 4 | 20 |
//! | `train_stride` | 2 | 2 |
//! | `infer_stride` | 4 | 20 |
//! | `bbox_margin` | 2 | 6 |
//! | `sampler_a_start`, `sampler_b_start` | 0.99, 0.8 | 0.99, 0.8 |
//! | `sampler_a_end`, `sampler_b_end` | 0.8, 0.5 | 0.8, 0.5 |
//! | `freq_levels`, `f_max` | 2, 2 | 2, 2 |
//! | `widths` | 8,16 | 128,256,256,512 |
//! | `time_embed_dim` | 16 | 128 |
//! | `fusion_channels` | 4 | 32 |
//! | `norm_groups` | 4 | 4 |
//! | `share_shfe` | true | true |
//! | `head_hidden` | 64 | 0 |
//! | `x0_clip` | 3 | none |
//! | `iterations` | 2000 | 100000 |
//! | `batch_size` | 2 | 4 |
//! | `lr` | 2e-3 | 1e-4 |
//! | `lr_halve_at` | 1000 | 50000 |
//! | `checkpoint_every` | 500 | 10000 |
//! | `ema_decay` | 0.995 | 0.9999 |
//! | `har_mean`, `har_std`, `lar_mean`, `lar_std` | filled by training | |

use std::path::Path;

use crate::binio::{read_file, write_file};
use crate::ccm::{frequencies, FrequencyBand};
use crate::error::{Error, Result};
use crate::fpa::SamplerConfig;
use crate::nn::DenoiserConfig;
use crate::pipeline::standardize::ChannelStats;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub diffusion_steps: usize,
    pub patch: usize,
    pub target: usize,
    pub train_stride: usize,
    pub infer_stride: usize,
    /// Voxels added around the WM bounding box before tiling.
    pub bbox_margin: usize,
    pub sampler_a_start: f64,
    pub sampler_b_start: f64,
    pub sampler_a_end: f64,
    pub sampler_b_end: f64,
    pub freq_levels: usize,
    pub f_max: f64,
    pub widths: Vec<usize>,
    pub time_embed_dim: usize,
    pub fusion_channels: usize,
    pub norm_groups: usize,
    pub share_shfe: bool,
    /// Hidden width of the per-voxel output head network; 0 disables it.
    pub head_hidden: usize,
    /// Clamp on the standardized `ŝ_0` during sampling; `None` samples with
    /// the plain noise-form posterior mean.
    pub x0_clip: Option<f64>,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Iteration from which the learning rate is halved.
    pub lr_halve_at: usize,
    pub checkpoint_every: usize,
    /// Decay of the weight average stored in checkpoints; `None` stores the
    /// raw weights.
    pub ema_decay: Option<f64>,
    pub har_stats: Option<ChannelStats>,
    pub lar_stats: Option<ChannelStats>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            seed: 0,
            diffusion_steps: 250,
            patch: 8,
            target: 4,
            train_stride: 2,
            infer_stride: 4,
            bbox_margin: 2,
            sampler_a_start: 0.99,
            sampler_b_start: 0.8,
            sampler_a_end: 0.8,
            sampler_b_end: 0.5,
            freq_levels: 2,
            f_max: 2.0,
            widths: vec![8, 16],
            time_embed_dim: 16,
            fusion_channels: 4,
            norm_groups: 4,
            share_shfe: true,
            head_hidden: 64,
            x0_clip: Some(3.0),
            iterations: 2000,
            batch_size: 2,
            lr: 2e-3,
            lr_halve_at: 1000,
            checkpoint_every: 500,
            ema_decay: Some(0.995),
            har_stats: None,
            lar_stats: None,
        }
    }

    pub fn paper() -> Self {
        Self {
            patch: 32,
            target: 20,
            infer_stride: 20,
            bbox_margin: 6,
            widths: vec![128, 256, 256, 512],
            time_embed_dim: 128,
            fusion_channels: 32,
            head_hidden: 0,
            x0_clip: None,
            iterations: 100_000,
            batch_size: 4,
            lr: 1e-4,
            lr_halve_at: 50_000,
            checkpoint_every: 10_000,
            ema_decay: Some(0.9999),
            ..Self::desk()
        }
    }

    pub fn band(&self) -> Result<FrequencyBand> {
        frequencies(self.freq_levels as i64, self.f_max)
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            a_start: self.sampler_a_start,
            b_start: self.sampler_b_start,
            a_end: self.sampler_a_end,
            b_end: self.sampler_b_end,
            total_iterations: self.iterations,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            levels: self.widths.len(),
            widths: self.widths.clone(),
            har_channels: 45,
            lar_channels: 45,
            pos_channels: 6 * (self.freq_levels + 1),
            patch_edge: self.patch,
            time_embed_dim: self.time_embed_dim,
            fusion_channels: self.fusion_channels,
            groups: self.norm_groups,
            share_shfe: self.share_shfe,
            head_hidden: self.head_hidden,
            diffusion_steps: self.diffusion_steps,
            seed: self.seed,
        }
    }

    pub fn learning_rate(&self, iteration: usize) -> f64 {
        if iteration >= self.lr_halve_at {
            self.lr * 0.5
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.target == 0 || self.target > self.patch || (self.patch - self.target) % 2 != 0 {
            return bad(format!("target {} must be <= patch {} with even difference", self.target, self.patch));
        }
        if self.train_stride == 0 || self.infer_stride == 0 {
            return bad("strides must be >= 1".into());
        }
        if self.infer_stride > self.target {
            return bad(format!("infer_stride {} leaves gaps between {}³ targets", self.infer_stride, self.target));
        }
        if self.diffusion_steps == 0 || self.iterations == 0 || self.batch_size == 0 {
            return bad("diffusion_steps, iterations and batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if let Some(c) = self.x0_clip {
            if !(c > 0.0) || !c.is_finite() {
                return bad(format!("x0_clip must be positive, got {c}"));
            }
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return bad(format!("ema_decay must be in [0, 1), got {d}"));
            }
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be >= 1".into());
        }
        self.sampler().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.band().map_err(|e| Error::Config(e.to_string()))?;
        self.denoiser().validate().map_err(|e| Error::Config(e.to_string()))?;
        for (name, s) in [("har", &self.har_stats), ("lar", &self.lar_stats)] {
            if let Some(s) = s {
                if s.mean.len() != 45 || s.std.len() != 45 {
                    return bad(format!("{name} statistics must have 45 entries"));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        fn list<T: ToString>(v: &[T]) -> String {
            v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
        }
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("seed", self.seed.to_string());
        kv("diffusion_steps", self.diffusion_steps.to_string());
        kv("patch", self.patch.to_string());
        kv("target", self.target.to_string());
        kv("train_stride", self.train_stride.to_string());
        kv("infer_stride", self.infer_stride.to_string());
        kv("bbox_margin", self.bbox_margin.to_string());
        kv("sampler_a_start", self.sampler_a_start.to_string());
        kv("sampler_b_start", self.sampler_b_start.to_string());
        kv("sampler_a_end", self.sampler_a_end.to_string());
        kv("sampler_b_end", self.sampler_b_end.to_string());
        kv("freq_levels", self.freq_levels.to_string());
        kv("f_max", self.f_max.to_string());
        kv("widths", list(&self.widths));
        kv("time_embed_dim", self.time_embed_dim.to_string());
        kv("fusion_channels", self.fusion_channels.to_string());
        kv("norm_groups", self.norm_groups.to_string());
        kv("share_shfe", self.share_shfe.to_string());
        kv("head_hidden", self.head_hidden.to_string());
        kv("x0_clip", self.x0_clip.map_or_else(|| "none".to_string(), |c| c.to_string()));
        kv("iterations", self.iterations.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_halve_at", self.lr_halve_at.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("ema_decay", self.ema_decay.map_or_else(|| "none".to_string(), |d| d.to_string()));
        if let Some(st) = &self.har_stats {
            kv("har_mean", list(&st.mean));
            kv("har_std", list(&st.std));
        }
        if let Some(st) = &self.lar_stats {
            kv("lar_mean", list(&st.mean));
            kv("lar_std", list(&st.std));
        }
        s
    }

    /// Parses text, starting from desk defaults for keys not given.
    pub fn from_text(text: &str) -> Result<Self> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {k}")))
        }
        fn list<T: std::str::FromStr>(k: &str, v: &str) -> Result<Vec<T>> {
            v.split(',').map(|p| num(k, p.trim())).collect()
        }
        let mut c = Self::desk();
        let (mut hm, mut hs, mut lm, mut ls) = (None, None, None, None);
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
            match k {
                "seed" => c.seed = num(k, v)?,
                "diffusion_steps" => c.diffusion_steps = num(k, v)?,
                "patch" => c.patch = num(k, v)?,
                "target" => c.target = num(k, v)?,
                "train_stride" => c.train_stride = num(k, v)?,
                "infer_stride" => c.infer_stride = num(k, v)?,
                "bbox_margin" => c.bbox_margin = num(k, v)?,
                "sampler_a_start" => c.sampler_a_start = num(k, v)?,
                "sampler_b_start" => c.sampler_b_start = num(k, v)?,
                "sampler_a_end" => c.sampler_a_end = num(k, v)?,
                "sampler_b_end" => c.sampler_b_end = num(k, v)?,
                "freq_levels" => c.freq_levels = num(k, v)?,
                "f_max" => c.f_max = num(k, v)?,
                "widths" => c.widths = list(k, v)?,
                "time_embed_dim" => c.time_embed_dim = num(k, v)?,
                "fusion_channels" => c.fusion_channels = num(k, v)?,
                "norm_groups" => c.norm_groups = num(k, v)?,
                "share_shfe" => c.share_shfe = num(k, v)?,
                "head_hidden" => c.head_hidden = num(k, v)?,
                "x0_clip" => c.x0_clip = if v == "none" { None } else { Some(num(k, v)?) },
                "iterations" => c.iterations = num(k, v)?,
                "batch_size" => c.batch_size = num(k, v)?,
                "lr" => c.lr = num(k, v)?,
                "lr_halve_at" => c.lr_halve_at = num(k, v)?,
                "checkpoint_every" => c.checkpoint_every = num(k, v)?,
                "ema_decay" => c.ema_decay = if v == "none" { None } else { Some(num(k, v)?) },
                "har_mean" => hm = Some(list(k, v)?),
                "har_std" => hs = Some(list(k, v)?),
                "lar_mean" => lm = Some(list(k, v)?),
                "lar_std" => ls = Some(list(k, v)?),
                _ => return Err(Error::Config(format!("line {}: unknown key {k}", n + 1))),
            }
        }
        c.har_stats = stats_pair("har", hm, hs)?;
        c.lar_stats = stats_pair("lar", lm, ls)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text().as_bytes())
    }
}

fn stats_pair(name: &str, mean: Option<Vec<f64>>, std: Option<Vec<f64>>) -> Result<Option<ChannelStats>> {
    match (mean, std) {
        (None, None) => Ok(None),
        (Some(mean), Some(std)) => ChannelStats::new(mean, std).map(Some).map_err(|e| Error::Config(e.to_string())),
        _ => Err(Error::Config(format!("{name}_mean and {name}_std must be given together"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::paper().validate().unwrap();
        let p = RunConfig::paper();
        assert_eq!((p.diffusion_steps, p.patch, p.target, p.train_stride, p.infer_stride), (250, 32, 20, 2, 20));
        assert_eq!((p.batch_size, p.lr, p.learning_rate(60_000)), (4, 1e-4, 5e-5));
        assert_eq!(RunConfig::desk().denoiser().in_channels(), 108);
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::desk();
        c.lr = 0.1 + 0.2;
        c.har_stats = Some(ChannelStats::new(vec![1.0 / 3.0; 45], vec![0.7; 45]).unwrap());
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn rejects_bad_input() {
        let err = |t: &str| RunConfig::from_text(t).unwrap_err().class();
        assert_eq!(err("colour = blue"), "config");
        assert_eq!(err("patch 8"), "config");
        assert_eq!(err("patch = eight"), "config");
        assert_eq!(err("target = 5"), "config");
        assert_eq!(err("seed = 1\nseed = 2"), "config");
        assert_eq!(err("har_mean = 0"), "config");
        let c = RunConfig::from_text("# comment\n\nseed = 9  # trailing\n").unwrap();
        assert_eq!(c.seed, 9);
    }
}
