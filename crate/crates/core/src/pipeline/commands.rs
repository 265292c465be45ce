//! File-level operations behind the `fodiff` subcommands.

use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::dataset::{read_dataset, write_dataset};
use super::eval::{evaluate, EvalReport};
use super::fvol::{read_mask, read_volume, write_volume};
use super::glyphs::{export_glyph_samples, parse_voxel_list};
use super::infer::infer;
use super::phantom::generate_dataset;
use super::train::train;
use crate::binio::write_file;
use crate::error::{invalid, Error, Result};
use crate::nn::Checkpoint;
use crate::volume::Dims;

pub fn parse_dims(s: &str) -> Result<Dims> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| invalid!("bad dimension {p:?}")))
        .collect::<Result<_>>()?;
    match v.as_slice() {
        [x, y, z] => Ok((*x, *y, *z)),
        _ => Err(invalid!("dims need three values, got {s:?}")),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn phantom(out: &Path, n: usize, dims: Dims, seed: u64) -> Result<()> {
    if n == 0 {
        return Err(invalid!("--n must be >= 1"));
    }
    let subjects = generate_dataset(n, dims, seed)?;
    create_dir(out)?;
    write_dataset(out, &subjects)
}

/// Trains on every subject under `data`. Writes `run.cfg`, `loss.csv`,
/// periodic `ckpt_NNNNNN.fdck` and the final `model.fdck` into `out`.
pub fn train_dir(data: &Path, config: &Path, out: &Path) -> Result<PathBuf> {
    let run = RunConfig::load(config)?;
    let subjects = read_dataset(data)?;
    create_dir(out)?;
    let outcome = train(&run, &subjects, |iter, ck| ck.save(&out.join(format!("ckpt_{iter:06}.fdck"))))?;
    outcome.run.save(&out.join("run.cfg"))?;
    write_file(&out.join("loss.csv"), outcome.log_csv.as_bytes())?;
    let model = out.join("model.fdck");
    outcome.checkpoint.save(&model)?;
    Ok(model)
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes the prediction and, next to it, the resolved run config.
pub fn infer_files(ckpt: &Path, lar: &Path, wm: &Path, brain: &Path, out: &Path, seed: u64) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let pred = infer(&ck, &read_volume(lar)?, &read_mask(wm)?, &read_mask(brain)?, seed)?;
    write_volume(&pred, out)?;
    write_file(&sidecar(out, ".run.cfg"), ck.config_text.as_bytes())
}

/// Writes the text report to `report` and the CSV to `report.csv`. Returns
/// the report so callers can act on missing regions.
pub fn eval_files(pred: &Path, truth: &Path, wm: &Path, brain: &Path, report: &Path) -> Result<EvalReport> {
    let r = evaluate(&read_volume(pred)?, &read_volume(truth)?, &read_mask(wm)?, &read_mask(brain)?)?;
    write_file(report, r.to_text().as_bytes())?;
    write_file(&sidecar(report, ".csv"), r.to_csv().as_bytes())?;
    Ok(r)
}

pub fn export_glyphs(fod: &Path, voxels: &str, dirs: usize, out: &Path) -> Result<()> {
    let csv = export_glyph_samples(&read_volume(fod)?, &parse_voxel_list(voxels)?, dirs)?;
    write_file(out, csv.as_bytes())
}
