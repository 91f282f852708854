//! On-disk sample format: `<id>.raw` holds little-endian f32 voxels (first axis slowest),
//! `<id>.json` holds geometry, landmarks and metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use super::{Grid, Landmark, LandmarkSet, Quality, Sample, SampleMeta, Split, Volume};
use crate::error::{io_err, Error, Result};

pub const FORMAT_VERSION: u64 = 1;

pub fn raw_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.raw"))
}

pub fn sidecar_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.json"))
}

pub fn encode_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

pub fn sidecar_json(sample: &Sample) -> Value {
    let g = &sample.volume.grid;
    let landmarks: Map<String, Value> =
        sample.landmarks.points.iter().map(|l| (l.name.clone(), json!(l.position))).collect();
    let mut v = json!({
        "format_version": FORMAT_VERSION,
        "sample_id": sample.meta.sample_id,
        "shape": g.shape,
        "spacing_mm": g.spacing,
        "origin_mm": g.origin,
        "landmarks": landmarks,
        "quality": sample.meta.quality,
        "rng_seed": sample.meta.rng_seed,
    });
    if let Some(split) = sample.meta.split {
        v["split"] = json!(split);
    }
    v
}

/// Writes `<dir>/<id>.raw` and `<dir>/<id>.json`, creating `dir` if needed.
pub fn save_sample(dir: &Path, sample: &Sample) -> Result<()> {
    sample.volume.check_finite()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let id = &sample.meta.sample_id;
    let raw = raw_path(dir, id);
    fs::write(&raw, encode_f32(&sample.volume.data)).map_err(io_err(&raw))?;
    let side = sidecar_path(dir, id);
    let text = serde_json::to_string_pretty(&sidecar_json(sample))?;
    fs::write(&side, text).map_err(io_err(&side))?;
    Ok(())
}

fn field<'a>(obj: &'a Map<String, Value>, path: &Path, key: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| Error::MissingKey { path: path.to_path_buf(), key: key.into() })
}

fn parse<T: serde::de::DeserializeOwned>(obj: &Map<String, Value>, path: &Path, key: &str) -> Result<T> {
    serde_json::from_value(field(obj, path, key)?.clone())
        .map_err(|e| Error::Format { path: path.to_path_buf(), message: format!("`{key}`: {e}") })
}

/// Reads a sample written by [`save_sample`].
pub fn load_sample(dir: &Path, id: &str) -> Result<Sample> {
    let side = sidecar_path(dir, id);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    let root: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Format { path: side.clone(), message: e.to_string() })?;
    let obj = root
        .as_object()
        .ok_or_else(|| Error::Format { path: side.clone(), message: "sidecar is not a JSON object".into() })?;
    let version: u64 = parse(obj, &side, "format_version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion { path: side, version });
    }
    let shape: [usize; 3] = parse(obj, &side, "shape")?;
    let spacing: [f64; 3] = parse(obj, &side, "spacing_mm")?;
    let origin: [f64; 3] = parse(obj, &side, "origin_mm")?;
    let quality: Quality = parse(obj, &side, "quality")?;
    let rng_seed: u64 = parse(obj, &side, "rng_seed")?;
    let split: Option<Split> = match obj.get("split") {
        Some(_) => Some(parse(obj, &side, "split")?),
        None => None,
    };
    let lm_obj = field(obj, &side, "landmarks")?
        .as_object()
        .ok_or_else(|| Error::Format { path: side.clone(), message: "`landmarks` must be an object".into() })?;
    let mut points = Vec::with_capacity(lm_obj.len());
    for name in lm_obj.keys() {
        points.push(Landmark { name: name.clone(), position: parse(lm_obj, &side, name)? });
    }
    let landmarks = LandmarkSet::new(points)?;
    let grid = Grid::new(shape, spacing, origin)?;

    let raw = raw_path(dir, id);
    let bytes = fs::read(&raw).map_err(io_err(&raw))?;
    let expected = grid.len() as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::ByteCount { path: raw, expected, actual: bytes.len() as u64 });
    }
    let volume = Volume::new(grid, decode_f32(&bytes))?;
    let meta = SampleMeta { sample_id: id.to_string(), quality, split, rng_seed };
    Ok(Sample { volume, landmarks, meta })
}
