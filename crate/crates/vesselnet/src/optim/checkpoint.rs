//! Versioned binary checkpoint: magic, plain-text config header, then named
//! parameter and buffer groups as little-endian 32-bit floats. Round trips
//! are bitwise lossless for `f32` models.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::real::Real;

const MAGIC: &[u8; 8] = b"VESSELNT";
const VERSION: u32 = 1;

fn push_group(buf: &mut Vec<u8>, name: &str, values: &[f32]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Every named group in a model, parameters and buffers alike, as `f32`.
fn all_groups(model: &ModelState<f32>) -> Vec<(String, Vec<f32>)> {
    let mut m = model.clone();
    let mut groups: Vec<(String, Vec<f32>)> = m
        .param_slots_mut()
        .iter()
        .map(|s| (s.name.clone(), s.values.to_vec()))
        .collect();
    groups.push((
        "frontend.running_mean".into(),
        model.frontend.comp.running_mean.clone(),
    ));
    groups.push((
        "frontend.running_var".into(),
        model.frontend.comp.running_var.clone(),
    ));
    groups.push((
        "frontend.initialized".into(),
        vec![if model.frontend.comp.initialized { 1.0 } else { 0.0 }],
    ));
    for (i, block) in model.encoder.blocks.iter().enumerate() {
        groups.push((
            format!("encoder.block{i}.running_mean"),
            block.running_mean.clone(),
        ));
        groups.push((
            format!("encoder.block{i}.running_var"),
            block.running_var.clone(),
        ));
    }
    groups.push((
        "encoder.initialized".into(),
        vec![if model.encoder.initialized { 1.0 } else { 0.0 }],
    ));
    groups.push(("ctdsv.mean".into(), model.ctdsv_stats.mean.to_vec()));
    groups.push(("ctdsv.std".into(), model.ctdsv_stats.std.to_vec()));
    groups
}

/// Serializes the model (converted to `f32` storage) to `path`.
pub fn save_checkpoint<T: Real>(model: &ModelState<T>, path: &Path) -> Result<()> {
    let f32_model: ModelState<f32> = model.cast();
    let config_text = toml::to_string(&f32_model.config)
        .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());
    let groups = all_groups(&f32_model);
    buf.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for (name, values) in &groups {
        push_group(&mut buf, name, values);
    }

    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Data(format!(
                "{}: truncated checkpoint (wanted {n} bytes at offset {})",
                self.path.display(),
                self.pos
            )));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Loads a checkpoint saved by [`save_checkpoint`]. Bad magic, version
/// mismatches, truncation, and shape mismatches are load errors naming the
/// reason.
pub fn load_checkpoint(path: &Path) -> Result<ModelState<f32>> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        data: &data,
        pos: 0,
        path,
    };
    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic bytes (not a checkpoint)",
            path.display()
        )));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let config_len = cur.u32()? as usize;
    let config_text = std::str::from_utf8(cur.take(config_len)?)
        .map_err(|e| Error::Data(format!("{}: config header not UTF-8: {e}", path.display())))?;
    let config: ModelConfig = toml::from_str(config_text)
        .map_err(|e| Error::Data(format!("{}: bad config header: {e}", path.display())))?;

    let mut model: ModelState<f32> = ModelState::init(config, 0)?;
    let n_groups = cur.u32()? as usize;
    let mut stored: Vec<(String, Vec<f32>)> = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::Data(format!("{}: bad group name: {e}", path.display())))?
            .to_string();
        let count = cur.u32()? as usize;
        let raw = cur.take(4 * count)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        stored.push((name, values));
    }

    let expected = all_groups(&model);
    if stored.len() != expected.len() {
        return Err(Error::Data(format!(
            "{}: checkpoint has {} groups, model shape expects {}",
            path.display(),
            stored.len(),
            expected.len()
        )));
    }
    for ((sname, svals), (ename, evals)) in stored.iter().zip(&expected) {
        if sname != ename || svals.len() != evals.len() {
            return Err(Error::Data(format!(
                "{}: group `{sname}` ({} values) does not match expected `{ename}` ({} values)",
                path.display(),
                svals.len(),
                evals.len()
            )));
        }
    }

    // Write groups back into the model.
    {
        let mut slots = model.param_slots_mut();
        for slot in slots.iter_mut() {
            let (_, values) = stored
                .iter()
                .find(|(n, _)| n == &slot.name)
                .expect("validated above");
            slot.values.copy_from_slice(values);
        }
    }
    let get = |name: &str| -> &Vec<f32> {
        &stored
            .iter()
            .find(|(n, _)| n == name)
            .expect("validated above")
            .1
    };
    model
        .frontend
        .comp
        .running_mean
        .copy_from_slice(get("frontend.running_mean"));
    model
        .frontend
        .comp
        .running_var
        .copy_from_slice(get("frontend.running_var"));
    model.frontend.comp.initialized = get("frontend.initialized")[0] != 0.0;
    for (i, block) in model.encoder.blocks.iter_mut().enumerate() {
        block
            .running_mean
            .copy_from_slice(get(&format!("encoder.block{i}.running_mean")));
        block
            .running_var
            .copy_from_slice(get(&format!("encoder.block{i}.running_var")));
    }
    model.encoder.initialized = get("encoder.initialized")[0] != 0.0;
    let mean = get("ctdsv.mean");
    let std = get("ctdsv.std");
    for j in 0..5 {
        model.ctdsv_stats.mean[j] = mean[j];
        model.ctdsv_stats.std[j] = std[j];
    }
    Ok(model)
}

/// Flattens every group for bitwise comparisons in tests.
pub fn flatten_model<T: Real>(model: &ModelState<T>) -> Vec<f32> {
    all_groups(&model.cast::<f32>())
        .into_iter()
        .flat_map(|(_, v)| v)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{test_config, PoolingMode};

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model =
            ModelState::<f32>::init(test_config(PoolingMode::Attention, true), 99).unwrap();
        // Perturb some state so the file is not all defaults.
        model.frontend.comp.running_mean[0] = 0.123;
        model.frontend.comp.initialized = true;
        model.encoder.initialized = true;
        model.ctdsv_stats.mean[2] = -3.25;
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let a = flatten_model(&model);
        let b = flatten_model(&loaded);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert!(loaded.frontend.comp.initialized);
        assert!(loaded.encoder.initialized);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = ModelState::<f32>::init(test_config(PoolingMode::Max, false), 1).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn truncation_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = ModelState::<f32>::init(test_config(PoolingMode::Max, false), 1).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn pooling_mode_is_part_of_the_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = ModelState::<f32>::init(test_config(PoolingMode::Attention, false), 1).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config.pooling, PoolingMode::Attention);
        assert!(loaded.attention.is_some());
    }
}
