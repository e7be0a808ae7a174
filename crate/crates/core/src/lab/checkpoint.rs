//! Checkpoints: `model.ftns` holds every parameter as concatenated tensor
//! records, `model.json` the config and parameter table.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ToyModelConfig;
use super::model::{Param, ToyModel};
use crate::error::{Error, Result};
use crate::tensor::dump::{read_tensor, write_tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub routing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub step: usize,
    pub config: ToyModelConfig,
    pub params: Vec<ParamMeta>,
}

pub fn tensor_path(dir: &Path) -> PathBuf {
    dir.join("model.ftns")
}

pub fn meta_path(dir: &Path) -> PathBuf {
    dir.join("model.json")
}

fn bad(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Checkpoint { field: field.into(), reason: reason.into() }
}

pub fn save_checkpoint(model: &ToyModel, step: usize, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(tensor_path(dir))?);
    for p in &model.params {
        write_tensor(&mut w, &p.value)?;
    }
    w.flush()?;
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        step,
        config: model.config.clone(),
        params: model
            .params
            .iter()
            .map(|p| ParamMeta { name: p.name.clone(), rows: p.value.rows(), cols: p.value.cols(), routing: p.routing })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    std::fs::write(meta_path(dir), text)?;
    Ok(())
}

/// Loads a checkpoint directory; every failure names the offending field.
pub fn load_checkpoint(dir: &Path) -> Result<(ToyModel, usize)> {
    let text = std::fs::read_to_string(meta_path(dir)).map_err(|e| bad("model.json", e.to_string()))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| bad("model.json", e.to_string()))?;
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(bad(
            "format_version",
            format!("expected {CHECKPOINT_FORMAT_VERSION}, found {}", meta.format_version),
        ));
    }
    meta.config.validate().map_err(|e| bad("config", e.to_string()))?;
    let file = File::open(tensor_path(dir)).map_err(|e| bad("model.ftns", e.to_string()))?;
    let mut r = BufReader::new(file);
    let mut params = Vec::with_capacity(meta.params.len());
    for (i, pm) in meta.params.iter().enumerate() {
        let value = read_tensor(&mut r).map_err(|e| bad(format!("model.ftns[{i}] ({})", pm.name), e.to_string()))?;
        if value.shape() != (pm.rows, pm.cols) {
            return Err(bad(
                format!("params[{i}].rows"),
                format!("{} is {:?} in model.json but {:?} in model.ftns", pm.name, (pm.rows, pm.cols), value.shape()),
            ));
        }
        params.push(Param { name: pm.name.clone(), value, routing: pm.routing });
    }
    let mut rest = Vec::new();
    std::io::Read::read_to_end(&mut r, &mut rest)?;
    if !rest.is_empty() {
        return Err(bad("model.ftns", format!("{} trailing bytes after {} tensors", rest.len(), meta.params.len())));
    }
    Ok((ToyModel::from_params(meta.config, params)?, meta.step))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ToyModel {
        let cfg = ToyModelConfig { d: 8, layers: 1, heads: 2, ffn_dim: 8, context: 10, w: 2, groups: 2, d_g: 2, ..Default::default() };
        ToyModel::new(cfg, 9).unwrap()
    }

    fn field(r: Result<(ToyModel, usize)>) -> String {
        match r {
            Err(Error::Checkpoint { field, .. }) => field,
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save_checkpoint(&m, 42, dir.path()).unwrap();
        let (back, step) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(step, 42);
    }

    #[test]
    fn corruption_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), 1, dir.path()).unwrap();
        let json = std::fs::read_to_string(meta_path(dir.path())).unwrap();

        std::fs::write(meta_path(dir.path()), json.replace("\"format_version\": 1", "\"format_version\": 7")).unwrap();
        assert_eq!(field(load_checkpoint(dir.path())), "format_version");

        std::fs::write(meta_path(dir.path()), json.replacen("\"rows\": 256", "\"rows\": 255", 1)).unwrap();
        assert_eq!(field(load_checkpoint(dir.path())), "params[0].rows");

        std::fs::write(meta_path(dir.path()), json.replacen("\"step\"", "\"stepp\"", 1)).unwrap();
        let f = field(load_checkpoint(dir.path()));
        assert_eq!(f, "model.json");

        std::fs::write(meta_path(dir.path()), &json).unwrap();
        let mut bytes = std::fs::read(tensor_path(dir.path())).unwrap();
        bytes[0] = b'X';
        std::fs::write(tensor_path(dir.path()), &bytes).unwrap();
        assert_eq!(field(load_checkpoint(dir.path())), "model.ftns[0] (tok_emb)");

        bytes[0] = b'F';
        bytes.truncate(bytes.len() - 3);
        std::fs::write(tensor_path(dir.path()), &bytes).unwrap();
        assert!(field(load_checkpoint(dir.path())).starts_with("model.ftns["));
    }
}
