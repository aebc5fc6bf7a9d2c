//! Safetensors checkpoints: one f64 tensor per weight and bias, with the
//! architecture and training configuration in the header metadata.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::train::TrainConfig;

pub const FORMAT_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub n_stages: usize,
    pub k: usize,
    pub seed: u64,
    pub config_digest: String,
    pub config: TrainConfig,
}

fn to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn to_safetensors(params: &ModelParams, config: &TrainConfig) -> Result<Vec<u8>> {
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = params
        .layers()
        .iter()
        .flat_map(|l| {
            let s = l.shape;
            [
                (format!("{}.weight", l.key), vec![s.cout, s.cin, s.kernel, s.kernel], to_bytes(&l.weight)),
                (format!("{}.bias", l.key), vec![s.cout], to_bytes(&l.bias)),
            ]
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| Ok((name.clone(), TensorView::new(Dtype::F64, shape.clone(), bytes)?)))
        .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta = HashMap::from([
        ("format_version".to_string(), FORMAT_VERSION.to_string()),
        ("n_stages".to_string(), params.n_stages().to_string()),
        ("k".to_string(), params.k().to_string()),
        ("seed".to_string(), config.seed.to_string()),
        ("config_digest".to_string(), config.digest()),
        ("config".to_string(), config.to_toml()),
    ]);
    safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn from_safetensors(bytes: &[u8]) -> Result<(ModelParams, CheckpointMeta)> {
    let ck = |m: String| Error::Checkpoint(m);
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| ck(e.to_string()))?;
    let meta = header.metadata().clone().ok_or_else(|| ck("missing metadata".into()))?;
    let field = |k: &str| meta.get(k).ok_or_else(|| ck(format!("missing metadata field {k}")));
    if field("format_version")? != FORMAT_VERSION {
        return Err(ck(format!("unsupported format version {}", field("format_version")?)));
    }
    let parse = |k: &str| field(k)?.parse::<u64>().map_err(|e| ck(format!("{k}: {e}")));
    let config = TrainConfig::from_toml(field("config")?)?;
    let info = CheckpointMeta {
        n_stages: parse("n_stages")? as usize,
        k: parse("k")? as usize,
        seed: parse("seed")?,
        config_digest: field("config_digest")?.clone(),
        config,
    };
    let tensors = SafeTensors::deserialize(bytes).map_err(|e| ck(e.to_string()))?;
    let mut params = ModelParams::zeros(info.n_stages, info.k)?;
    let expected = 2 * params.layers().len();
    if tensors.len() != expected {
        return Err(ck(format!("expected {expected} tensors, found {}", tensors.len())));
    }
    for layer in params.layers_mut() {
        let s = layer.shape;
        let targets = [
            ("weight", vec![s.cout, s.cin, s.kernel, s.kernel], &mut layer.weight),
            ("bias", vec![s.cout], &mut layer.bias),
        ];
        for (suffix, shape, dst) in targets {
            let name = format!("{}.{suffix}", layer.key);
            let view = tensors.tensor(&name).map_err(|e| ck(format!("{name}: {e}")))?;
            if view.dtype() != Dtype::F64 || view.shape() != shape.as_slice() {
                return Err(ck(format!("{name}: expected f64 {shape:?}, found {:?} {:?}", view.dtype(), view.shape())));
            }
            for (d, chunk) in dst.iter_mut().zip(view.data().chunks_exact(8)) {
                *d = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
        }
    }
    Ok((params, info))
}

pub fn save(params: &ModelParams, config: &TrainConfig, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_safetensors(params, config)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_safetensors(&bytes)
}
