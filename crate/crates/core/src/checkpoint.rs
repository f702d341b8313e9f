//! Single-file checkpoints: safetensors with float32 arrays and the model
//! config as JSON metadata.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{hex_digest, Model, ModelConfig, ParamSet};
use crate::tensor::Tensor;

const CONFIG_KEY: &str = "model_config";
const FORMAT_KEY: &str = "format";
const FORMAT: &str = "segloop-checkpoint-1";

fn ck(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

fn groups(model: &Model) -> [&ParamSet; 3] {
    [&model.seg, &model.sampling.mvp, &model.sampling.weight]
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for set in groups(model) {
        for (name, t) in set.iter() {
            let bytes = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            buffers.push((name.clone(), t.shape().to_vec(), bytes));
        }
    }
    let views = buffers
        .iter()
        .map(|(n, s, b)| Ok((n.as_str(), TensorView::new(Dtype::F32, s.clone(), b).map_err(ck)?)))
        .collect::<Result<Vec<_>>>()?;
    let metadata = HashMap::from([
        (FORMAT_KEY.to_string(), FORMAT.to_string()),
        (CONFIG_KEY.to_string(), serde_json::to_string(&model.config)?),
    ]);
    safetensors::tensor::serialize(views, &Some(metadata)).map_err(ck)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(ck)?;
    let info = meta.metadata().as_ref().ok_or_else(|| ck("missing metadata"))?;
    if info.get(FORMAT_KEY).map(String::as_str) != Some(FORMAT) {
        return Err(ck(format!("unrecognised format {:?}", info.get(FORMAT_KEY))));
    }
    let config: ModelConfig =
        serde_json::from_str(info.get(CONFIG_KEY).ok_or_else(|| ck("missing model config"))?)?;
    let mut model = Model::init(config)?;
    let st = SafeTensors::deserialize(bytes).map_err(ck)?;
    let mut expected = 0;
    for set in [&mut model.seg, &mut model.sampling.mvp, &mut model.sampling.weight] {
        let names: Vec<String> = set.names().cloned().collect();
        expected += names.len();
        for name in names {
            let view = st.tensor(&name).map_err(|e| ck(format!("{name}: {e}")))?;
            let want = set.get(&name).expect("listed").shape().to_vec();
            if view.shape() != want.as_slice() {
                return Err(ck(format!("{name}: stored shape {:?}, config implies {want:?}", view.shape())));
            }
            if view.dtype() != Dtype::F32 {
                return Err(ck(format!("{name}: expected F32, found {:?}", view.dtype())));
            }
            let data: Vec<f64> = view
                .data()
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
                .collect();
            set.insert(name, Tensor::new(want, data));
        }
    }
    if st.len() != expected {
        return Err(ck(format!("archive holds {} tensors, config implies {expected}", st.len())));
    }
    if !groups(&model).iter().all(|s| s.all_finite()) {
        return Err(ck("non-finite parameter values"));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<String> {
    let bytes = to_bytes(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// The model plus the SHA-256 of the file it came from.
pub fn load(path: &Path) -> Result<(Model, String)> {
    let bytes = std::fs::read(path).map_err(|e| ck(format!("{}: {e}", path.display())))?;
    Ok((from_bytes(&bytes)?, sha256_hex(&bytes)))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex_digest(&Sha256::digest(bytes))
}

/// Rounds every parameter through float32, matching what a save/load cycle yields.
pub fn round_to_f32(model: &mut Model) {
    for set in [&mut model.seg, &mut model.sampling.mvp, &mut model.sampling.weight] {
        let names: Vec<String> = set.names().cloned().collect();
        for n in names {
            for v in set.get_mut(&n).expect("listed").data_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }
}
