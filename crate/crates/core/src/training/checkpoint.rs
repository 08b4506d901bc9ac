use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stfm_tensor::container::{self, DType};

use crate::encoders::Bpe;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, StfmModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: ModelConfig,
    bpe: Bpe,
    meta: CheckpointMeta,
    autoencoder_frozen: bool,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".model.json");
    PathBuf::from(s)
}

/// Weights in the tensor container plus a JSON sidecar with the model
/// configuration and tokenizer.
pub fn save_checkpoint(path: &Path, model: &StfmModel, meta: &CheckpointMeta) -> Result<()> {
    crate::data_pipeline::io::ensure_parent(path)?;
    container::save(path, &model.store.named_tensors(), DType::F64)?;
    let frozen = model
        .store
        .ids_with_prefix(crate::encoders::VISUAL_AE)
        .next()
        .is_some_and(|id| !model.store.get(id).trainable);
    let side = Sidecar {
        config: model.config.clone(),
        bpe: model.encoders.bpe.clone(),
        meta: *meta,
        autoencoder_frozen: frozen,
    };
    let sp = sidecar_path(path);
    std::fs::write(&sp, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&sp, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(StfmModel, CheckpointMeta)> {
    let sp = sidecar_path(path);
    let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let side: Sidecar = serde_json::from_str(&text)?;
    let mut model = StfmModel::new(side.config, side.bpe)?;
    model.store.load_named(&container::load(path)?)?;
    model.freeze_autoencoder(side.autoencoder_frozen);
    Ok((model, side.meta))
}
