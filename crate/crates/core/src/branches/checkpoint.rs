//! Model checkpoint directories: one parameter file per sub-network plus a
//! JSON manifest holding the configuration and training record.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectorModel, ModelConfig, TrainingMeta};
use crate::error::{Error, Result};
use crate::mfss::Fragment;
use crate::nn::checkpoint::{self as params, write_atomic};

pub const MODEL_MANIFEST: &str = "model.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    format_version: u32,
    fragments: Vec<Fragment>,
    config: ModelConfig,
    meta: TrainingMeta,
    fbranch_files: BTreeMap<String, String>,
    gbranch_files: BTreeMap<String, String>,
}

fn fbranch_file(f: Fragment) -> String {
    format!("fbranch_{}.bin", f.key())
}

fn gbranch_file(f: Fragment) -> String {
    format!("gbranch_{}.bin", f.key())
}

pub fn save_model(dir: &Path, model: &DetectorModel) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut fbranch_files = BTreeMap::new();
    let mut gbranch_files = BTreeMap::new();
    for f in Fragment::ALL {
        let name = fbranch_file(f);
        params::save(&dir.join(&name), &model.fstores[f.index()])?;
        fbranch_files.insert(f.key().to_string(), name);
        if let Some(store) = model.sstores.get(f.index()) {
            let name = gbranch_file(f);
            params::save(&dir.join(&name), store)?;
            gbranch_files.insert(f.key().to_string(), name);
        }
    }
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        fragments: Fragment::ALL.to_vec(),
        config: model.config.clone(),
        meta: model.meta.clone(),
        fbranch_files,
        gbranch_files,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_atomic(&dir.join(MODEL_MANIFEST), json.as_bytes())
}

pub fn load_model(dir: &Path) -> Result<DetectorModel> {
    let path = dir.join(MODEL_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ModelManifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported model format version {}",
            manifest.format_version
        )));
    }
    if manifest.fragments != Fragment::ALL {
        return Err(Error::Format(format!(
            "fragment keys {:?} differ from [p, b, f, e, m, n]",
            manifest.fragments
        )));
    }
    let mut model = DetectorModel::new(manifest.config, manifest.meta.seed)?;
    model.meta = manifest.meta;
    for f in Fragment::ALL {
        let name = manifest.fbranch_files.get(f.key()).ok_or_else(|| {
            Error::contract(format!("missing F-Branch checkpoint for fragment `{}`", f.key()))
        })?;
        params::load_into(&dir.join(name), &mut model.fstores[f.index()])?;
        if model.config.use_sam {
            let name = manifest.gbranch_files.get(f.key()).ok_or_else(|| {
                Error::contract(format!("missing G-Branch checkpoint for fragment `{}`", f.key()))
            })?;
            params::load_into(&dir.join(name), &mut model.sstores[f.index()])?;
        }
    }
    Ok(model)
}
