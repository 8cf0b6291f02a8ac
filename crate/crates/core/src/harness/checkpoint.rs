use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::hexfloat::{from_hex, to_hex};
use crate::error::{Error, Result};
use crate::funn::{ArchSpec, Model, ModelMeta};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Document {
    schema_version: u32,
    meta: MetaDoc,
    spec: ArchSpec,
    /// Exact values.
    params_hex: Vec<String>,
    /// Human-readable mirror of `params_hex`; ignored on load.
    params: Vec<f64>,
    mask: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct MetaDoc {
    seed: u64,
    problem: String,
    epoch: usize,
    temperature_hex: String,
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: Option<u32>,
}

pub fn checkpoint_to_string(model: &Model) -> Result<String> {
    let doc = Document {
        schema_version: SCHEMA_VERSION,
        meta: MetaDoc {
            seed: model.meta.seed,
            problem: model.meta.problem.clone(),
            epoch: model.meta.epoch,
            temperature_hex: to_hex(model.meta.temperature),
        },
        spec: model.spec.clone(),
        params_hex: model.params.iter().map(|&p| to_hex(p)).collect(),
        params: model.params.iter().map(|&p| if p.is_finite() { p } else { 0.0 }).collect(),
        mask: model.mask.clone(),
    };
    toml::to_string(&doc).map_err(|e| Error::Checkpoint(format!("cannot encode checkpoint: {e}")))
}

pub fn checkpoint_from_str(text: &str) -> Result<Model> {
    let probe: VersionProbe =
        toml::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {}", e.message())))?;
    match probe.schema_version {
        Some(SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(Error::Checkpoint(format!(
                "checkpoint schema version {v} is not supported (this build reads version {SCHEMA_VERSION})"
            )))
        }
        None => return Err(Error::Checkpoint("checkpoint has no schema_version".into())),
    }
    let doc: Document =
        toml::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {}", e.message())))?;
    let params = doc.params_hex.iter().map(|s| from_hex(s)).collect::<Result<Vec<_>>>()?;
    let mut model = Model::from_params(doc.spec, params).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if doc.mask.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "mask has {} entries for {} parameters",
            doc.mask.len(),
            model.params.len()
        )));
    }
    model.mask = doc.mask;
    model.meta = ModelMeta {
        seed: doc.meta.seed,
        problem: doc.meta.problem,
        epoch: doc.meta.epoch,
        temperature: from_hex(&doc.meta.temperature_hex)?,
    };
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, checkpoint_to_string(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path)?;
    checkpoint_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funn::build_model;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = build_model(&ArchSpec::oscillator_mix2funn(), 11).unwrap();
        let k = m.mix_weight_indices()[3];
        m.mask[k] = false;
        m.meta.temperature = 0.1 + 0.2;
        m.meta.problem = "damped_oscillator".into();
        let back = checkpoint_from_str(&checkpoint_to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let pts: Vec<f64> = (0..100).map(|i| 0.2 * i as f64).collect();
        let a = m.forward_batch(&pts).unwrap();
        let b = back.forward_batch(&pts).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn truncated_file_is_an_error() {
        let m = build_model(&ArchSpec::oscillator_mix2funn(), 12).unwrap();
        let text = checkpoint_to_string(&m).unwrap();
        let cut = &text[..text.len() / 2];
        assert!(matches!(checkpoint_from_str(cut), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn newer_version_refused() {
        let m = build_model(&ArchSpec::oscillator_mix2funn(), 13).unwrap();
        let text = checkpoint_to_string(&m).unwrap().replace("schema_version = 1", "schema_version = 2");
        let msg = checkpoint_from_str(&text).unwrap_err().to_string();
        assert!(msg.contains('2') && msg.contains('1'), "{msg}");
    }
}
