//! Trained model bundle and its checkpoint format.
//!
//! A checkpoint is a single JSON document tagged `spdm-ckpt-v1` carrying the
//! network configuration, the schedule descriptor, the condition layout
//! (embedder names and widths), the dataset normalization stats and the flat
//! parameter vector as base64-encoded little-endian `f32`s.

use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::condition::{ConditionLayout, EmbedderRegistry};
use crate::diffusion::{NoiseSchedule, ScheduleDescriptor};
use crate::error::{Error, Result};
use crate::net::{Denoiser, DenoiserConfig};
use crate::traj::NormStats;

pub const CHECKPOINT_FORMAT: &str = "spdm-ckpt-v1";

/// Everything needed to run recovery: architecture, parameters, diffusion
/// schedule, condition layout and normalization stats.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub denoiser: Denoiser,
    pub params: Vec<f32>,
    pub schedule: ScheduleDescriptor,
    pub layout_blocks: Vec<(String, usize)>,
    pub norm: NormStats,
}

impl TrainedModel {
    pub fn config(&self) -> &DenoiserConfig {
        self.denoiser.config()
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    /// Checks that a registry would reproduce the layout this model was
    /// trained against.
    pub fn check_registry(&self, registry: &EmbedderRegistry) -> Result<()> {
        let layout = ConditionLayout::new(0, self.layout_blocks.clone());
        if !registry.is_compatible(&layout) {
            return Err(Error::Incompatible(format!(
                "registered embedders do not match checkpoint layout {:?}",
                self.layout_blocks
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.params.len() * 4);
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        let doc = CheckpointDoc {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.denoiser.config().clone(),
            schedule: self.schedule,
            layout: self.layout_blocks.clone(),
            norm: self.norm,
            params_b64: base64::engine::general_purpose::STANDARD.encode(&bytes),
        };
        let file = std::fs::File::create(path.as_ref())?;
        serde_json::to_writer(std::io::BufWriter::new(file), &doc)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        let doc: CheckpointDoc = serde_json::from_reader(std::io::BufReader::new(file))?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(Error::Incompatible(format!(
                "unsupported checkpoint format '{}', expected '{CHECKPOINT_FORMAT}'",
                doc.format
            )));
        }
        let denoiser = Denoiser::new(doc.config)?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(doc.params_b64.as_bytes())
            .map_err(|e| Error::Validation(format!("checkpoint params not valid base64: {e}")))?;
        if bytes.len() != denoiser.param_count() * 4 {
            return Err(Error::Incompatible(format!(
                "checkpoint carries {} parameter bytes, network needs {}",
                bytes.len(),
                denoiser.param_count() * 4
            )));
        }
        let params: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        doc.norm.validate()?;
        Ok(Self {
            denoiser,
            params,
            schedule: doc.schedule,
            layout_blocks: doc.layout,
            norm: doc.norm,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    config: DenoiserConfig,
    schedule: ScheduleDescriptor,
    layout: Vec<(String, usize)>,
    norm: NormStats,
    params_b64: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::TimeEmbedder;
    use crate::net::FusionMode;

    fn dummy_model() -> TrainedModel {
        let config = DenoiserConfig {
            levels: 2,
            base_width: 8,
            attn_heads: 2,
            fusion: FusionMode::Add,
            time_embed_width: 8,
            state_width: 8,
            state_enabled: true,
            c_in: 6,
        };
        let denoiser = Denoiser::new(config).unwrap();
        let params = denoiser.init_params(9);
        TrainedModel {
            denoiser,
            params,
            schedule: ScheduleDescriptor {
                t_count: 20,
                beta_start: 1e-4,
                beta_end: 0.02,
            },
            layout_blocks: vec![],
            norm: NormStats {
                lng_min: 0.0,
                lng_max: 1.0,
                lat_min: 0.0,
                lat_max: 1.0,
                t_min: 0.0,
                t_max: 1.0,
            },
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        let model = dummy_model();
        model.save(&path).unwrap();
        let back = TrainedModel::load(&path).unwrap();
        assert_eq!(model.params, back.params);
        assert_eq!(model.schedule, back.schedule);
        assert_eq!(model.config(), back.config());
        assert_eq!(model.layout_blocks, back.layout_blocks);
    }

    #[test]
    fn wrong_format_tag_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        let model = dummy_model();
        model.save(&path).unwrap();
        let mut doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        doc["format"] = "spdm-ckpt-v0".into();
        std::fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();
        assert!(matches!(
            TrainedModel::load(&path),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn registry_mismatch_is_a_compatibility_error() {
        let model = dummy_model();
        let empty = EmbedderRegistry::new();
        assert!(model.check_registry(&empty).is_ok());
        let mut reg = EmbedderRegistry::new();
        reg.register(Box::new(TimeEmbedder::new(4).unwrap()));
        assert!(matches!(
            model.check_registry(&reg),
            Err(Error::Incompatible(_))
        ));
    }
}
