//! Single-file container for a trained model, its detector and the config
//! that produced them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::ladder::{LadderConfig, LadderModel};
use crate::numerics::Tensor;

/// Bumped whenever the container layout changes incompatibly.
pub const CHECKPOINT_FORMAT: u32 = 1;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub tool_version: String,
    /// Fully resolved configuration of the run that wrote this file.
    pub config: serde_json::Value,
    pub seed: u64,
    /// Number of completed training epochs.
    pub epoch: usize,
    pub model: LadderConfig,
    pub params: Vec<NamedTensor>,
    /// Absent when the detector could not be calibrated.
    pub detector: Option<Detector>,
}

impl Checkpoint {
    pub fn new(
        model: &LadderModel,
        detector: Option<Detector>,
        config: serde_json::Value,
        seed: u64,
        epoch: usize,
    ) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT,
            tool_version: TOOL_VERSION.to_string(),
            config,
            seed,
            epoch,
            model: model.config().clone(),
            params: model
                .named_values()
                .into_iter()
                .map(|(name, tensor)| NamedTensor { name, tensor })
                .collect(),
            detector,
        }
    }

    /// Rebuilds the model with the stored parameters.
    pub fn to_model(&self) -> Result<LadderModel> {
        let mut model = LadderModel::new(self.model.clone(), 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let values: Vec<(String, Tensor)> =
            self.params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
        model.load_values(&values)?;
        Ok(model)
    }

    pub fn detector(&self) -> Result<&Detector> {
        self.detector
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint holds no calibrated detector".into()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
            tool_version: String,
        }
        let header: Header = serde_json::from_slice(bytes)
            .map_err(|e| Error::Checkpoint(format!("not a checkpoint: {e}")))?;
        if header.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "checkpoint format {} written by version {} is not supported (expected format {CHECKPOINT_FORMAT})",
                header.format_version, header.tool_version
            )));
        }
        serde_json::from_slice(bytes).map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{ClassGaussian, DetectorThresholds};
    use crate::numerics::SeededRng;

    fn sample() -> (LadderModel, Checkpoint) {
        let mut model = LadderModel::new(LadderConfig::new(6, vec![5, 4], 3, 2), 8).unwrap();
        // awkward values that a lossy float round trip would disturb
        let mut rng = SeededRng::new(1);
        for t in model.params_mut().grads_and_values_mut().1 {
            t.data_mut().iter_mut().for_each(|v| *v = rng.normal() * 1e-3 + 1.0 / 3.0);
        }
        let detector = Detector {
            gaussians: vec![
                ClassGaussian {
                    class_id: 0,
                    m: vec![0.1, 0.2, 0.30000000000000004],
                    var: vec![1e-6, 2.5, 7.0],
                    count: 4,
                },
                ClassGaussian {
                    class_id: 1,
                    m: vec![-1.0, 0.0, f64::MIN_POSITIVE],
                    var: vec![1.0; 3],
                    count: 9,
                },
            ],
            thresholds: DetectorThresholds { tau_l: 0.5, tau_r: 2.0 / 3.0 },
        };
        let ckpt = Checkpoint::new(&model, Some(detector), serde_json::json!({"epochs": 3}), 8, 3);
        (model, ckpt)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, ckpt) = sample();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        let restored = back.to_model().unwrap();
        for ((_, a), (_, b)) in restored.named_values().iter().zip(model.named_values()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(&b));
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let (_, mut ckpt) = sample();
        ckpt.format_version = CHECKPOINT_FORMAT + 1;
        let bytes = serde_json::to_vec(&ckpt).unwrap();
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("not supported"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Checkpoint::from_bytes(b"{}"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_detector_is_reported() {
        let (_, mut ckpt) = sample();
        ckpt.detector = None;
        assert!(matches!(ckpt.detector(), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (_, mut ckpt) = sample();
        ckpt.params[0].tensor = Tensor::zeros(&[1, 1]);
        assert!(matches!(ckpt.to_model(), Err(Error::Checkpoint(_))));
    }
}
