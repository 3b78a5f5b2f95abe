//! Text checkpoint format: one JSON document with `version`, `spec`,
//! `weights` and `biases` (flat row-major arrays per layer).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, Network, NetworkSpec, NnError, Result};

pub const CHECKPOINT_VERSION: &str = "v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct CheckpointDoc {
    version: String,
    spec: NetworkSpec,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl From<Network> for CheckpointDoc {
    fn from(net: Network) -> Self {
        let (weights, biases) = net
            .layers
            .into_iter()
            .map(|l| (l.weights, l.biases))
            .unzip();
        Self {
            version: CHECKPOINT_VERSION.to_owned(),
            spec: net.spec,
            weights,
            biases,
        }
    }
}

impl TryFrom<CheckpointDoc> for Network {
    type Error = NnError;

    fn try_from(doc: CheckpointDoc) -> Result<Self> {
        if doc.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {:?}", doc.version)));
        }
        if doc.weights.len() != doc.biases.len() {
            return Err(NnError::Checkpoint("weights and biases disagree on layer count".into()));
        }
        let layers = doc
            .spec
            .layer_shapes()
            .into_iter()
            .zip(doc.weights.into_iter().zip(doc.biases))
            .map(|((fan_in, fan_out), (weights, biases))| Layer {
                fan_in,
                fan_out,
                weights,
                biases,
            })
            .collect::<Vec<_>>();
        if layers.len() != doc.spec.layer_shapes().len() {
            return Err(NnError::Checkpoint("layer count does not match spec".into()));
        }
        Network::from_layers(doc.spec, layers)
    }
}

impl Network {
    pub fn to_checkpoint_string(&self) -> String {
        serde_json::to_string(self).expect("network serialization is infallible")
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| NnError::Checkpoint(e.to_string()))
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    #[test]
    fn round_trip_is_exact() {
        let mut rng = seeded_rng(5);
        let net = Network::xavier_init(NetworkSpec::new(3, vec![7, 4], 3).unwrap(), &mut rng).unwrap();
        let text = net.to_checkpoint_string();
        assert!(text.contains("\"version\":\"v1\""));
        assert_eq!(Network::from_checkpoint_str(&text).unwrap(), net);
    }

    #[test]
    fn rejects_bad_documents() {
        let mut rng = seeded_rng(5);
        let net = Network::xavier_init(NetworkSpec::new(2, vec![3], 2).unwrap(), &mut rng).unwrap();
        let text = net.to_checkpoint_string();
        assert!(Network::from_checkpoint_str(&text.replace("\"v1\"", "\"v9\"")).is_err());
        let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        doc["weights"][0].as_array_mut().unwrap().pop();
        assert!(Network::from_checkpoint_str(&doc.to_string()).is_err());
        assert!(Network::from_checkpoint_str("").is_err());
    }
}
