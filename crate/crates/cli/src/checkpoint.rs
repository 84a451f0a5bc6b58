//! Versioned JSON checkpoints holding a trained network.

use std::fs;
use std::path::Path;

use conformal_retrofit::eval::RankDistance;
use conformal_retrofit::layers::{Activation, Architecture, RiemannianLayer, RiemannianNetwork};
use conformal_retrofit::losses::Variant;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, CliResult};

pub const CHECKPOINT_VERSION: u32 = 1;

/// How a checkpoint's outputs are compared at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ranking {
    Geodesic,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub activation: Activation,
    /// Row-major `target intrinsic × source intrinsic`.
    pub weight: Vec<Vec<f64>>,
    pub bias_source: Vec<f64>,
    pub bias_target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub architecture: Architecture,
    pub variant: Variant,
    pub ranking: Ranking,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_map: f64,
    pub layers: Vec<LayerRecord>,
}

impl Checkpoint {
    pub fn from_network(net: &RiemannianNetwork, variant: Variant, ranking: Ranking, seed: u64, best_epoch: usize, val_map: f64) -> Self {
        let mut manifolds = vec![net.source().clone()];
        manifolds.extend(net.layers().iter().map(|l| l.target.clone()));
        let layers = net
            .layers()
            .iter()
            .map(|l| LayerRecord {
                activation: l.activation,
                weight: l.weight.rows().into_iter().map(|r| r.to_vec()).collect(),
                bias_source: l.bias_source.to_vec(),
                bias_target: l.bias_target.to_vec(),
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            architecture: Architecture { manifolds },
            variant,
            ranking,
            seed,
            best_epoch,
            val_map,
            layers,
        }
    }

    pub fn network(&self) -> CliResult<RiemannianNetwork> {
        let m = &self.architecture.manifolds;
        if self.layers.len() + 1 != m.len() {
            return Err(CliError::Data(format!(
                "checkpoint has {} layers for architecture {}",
                self.layers.len(),
                self.architecture
            )));
        }
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, rec)| {
                let rows = rec.weight.len();
                let cols = rec.weight.first().map_or(0, Vec::len);
                if rec.weight.iter().any(|r| r.len() != cols) {
                    return Err(CliError::Data(format!("layer {i}: ragged weight matrix")));
                }
                let flat: Vec<f64> = rec.weight.iter().flatten().copied().collect();
                let weight = Array2::from_shape_vec((rows, cols), flat).expect("shape checked");
                Ok(RiemannianLayer::new(
                    m[i].clone(),
                    m[i + 1].clone(),
                    weight,
                    Array1::from(rec.bias_source.clone()),
                    Array1::from(rec.bias_target.clone()),
                    rec.activation,
                )?)
            })
            .collect::<CliResult<Vec<_>>>()?;
        Ok(RiemannianNetwork::new(layers)?)
    }

    pub fn rank_distance(&self) -> RankDistance {
        match self.ranking {
            Ranking::Geodesic => RankDistance::Geodesic(self.architecture.target().clone()),
            Ranking::Cosine => RankDistance::Cosine,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        fs::write(path, self.to_json()).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(CliError::Data(format!(
                "{}: checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.version
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use conformal_retrofit::layers::init_network;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn json_round_trip_is_byte_identical() {
        let arch: Architecture = "E3 -> E5 -> S2xH2".parse().unwrap();
        let net = init_network(&arch, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let ck = Checkpoint::from_network(&net, Variant::Conformal, Ranking::Geodesic, 4, 7, 0.123456789);
        let text = ck.to_json();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_json(), text);
        assert_eq!(back.network().unwrap(), net);
    }
}
