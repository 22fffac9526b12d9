//! Saved models: parameters plus enough about the graph to refuse a mismatch.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NmmError, Result};
use crate::graph::{Graph, GraphFingerprint};
use crate::kernel::{NmmParams, ParamsDocument};
use crate::parameterize::{BackboneConfig, Parameterization};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelBody {
    /// θ for a backbone; α and L are recomputed on load.
    Backbone { backbone: BackboneConfig, theta: Vec<f64> },
    /// α and L stored directly.
    Params { params: ParamsDocument },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub version: u32,
    pub num_classes: usize,
    pub graph: GraphFingerprint,
    pub seed: u64,
    /// Settings the model was produced with, echoed verbatim.
    #[serde(default)]
    pub config: serde_json::Value,
    pub body: ModelBody,
}

impl ModelDocument {
    pub fn from_theta(g: &Graph, par: &Parameterization, theta: Vec<f64>, seed: u64, config: serde_json::Value) -> Result<Self> {
        if theta.len() != par.num_params() {
            return Err(NmmError::InvalidArgument("θ does not match the layout".into()));
        }
        Ok(ModelDocument {
            version: FORMAT_VERSION,
            num_classes: par.num_classes,
            graph: g.fingerprint(),
            seed,
            config,
            body: ModelBody::Backbone {
                backbone: par.config.clone(),
                theta,
            },
        })
    }

    pub fn from_params(g: &Graph, p: &NmmParams, seed: u64, config: serde_json::Value) -> Self {
        ModelDocument {
            version: FORMAT_VERSION,
            num_classes: p.num_classes(),
            graph: g.fingerprint(),
            seed,
            config,
            body: ModelBody::Params {
                params: p.to_document(g),
            },
        }
    }

    pub fn check_graph(&self, g: &Graph) -> Result<()> {
        let found = g.fingerprint();
        if found != self.graph {
            return Err(NmmError::FingerprintMismatch {
                expected: self.graph.to_string(),
                found: found.to_string(),
            });
        }
        Ok(())
    }

    /// α and L on `g`, which must carry features when the backbone needs them.
    pub fn params(&self, g: &Graph) -> Result<NmmParams> {
        self.check_graph(g)?;
        match &self.body {
            ModelBody::Backbone { backbone, theta } => {
                let par = Parameterization::new(backbone.clone(), g, self.num_classes)?;
                if theta.len() != par.num_params() {
                    return Err(NmmError::Format(format!(
                        "model has {} parameters, layout expects {}",
                        theta.len(),
                        par.num_params()
                    )));
                }
                par.params(g, theta)
            }
            ModelBody::Params { params } => {
                if params.num_classes != self.num_classes {
                    return Err(NmmError::Format("class count disagrees with the stored parameters".into()));
                }
                NmmParams::from_document(g, params)
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        if doc.version != FORMAT_VERSION {
            return Err(NmmError::Format(format!(
                "unsupported model version {} (expected {FORMAT_VERSION})",
                doc.version
            )));
        }
        Ok(doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| NmmError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| NmmError::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn round_trip_and_fingerprint() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let par = Parameterization::new(BackboneConfig::default(), &g, 2).unwrap();
        let theta = par.init_theta(&mut seeded(1));
        let doc = ModelDocument::from_theta(&g, &par, theta, 4, serde_json::json!({"lr": 0.01})).unwrap();
        let back = ModelDocument::from_json(&doc.to_json().unwrap()).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.params(&g).unwrap(), doc.params(&g).unwrap());

        let other = Graph::from_edges(3, &[(0, 1), (0, 2)]).unwrap();
        assert!(matches!(doc.params(&other), Err(NmmError::FingerprintMismatch { .. })));
    }

    #[test]
    fn explicit_params() {
        let g = Graph::from_edges(2, &[(0, 1)]).unwrap();
        let p = NmmParams::uniform(&g, &[1.0, 1.0]).unwrap();
        let doc = ModelDocument::from_params(&g, &p, 0, serde_json::Value::Null);
        let back = ModelDocument::from_json(&doc.to_json().unwrap()).unwrap();
        assert_eq!(back.params(&g).unwrap(), p);
    }

    #[test]
    fn rejects_other_versions() {
        let g = Graph::from_edges(2, &[(0, 1)]).unwrap();
        let p = NmmParams::uniform(&g, &[1.0, 1.0]).unwrap();
        let mut doc = ModelDocument::from_params(&g, &p, 0, serde_json::Value::Null);
        doc.version = 99;
        assert!(ModelDocument::from_json(&doc.to_json().unwrap()).is_err());
    }
}
