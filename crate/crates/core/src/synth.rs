//! Synthetic datasets drawn from a known NMM.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NmmError, Result};
use crate::graph::{random_graph, save_features, save_labels, Features, Graph, Split};
use crate::kernel::{sample_labels_marginalized, NmmParams};
use crate::rng::{stream, NmmRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_nodes: usize,
    pub num_classes: usize,
    /// Probability of proposing each pair as an edge.
    pub edge_prob: f64,
    pub max_adjacent: usize,
    pub feature_dim: usize,
    /// α_i = 1 + concentration · onehot(b_i) for a hidden class b_i.
    pub concentration: f64,
    /// L_ii; the rest of L_i is spread evenly over the neighbors.
    pub self_weight: f64,
    /// Std of the Gaussian noise added to onehot(b_i) in the features.
    pub feature_noise: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_nodes: 30,
            num_classes: 2,
            edge_prob: 0.15,
            max_adjacent: 4,
            feature_dim: 4,
            concentration: 2.0,
            self_weight: 0.25,
            feature_noise: 0.5,
            train_frac: 0.5,
            val_frac: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    /// Carries features and the full label vector.
    pub graph: Graph,
    pub params: NmmParams,
    pub hidden: Vec<usize>,
    pub split: Split,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.num_nodes >= 1
            && self.num_classes >= 2
            && (0.0..=1.0).contains(&self.edge_prob)
            && self.feature_dim >= self.num_classes
            && self.concentration >= 0.0
            && (0.0..=1.0).contains(&self.self_weight)
            && self.feature_noise >= 0.0
            && self.train_frac >= 0.0
            && self.val_frac >= 0.0
            && self.train_frac + self.val_frac <= 1.0;
        if !ok {
            return Err(NmmError::InvalidArgument("bad synthetic data configuration".into()));
        }
        Ok(())
    }

    /// Ground-truth parameters for a fixed graph and hidden classes.
    pub fn params(&self, g: &Graph, hidden: &[usize]) -> Result<NmmParams> {
        let c = self.num_classes;
        let mut alpha = vec![1.0; g.num_nodes() * c];
        for (i, &b) in hidden.iter().enumerate() {
            alpha[i * c + b] += self.concentration;
        }
        let mut attn = Vec::with_capacity(g.hood_len());
        for i in 0..g.num_nodes() {
            let hood = g.hood(i);
            let rest = if hood.len() > 1 {
                (1.0 - self.self_weight) / (hood.len() - 1) as f64
            } else {
                0.0
            };
            attn.extend(hood.iter().map(|&j| {
                if j == i {
                    if hood.len() > 1 {
                        self.self_weight
                    } else {
                        1.0
                    }
                } else {
                    rest
                }
            }));
        }
        NmmParams::new(g, c, alpha, attn)
    }
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

pub fn synthesize(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng: NmmRng = stream(cfg.seed, 0);
    let g = random_graph(cfg.num_nodes, cfg.edge_prob, cfg.max_adjacent, &mut rng);
    let hidden: Vec<usize> = (0..cfg.num_nodes).map(|_| rng.random_range(0..cfg.num_classes)).collect();
    let params = cfg.params(&g, &hidden)?;
    let mut data = Vec::with_capacity(cfg.num_nodes * cfg.feature_dim);
    for &b in &hidden {
        for k in 0..cfg.feature_dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(round4((k == b) as u8 as f64 + cfg.feature_noise * z));
        }
    }
    let features = Features::new(cfg.num_nodes, cfg.feature_dim, data)?;
    let labels = sample_labels_marginalized(&g, &params, &mut stream(cfg.seed, 1));
    let mut ids: Vec<usize> = (0..cfg.num_nodes).collect();
    ids.shuffle(&mut stream(cfg.seed, 2));
    let n_train = (cfg.train_frac * cfg.num_nodes as f64).round() as usize;
    let n_val = ((cfg.val_frac * cfg.num_nodes as f64).round() as usize).min(cfg.num_nodes - n_train);
    let mut split = Split {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    let graph = g.with_features(features)?.with_labels(labels.into_iter().map(Some).collect())?;
    Ok(SynthData {
        graph,
        params,
        hidden,
        split,
    })
}

impl SynthData {
    /// graph.tsv, features.csv, labels.csv, split.json and params.json.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| NmmError::io(dir, e))?;
        let g = &self.graph;
        let path = dir.join("graph.tsv");
        let mut text = format!("# {} nodes\n", g.num_nodes());
        for (u, v) in g.edges() {
            text.push_str(&format!("{u}\t{v}\n"));
        }
        fs::write(&path, text).map_err(|e| NmmError::io(&path, e))?;
        save_features(dir.join("features.csv"), g.features().expect("synthetic graphs carry features"))?;
        save_labels(dir.join("labels.csv"), g.labels().expect("synthetic graphs carry labels"))?;
        self.split.save(dir.join("split.json"))?;
        let path = dir.join("params.json");
        fs::write(&path, serde_json::to_string_pretty(&self.params.to_document(g))? + "\n")
            .map_err(|e| NmmError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_consistent() {
        let cfg = SynthConfig {
            seed: 3,
            ..Default::default()
        };
        let a = synthesize(&cfg).unwrap();
        let b = synthesize(&cfg).unwrap();
        assert_eq!(a.graph.labels(), b.graph.labels());
        assert_eq!(a.graph.edges(), b.graph.edges());
        assert_eq!(a.params, b.params);
        a.split.validate(30).unwrap();
        assert_eq!(a.split.train.len() + a.split.val.len() + a.split.test.len(), 30);
        assert!(a.graph.max_degree() <= cfg.max_adjacent + 1);
    }

    #[test]
    fn isolated_nodes_attend_to_themselves() {
        let cfg = SynthConfig::default();
        let g = Graph::from_edges(3, &[(0, 1)]).unwrap();
        let p = cfg.params(&g, &[0, 1, 0]).unwrap();
        assert_eq!(p.attn(2), &[1.0]);
        assert_eq!(p.attn(0), &[0.25, 0.75]);
        assert_eq!(p.alpha(1), &[1.0, 3.0]);
    }
}
