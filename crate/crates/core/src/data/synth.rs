use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dataset, Graph, LabeledGraph};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    ErFeatureShift,
    MotifShift,
    DensityShift,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motif {
    /// Clique over the chosen nodes (every triple is a triangle).
    Triangle,
    /// First chosen node joined to all other chosen nodes.
    Star,
    None,
}

/// Parameters of one synthetic graph family.
///
/// Topology is Erdős–Rényi with `edge_prob`; node features are
/// `feature_mean + feature_std · N(0, I)`. `motif` is only planted for the
/// motif-shift family, on 3 to 5 random nodes per graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub family: Family,
    pub n_graphs: usize,
    pub nodes_min: usize,
    pub nodes_max: usize,
    pub edge_prob: f64,
    pub feature_mean: Vec<f64>,
    pub feature_std: f64,
    #[serde(default = "default_motif")]
    pub motif: Motif,
    pub seed: u64,
}

fn default_motif() -> Motif {
    Motif::None
}

impl SynthSpec {
    /// Erdős–Rényi family with an isotropic feature mean of `mean` in every
    /// one of `dim` coordinates.
    pub fn er(n_graphs: usize, dim: usize, mean: f64, std: f64, seed: u64) -> Self {
        SynthSpec {
            family: Family::ErFeatureShift,
            n_graphs,
            nodes_min: 10,
            nodes_max: 20,
            edge_prob: 0.2,
            feature_mean: vec![mean; dim],
            feature_std: std,
            motif: Motif::None,
            seed,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes_min == 0 || self.nodes_min > self.nodes_max {
            return Err(Error::Config(format!(
                "need 1 <= nodes_min <= nodes_max, got {}..{}",
                self.nodes_min, self.nodes_max
            )));
        }
        if !(self.edge_prob > 0.0 && self.edge_prob < 1.0) {
            return Err(Error::Config(format!(
                "edge_prob must lie in (0, 1), got {}",
                self.edge_prob
            )));
        }
        if self.feature_mean.is_empty() {
            return Err(Error::Config("feature_mean must be non-empty".into()));
        }
        if !(self.feature_std >= 0.0) || !self.feature_std.is_finite() {
            return Err(Error::Config(format!(
                "feature_std must be finite and >= 0, got {}",
                self.feature_std
            )));
        }
        if self.family == Family::MotifShift && self.motif == Motif::None {
            return Err(Error::Config("motif-shift family needs a motif".into()));
        }
        Ok(())
    }
}

/// Generates the dataset described by `spec`. The output is a pure function
/// of the spec, seed included. All graphs carry class label 0.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.feature_dim();
    let mut graphs = Vec::with_capacity(spec.n_graphs);
    for _ in 0..spec.n_graphs {
        let n = rng.random_range(spec.nodes_min..=spec.nodes_max);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < spec.edge_prob {
                    edges.push((i, j));
                }
            }
        }
        if spec.family == Family::MotifShift && n >= 3 {
            let k = rng.random_range(3..=5usize).min(n);
            let chosen = sample(&mut rng, n, k).into_vec();
            match spec.motif {
                Motif::Triangle => {
                    for a in 0..k {
                        for b in a + 1..k {
                            edges.push((chosen[a], chosen[b]));
                        }
                    }
                }
                Motif::Star => {
                    for &leaf in &chosen[1..] {
                        edges.push((chosen[0], leaf));
                    }
                }
                Motif::None => {}
            }
        }
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            for &mu in &spec.feature_mean {
                let z: f64 = rng.sample(StandardNormal);
                data.push(mu + spec.feature_std * z);
            }
        }
        let features = Matrix::from_vec(n, d, data)?;
        graphs.push(LabeledGraph::new(Graph::new(n, &edges, features)?, 0));
    }
    let name = match spec.family {
        Family::ErFeatureShift => "er-feature-shift",
        Family::MotifShift => "motif-shift",
        Family::DensityShift => "density-shift",
    };
    Ok(Dataset::new(format!("{name}-{}", spec.seed), d, graphs))
}
