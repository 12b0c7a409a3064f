//! Fixtures and benchmark definitions shared by the integration tests.
#![allow(dead_code)]

use std::fs;
use std::path::Path;

use sigood_core::data::{Family, Motif, SynthSpec};
use sigood_core::detector::DetectorConfig;
use sigood_core::eval::{BenchmarkConfig, DataSource, Method, Protocol};
use sigood_core::gnn::PretrainConfig;

/// A TU dataset given as `(suffix, body)` file pairs.
pub struct TuFixture {
    pub name: &'static str,
    pub files: &'static [(&'static str, &'static str)],
}

impl TuFixture {
    pub fn write(&self, dir: &Path) {
        for (suffix, body) in self.files {
            fs::write(dir.join(format!("{}_{}.txt", self.name, suffix)), body).unwrap();
        }
    }
}

/// Triangle on nodes 1-3 and a path 4-5-6, with binary node labels.
pub const TWO_GRAPH: TuFixture = TuFixture {
    name: "TWO",
    files: &[
        ("A", "1, 2\n2, 1\n2, 3\n3, 2\n1, 3\n3, 1\n4, 5\n5, 4\n5, 6\n6, 5\n"),
        ("graph_indicator", "1\n1\n1\n2\n2\n2\n"),
        ("graph_labels", "0\n1\n"),
        ("node_labels", "0\n1\n0\n1\n1\n0\n"),
    ],
};

/// Edges that touch the first and last node of every graph, a single-node
/// graph in the middle, and distribution labels. Valid, but every edge sits
/// right at a graph boundary.
pub const BOUNDARY_EDGE: TuFixture = TuFixture {
    name: "BND",
    files: &[
        ("A", "1, 3\n3, 1\n3, 2\n2, 3\n5, 6\n6, 5\n7, 5\n5, 7\n"),
        ("graph_indicator", "1\n1\n1\n2\n3\n3\n3\n"),
        ("graph_labels", "2\n0\n2\n"),
        ("graph_dist_labels", "0\n1\n0\n"),
    ],
};

/// The boundary fixture with one edge moved across graphs 1 and 2.
pub const BOUNDARY_CROSSING: TuFixture = TuFixture {
    name: "BNDX",
    files: &[
        ("A", "1, 3\n3, 1\n3, 4\n4, 3\n5, 6\n6, 5\n"),
        ("graph_indicator", "1\n1\n1\n2\n3\n3\n3\n"),
        ("graph_labels", "2\n0\n2\n"),
    ],
};

/// Node labels and real-valued attributes at once; attributes go down to
/// 1e-8.
pub const DUAL_FEATURE: TuFixture = TuFixture {
    name: "DUAL",
    files: &[
        ("A", "1, 2\n2, 1\n2, 3\n3, 2\n4, 5\n5, 4\n"),
        ("graph_indicator", "1\n1\n1\n2\n2\n"),
        ("graph_labels", "1\n0\n"),
        ("node_labels", "2\n0\n1\n1\n2\n"),
        (
            "node_attributes",
            "0.5, -1.25\n1e-08, 3\n-2.00000001, 0\n7.5, 1.00000001\n-0.00000003, 12\n",
        ),
    ],
};

pub const FIXTURE_SUITE: [TuFixture; 3] = [TWO_GRAPH, BOUNDARY_EDGE, DUAL_FEATURE];

fn er(n: usize, mean: f64, seed: u64) -> SynthSpec {
    SynthSpec::er(n, 8, mean, 1.0, seed)
}

/// ID mean 0 vs OOD mean 3, std 1, d = 8; 200 training graphs and a
/// 50 + 50 mixed test set per seed.
pub fn feature_benchmark() -> BenchmarkConfig {
    BenchmarkConfig {
        name: "er-feature-shift".into(),
        protocol: Protocol::Ood {
            id: DataSource::Synth(er(250, 0.0, 11)),
            ood: DataSource::Synth(er(50, 3.0, 12)),
        },
        methods: vec![Method::Sigood, Method::RawEnergy],
        seeds: (0..5).collect(),
        pretrain: PretrainConfig::default(),
        detector: DetectorConfig::default(),
    }
}

/// Same features on both sides; OOD graphs carry a planted clique.
pub fn motif_benchmark() -> BenchmarkConfig {
    let mut ood = er(50, 0.0, 22);
    ood.family = Family::MotifShift;
    ood.motif = Motif::Triangle;
    BenchmarkConfig {
        name: "motif-shift".into(),
        protocol: Protocol::Ood {
            id: DataSource::Synth(er(250, 0.0, 21)),
            ood: DataSource::Synth(ood),
        },
        methods: vec![Method::Sigood, Method::NoEpo, Method::NoPg],
        seeds: (0..5).collect(),
        pretrain: PretrainConfig::default(),
        detector: DetectorConfig::default(),
    }
}

/// A scaled-down feature benchmark for harness and determinism checks.
pub fn small_benchmark(seeds: Vec<u64>) -> BenchmarkConfig {
    BenchmarkConfig {
        name: "er-feature-shift-small".into(),
        protocol: Protocol::Ood {
            id: DataSource::Synth(SynthSpec {
                nodes_min: 5,
                nodes_max: 8,
                ..er(40, 0.0, 31)
            }),
            ood: DataSource::Synth(SynthSpec {
                nodes_min: 5,
                nodes_max: 8,
                ..er(8, 3.0, 32)
            }),
        },
        methods: vec![Method::Sigood, Method::RawEnergy, Method::NoEpo, Method::NoPg],
        seeds,
        pretrain: PretrainConfig {
            epochs: 40,
            hidden_dim: 16,
            ..Default::default()
        },
        detector: DetectorConfig {
            iterations: 50,
            ..Default::default()
        },
    }
}
