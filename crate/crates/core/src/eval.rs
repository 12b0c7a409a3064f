//! AUC, benchmark orchestration and report export.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    anomaly_split, mix_test_set, parse_tu_dataset, synth_dataset, train_test_split, SynthSpec, TRAIN_FRACTION,
};
use crate::detector::{detect, Ablation, DetectionResult, DetectorConfig};
use crate::error::{Error, Result};
use crate::gnn::{pretrain, PretrainConfig};
use crate::graph::{Dataset, DistLabel};

/// Rank-based (Mann–Whitney) AUC. Labels are 0 (negative) or 1 (positive);
/// tied scores share their average rank, i.e. each tied positive/negative
/// pair counts one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "auc",
            format!("{} scores, {} labels", scores.len(), labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Config(format!("auc labels must be 0 or 1, got {bad}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Config("auc scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are 1-based; a tied block over positions i..j gets (i + j + 1) / 2.
    // Twice the rank sum stays an integer, so the statistic is exact.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let positives = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += positives * (i + j + 1) as u128;
        i = j;
    }
    let n_pos = n_pos as u128;
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg as u128) as f64)
}

/// Where a benchmark gets its graphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    /// Generated; the benchmark seed is mixed into the spec's own seed.
    Synth(SynthSpec),
    /// TU directory `dir` holding `name_*.txt`.
    Tu { dir: PathBuf, name: String },
}

impl DataSource {
    pub fn load(&self, run_seed: u64) -> Result<Dataset> {
        match self {
            DataSource::Synth(spec) => {
                let spec = SynthSpec {
                    seed: spec.seed.wrapping_add(run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                    ..spec.clone()
                };
                synth_dataset(&spec)
            }
            DataSource::Tu { dir, name } => parse_tu_dataset(dir, name),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Protocol {
    /// Pretrain on part of `id`, test on the held-out ID graphs mixed 1:1
    /// with graphs from `ood`.
    Ood { id: DataSource, ood: DataSource },
    /// Minority class of `data` is anomalous.
    Anomaly { data: DataSource },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Sigood,
    /// Mean positive energy of the unprompted embeddings.
    RawEnergy,
    NoEpo,
    NoPg,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sigood => "sigood",
            Method::RawEnergy => "raw-energy",
            Method::NoEpo => "no-epo",
            Method::NoPg => "no-pg",
        }
    }

    fn ablation(self) -> Ablation {
        match self {
            Method::Sigood => Ablation::Full,
            Method::NoEpo => Ablation::NoEpo,
            Method::RawEnergy | Method::NoPg => Ablation::NoPg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Value of the `dataset` column.
    pub name: String,
    pub protocol: Protocol,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("benchmark needs at least one method".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("benchmark needs at least one seed".into()));
        }
        self.detector.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub dataset: String,
    pub method: Method,
    pub seed: u64,
    pub auc: f64,
    pub runtime_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub dataset: String,
    pub method: Method,
    pub n_seeds: usize,
    pub mean_auc: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std_auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkReport {
    pub rows: Vec<RunRow>,
    pub aggregate: Vec<AggregateRow>,
}

impl BenchmarkReport {
    pub fn mean_auc(&self, method: Method) -> Option<f64> {
        self.aggregate.iter().find(|a| a.method == method).map(|a| a.mean_auc)
    }

    /// `dataset,method,seed,auc`. Wall-clock time lives in
    /// [`BenchmarkReport::timings_csv`] so this file is reproducible byte for
    /// byte.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("dataset,method,seed,auc\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.dataset, r.method.as_str(), r.seed, r.auc);
        }
        out
    }

    /// `dataset,method,seed,runtime_s`.
    pub fn timings_csv(&self) -> String {
        let mut out = String::from("dataset,method,seed,runtime_s\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:.6}", r.dataset, r.method.as_str(), r.seed, r.runtime_s);
        }
        out
    }

    /// `dataset,method,n_seeds,mean_auc,std_auc,mean_auc_flipped`; the last
    /// column is the AUC the same scores would get with the opposite sign.
    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from("dataset,method,n_seeds,mean_auc,std_auc,mean_auc_flipped\n");
        for a in &self.aggregate {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                a.dataset,
                a.method.as_str(),
                a.n_seeds,
                a.mean_auc,
                a.std_auc,
                1.0 - a.mean_auc
            );
        }
        out
    }
}

fn labels_of(results: &[DetectionResult]) -> Result<Vec<u8>> {
    results
        .iter()
        .map(|r| {
            r.label
                .map(DistLabel::as_u8)
                .ok_or_else(|| Error::Config(format!("graph {} has no ID/OOD label", r.graph_id)))
        })
        .collect()
}

/// AUC of detection results against their own labels.
pub fn results_auc(results: &[DetectionResult]) -> Result<f64> {
    let scores: Vec<f64> = results.iter().map(|r| r.score).collect();
    auc(&scores, &labels_of(results)?)
}

/// Builds the (train, test) pair of one seed.
pub fn prepare_run(protocol: &Protocol, seed: u64) -> Result<(Dataset, Dataset)> {
    match protocol {
        Protocol::Ood { id, ood } => {
            let id = id.load(seed)?;
            let ood = ood.load(seed)?;
            let (train, id_test) = train_test_split(&id, TRAIN_FRACTION, seed)?;
            let test = mix_test_set(&id_test, &ood, seed)?;
            Ok((train, test))
        }
        Protocol::Anomaly { data } => anomaly_split(&data.load(seed)?, seed),
    }
}

/// Runs every method on every seed. Seeds are processed in order and each
/// seed offsets the pretraining and detector seeds, so the report is a pure
/// function of the config.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkReport> {
    config.validate()?;
    let mut rows = Vec::with_capacity(config.seeds.len() * config.methods.len());
    for &seed in &config.seeds {
        let (train, test) = prepare_run(&config.protocol, seed)?;
        let pretrain_cfg = PretrainConfig {
            seed: config.pretrain.seed.wrapping_add(seed),
            ..config.pretrain.clone()
        };
        let model = pretrain(&train, &pretrain_cfg)?;
        for &method in &config.methods {
            let det = DetectorConfig {
                ablation: method.ablation(),
                seed: config.detector.seed.wrapping_add(seed),
                ..config.detector.clone()
            };
            let start = Instant::now();
            let results = detect(&test, &model, &det)?;
            let runtime_s = start.elapsed().as_secs_f64();
            rows.push(RunRow {
                dataset: config.name.clone(),
                method,
                seed,
                auc: results_auc(&results)?,
                runtime_s,
            });
        }
    }
    let aggregate = aggregate(&rows, &config.methods);
    Ok(BenchmarkReport { rows, aggregate })
}

fn aggregate(rows: &[RunRow], methods: &[Method]) -> Vec<AggregateRow> {
    let mut seen = Vec::new();
    for &m in methods {
        if !seen.contains(&m) {
            seen.push(m);
        }
    }
    seen.into_iter()
        .map(|method| {
            let values: Vec<f64> = rows.iter().filter(|r| r.method == method).map(|r| r.auc).collect();
            let (mean_auc, std_auc) = mean_std(&values);
            AggregateRow {
                dataset: rows.first().map(|r| r.dataset.clone()).unwrap_or_default(),
                method,
                n_seeds: values.len(),
                mean_auc,
                std_auc,
            }
        })
        .collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Hyperparameter varied by a sensitivity sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "parameter", content = "values")]
pub enum Sweep {
    Beta(Vec<f64>),
    Iterations(Vec<usize>),
    PgDepth(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    /// Position in the sweep, starting at 0.
    pub index: usize,
    pub parameter: &'static str,
    pub value: f64,
    pub mean_auc: f64,
    pub std_auc: f64,
}

/// Runs the full method on `base` once per swept value.
pub fn run_sweep(base: &BenchmarkConfig, sweep: &Sweep) -> Result<Vec<SweepRow>> {
    let variants: Vec<(&'static str, f64, DetectorConfig)> = match sweep {
        Sweep::Beta(v) => v
            .iter()
            .map(|&b| {
                (
                    "beta",
                    b,
                    DetectorConfig {
                        beta: b,
                        ..base.detector.clone()
                    },
                )
            })
            .collect(),
        Sweep::Iterations(v) => v
            .iter()
            .map(|&k| {
                (
                    "iterations",
                    k as f64,
                    DetectorConfig {
                        iterations: k,
                        ..base.detector.clone()
                    },
                )
            })
            .collect(),
        Sweep::PgDepth(v) => v
            .iter()
            .map(|&d| {
                (
                    "pg_depth",
                    f64::from(d),
                    DetectorConfig {
                        pg_depth: d,
                        ..base.detector.clone()
                    },
                )
            })
            .collect(),
    };
    if variants.is_empty() {
        return Err(Error::Config("sweep has no values".into()));
    }
    variants
        .into_iter()
        .enumerate()
        .map(|(index, (parameter, value, detector))| {
            let cfg = BenchmarkConfig {
                methods: vec![Method::Sigood],
                detector,
                ..base.clone()
            };
            let report = run_benchmark(&cfg)?;
            let agg = &report.aggregate[0];
            Ok(SweepRow {
                index,
                parameter,
                value,
                mean_auc: agg.mean_auc,
                std_auc: agg.std_auc,
            })
        })
        .collect()
}

/// `index,parameter,value,mean_auc,std_auc`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("index,parameter,value,mean_auc,std_auc\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.index, r.parameter, r.value, r.mean_auc, r.std_auc
        );
    }
    out
}

/// `graph_id,score,label` for external histogram/KDE plotting. With
/// `normalize` the scores are min–max scaled to [0, 1]; a constant score
/// vector maps to 0.5. Unlabelled graphs get an empty label cell.
pub fn export_score_distribution(results: &[DetectionResult], normalize: bool) -> String {
    let lo = results.iter().map(|r| r.score).fold(f64::INFINITY, f64::min);
    let hi = results.iter().map(|r| r.score).fold(f64::NEG_INFINITY, f64::max);
    let scale = |s: f64| {
        if !normalize {
            s
        } else if hi > lo {
            (s - lo) / (hi - lo)
        } else {
            0.5
        }
    };
    let mut out = String::from("graph_id,score,label\n");
    for r in results {
        let label = r.label.map(|l| l.as_u8().to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", r.graph_id, scale(r.score), label);
    }
    out
}

/// Published full-scale AUCs (percent) of the method, for context only.
pub const REFERENCE_AUCS: &[(&str, &str, f64)] = &[
    ("ood", "BZR/COX2", 87.36),
    ("ood", "PTC-MR/MUTAG", 85.70),
    ("ood", "AIDS/DHFR", 97.38),
    ("ood", "ENZYMES/PROTEIN", 67.88),
    ("ood", "Tox21/SIDER", 69.97),
    ("ood", "FreeSolv/ToxCast", 68.89),
    ("ood", "ClinTox/LIPO", 71.33),
    ("ood", "Esol/MUV", 87.72),
    ("anomaly", "PROTEINS-full", 79.54),
    ("anomaly", "ENZYMES", 76.80),
    ("anomaly", "DHFR", 65.17),
    ("anomaly", "BZR", 75.42),
    ("anomaly", "COX2", 77.78),
    ("anomaly", "DD", 72.59),
    ("anomaly", "NCI1", 59.07),
    ("anomaly", "IMDB-B", 68.96),
    ("anomaly", "REDDIT-B", 86.64),
    ("anomaly", "HSE", 64.68),
    ("anomaly", "MMP", 70.17),
    ("anomaly", "p53", 60.51),
    ("anomaly", "PPAR-gamma", 72.59),
];

pub const REFERENCE_NOTE: &str = "published reference values, not reproduced at this scale";

/// `protocol,dataset,auc_percent,note`.
pub fn reference_table_csv() -> String {
    let mut out = String::from("protocol,dataset,auc_percent,note\n");
    for (protocol, dataset, value) in REFERENCE_AUCS {
        let _ = writeln!(out, "{protocol},{dataset},{value:.2},{REFERENCE_NOTE}");
    }
    out
}
