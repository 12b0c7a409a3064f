//! GIN encoder, classifier and 2-logit scoring head, plus pretraining and
//! checkpoints.
//!
//! Each GIN layer computes `h' = ReLU(ReLU(((1+ε)·h + Σ_{j∈N(i)} h_j)·W1 + b1)·W2 + b2)`.
//! The encoder can optionally L2-normalize its final node embeddings.

use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffmat::{Tape, Var};
use crate::energy::{positive_energies, positive_energy_on_tape};
use crate::error::{Error, Result};
use crate::graph::{Dataset, Graph};
use crate::linalg::Matrix;

/// Regularizer inside the optional row normalization.
/// Stabilizer of the row L2 normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GinLayer {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<GinLayer>,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub normalize: bool,
}

impl EncoderParams {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringHead {
    /// `hidden_dim x 2`
    pub w: Matrix,
    /// `1 x 2`
    pub b: Matrix,
}

/// Pretrained encoder, graph classifier and scoring head. Detection only
/// ever borrows it immutably.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenModel {
    pub encoder: EncoderParams,
    /// `hidden_dim x n_classes`
    pub classifier: Matrix,
    pub scoring_head: ScoringHead,
    pub config: PretrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadTraining {
    /// Trained by the energy-margin term.
    Trained,
    /// Left at its seeded initialization.
    FrozenRandom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub seed: u64,
    /// Positive-energy level below which ID nodes are not penalized.
    pub energy_margin: f64,
    pub margin_weight: f64,
    pub epsilon_gin: f64,
    pub readout: Readout,
    pub head: HeadTraining,
    /// L2-normalize the final node embeddings. Keeps the scoring head's
    /// logits bounded, so energies stay informative far from the training
    /// data; the detector then also re-normalizes prompt-enhanced rows.
    pub normalize_embeddings: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 300,
            lr: 0.1,
            hidden_dim: 32,
            n_layers: 2,
            seed: 0,
            energy_margin: 0.05,
            margin_weight: 1.0,
            epsilon_gin: 0.0,
            readout: Readout::Mean,
            head: HeadTraining::Trained,
            normalize_embeddings: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.n_layers == 0 {
            return Err(Error::Config("hidden_dim and n_layers must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("pretrain lr must be >= 0, got {}", self.lr)));
        }
        if !(self.margin_weight >= 0.0) {
            return Err(Error::Config("margin_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Node embeddings of one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedGraph {
    pub embeddings: Matrix,
    /// Position of the source graph in its dataset, when known.
    pub origin: Option<usize>,
}

impl EmbeddedGraph {
    pub fn node_count(&self) -> usize {
        self.embeddings.rows()
    }
}

/// Several graphs stacked into one block-diagonal graph.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub features: Matrix,
    pub neighbors: Rc<Vec<Vec<usize>>>,
    /// Graph `g` owns rows `offsets[g]..offsets[g + 1]`.
    pub offsets: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: &[&Graph]) -> Result<Self> {
        let Some(first) = graphs.first() else {
            return Err(Error::EmptyDataset);
        };
        let d = first.feature_dim();
        let mut offsets = vec![0];
        let mut neighbors = Vec::new();
        let mut blocks = Vec::with_capacity(graphs.len());
        for g in graphs {
            if g.feature_dim() != d {
                return Err(Error::FeatureDim {
                    left: d,
                    right: g.feature_dim(),
                });
            }
            if g.node_count() == 0 {
                return Err(Error::EmptyGraph);
            }
            let base = *offsets.last().unwrap();
            neighbors.extend(g.neighbors().iter().map(|n| n.iter().map(|j| j + base).collect()));
            offsets.push(base + g.node_count());
            blocks.push(g.features());
        }
        let mut data = Vec::with_capacity(offsets.last().unwrap() * d);
        for b in blocks {
            data.extend_from_slice(b.as_slice());
        }
        Ok(GraphBatch {
            features: Matrix::from_vec(*offsets.last().unwrap(), d, data)?,
            neighbors: Rc::new(neighbors),
            offsets,
        })
    }

    pub fn graph_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn node_count(&self) -> usize {
        self.features.rows()
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let lim = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-lim..lim)).collect();
    Matrix::from_vec(rows, cols, data).expect("sizes agree")
}

/// Seeded initial model: Xavier-uniform weights, zero biases.
pub fn init_model(input_dim: usize, n_classes: usize, config: &PretrainConfig) -> Result<FrozenModel> {
    config.validate()?;
    if input_dim == 0 {
        return Err(Error::Config("input dimension must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let h = config.hidden_dim;
    let layers = (0..config.n_layers)
        .map(|l| {
            let din = if l == 0 { input_dim } else { h };
            GinLayer {
                w1: xavier(&mut rng, din, h),
                b1: Matrix::zeros(1, h),
                w2: xavier(&mut rng, h, h),
                b2: Matrix::zeros(1, h),
                epsilon: config.epsilon_gin,
            }
        })
        .collect();
    let scoring_head = ScoringHead {
        w: xavier(&mut rng, h, 2),
        b: Matrix::zeros(1, 2),
    };
    let classifier = xavier(&mut rng, h, n_classes.max(1));
    Ok(FrozenModel {
        encoder: EncoderParams {
            layers,
            input_dim,
            hidden_dim: h,
            normalize: config.normalize_embeddings,
        },
        classifier,
        scoring_head,
        config: config.clone(),
    })
}

struct LayerVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

struct ModelVars {
    layers: Vec<LayerVars>,
    classifier: Var,
    head_w: Var,
    head_b: Var,
}

fn leaf(tape: &mut Tape, m: &Matrix, trainable: bool) -> Var {
    if trainable {
        tape.param(m.clone())
    } else {
        tape.constant(m.clone())
    }
}

fn register(tape: &mut Tape, model: &FrozenModel, trainable: bool, head_trainable: bool) -> ModelVars {
    let layers = model
        .encoder
        .layers
        .iter()
        .map(|l| LayerVars {
            w1: leaf(tape, &l.w1, trainable),
            b1: leaf(tape, &l.b1, trainable),
            w2: leaf(tape, &l.w2, trainable),
            b2: leaf(tape, &l.b2, trainable),
        })
        .collect();
    ModelVars {
        layers,
        classifier: leaf(tape, &model.classifier, trainable),
        head_w: leaf(tape, &model.scoring_head.w, head_trainable),
        head_b: leaf(tape, &model.scoring_head.b, head_trainable),
    }
}

fn encode_on_tape(
    tape: &mut Tape,
    encoder: &EncoderParams,
    vars: &ModelVars,
    x: Var,
    neighbors: &Rc<Vec<Vec<usize>>>,
) -> Result<Var> {
    let mut h = x;
    for (layer, lv) in encoder.layers.iter().zip(&vars.layers) {
        let agg = tape.neighbor_sum(h, neighbors.clone(), 1.0 + layer.epsilon)?;
        let z = tape.linear(agg, lv.w1, lv.b1)?;
        let z = tape.relu(z);
        let z = tape.linear(z, lv.w2, lv.b2)?;
        h = tape.relu(z);
    }
    if encoder.normalize {
        h = tape.row_normalize(h, NORM_EPS)?;
    }
    Ok(h)
}

fn check_input_dim(encoder: &EncoderParams, d: usize) -> Result<()> {
    if d != encoder.input_dim {
        return Err(Error::FeatureDim {
            left: encoder.input_dim,
            right: d,
        });
    }
    Ok(())
}

/// Node embeddings of every graph in the batch, stacked in batch order.
pub fn encode_batch(batch: &GraphBatch, model: &FrozenModel) -> Result<Matrix> {
    check_input_dim(&model.encoder, batch.features.cols())?;
    let mut tape = Tape::new();
    let vars = register(&mut tape, model, false, false);
    let x = tape.constant(batch.features.clone());
    let h = encode_on_tape(&mut tape, &model.encoder, &vars, x, &batch.neighbors)?;
    Ok(tape.value(h).clone())
}

/// Runs the encoder on one graph.
pub fn encode(graph: &Graph, model: &FrozenModel) -> Result<EmbeddedGraph> {
    let batch = GraphBatch::new(&[graph])?;
    Ok(EmbeddedGraph {
        embeddings: encode_batch(&batch, model)?,
        origin: None,
    })
}

/// Encodes every graph of a dataset in one pass.
pub fn encode_dataset(dataset: &Dataset, model: &FrozenModel) -> Result<Vec<EmbeddedGraph>> {
    let graphs: Vec<&Graph> = dataset.graphs.iter().map(|g| &g.graph).collect();
    let batch = GraphBatch::new(&graphs)?;
    let all = encode_batch(&batch, model)?;
    (0..batch.graph_count())
        .map(|g| {
            let rows: Vec<usize> = (batch.offsets[g]..batch.offsets[g + 1]).collect();
            Ok(EmbeddedGraph {
                embeddings: all.select_rows(&rows),
                origin: Some(g),
            })
        })
        .collect()
}

/// Mean of the node rows.
pub fn readout(graph: &EmbeddedGraph) -> Result<Matrix> {
    if graph.node_count() == 0 {
        return Err(Error::EmptyGraph);
    }
    let means = graph.embeddings.column_means();
    Ok(means)
}

/// `v · W_s + b_s` for each row of `v`.
pub fn score_logits(v: &Matrix, head: &ScoringHead) -> Result<Matrix> {
    if v.cols() != head.w.rows() {
        return Err(Error::shape(
            "score_logits",
            format!("embedding width {} for head {:?}", v.cols(), head.w.shape()),
        ));
    }
    let mut out = v.matmul(&head.w)?;
    for i in 0..out.rows() {
        for (o, b) in out.row_mut(i).iter_mut().zip(head.b.as_slice()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Positive energy of every node row.
pub fn node_positive_energies(embeddings: &Matrix, head: &ScoringHead) -> Result<Vec<f64>> {
    Ok(positive_energies(&score_logits(embeddings, head)?))
}

/// Training curve entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub cross_entropy: f64,
    pub margin_penalty: f64,
    pub mean_pos_energy: f64,
}

/// Trains a model on `train` and returns it with its per-epoch statistics;
/// entry `k` describes the parameters before update `k`, and one final entry
/// describes the returned model.
pub fn pretrain_with_history(train: &Dataset, config: &PretrainConfig) -> Result<(FrozenModel, Vec<EpochStats>)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_classes = train.graphs.iter().map(|g| g.class_label).max().unwrap() + 1;
    let mut model = init_model(train.feature_dim, n_classes, config)?;
    let graphs: Vec<&Graph> = train.graphs.iter().map(|g| &g.graph).collect();
    let batch = GraphBatch::new(&graphs)?;
    check_input_dim(&model.encoder, batch.features.cols())?;
    let labels: Vec<usize> = train.graphs.iter().map(|g| g.class_label).collect();
    let use_ce = n_classes >= 2;
    let head_trainable = config.head == HeadTraining::Trained;

    let mut history = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..=config.epochs {
        let mut tape = Tape::new();
        let vars = register(&mut tape, &model, true, head_trainable);
        let x = tape.constant(batch.features.clone());
        let h = encode_on_tape(&mut tape, &model.encoder, &vars, x, &batch.neighbors)?;

        let mut terms = Vec::new();
        let mut ce_value = 0.0;
        if use_ce {
            let pooled = match config.readout {
                Readout::Mean => tape.segment_mean(h, &batch.offsets)?,
                Readout::Sum => {
                    let m = tape.segment_mean(h, &batch.offsets)?;
                    let sizes: Vec<f64> = batch.offsets.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
                    let scale = Matrix::from_vec(
                        sizes.len(),
                        config.hidden_dim,
                        sizes.iter().flat_map(|&s| vec![s; config.hidden_dim]).collect(),
                    )?;
                    tape.mul_const(m, scale)?
                }
            };
            let logits = tape.matmul(pooled, vars.classifier)?;
            let lse = tape.row_logsumexp(logits);
            let picked = tape.select_entries(logits, &labels)?;
            let nll = tape.sub(lse, picked)?;
            let ce = tape.mean(nll)?;
            ce_value = tape.value(ce).item();
            terms.push(ce);
        }
        let logits = tape.linear(h, vars.head_w, vars.head_b)?;
        let pos = positive_energy_on_tape(&mut tape, logits);
        let mean_pos = tape.value(pos).as_slice().iter().sum::<f64>() / batch.node_count() as f64;
        let excess = tape.add_scalar(pos, -config.energy_margin);
        let hinge = tape.relu(excess);
        let hinge = tape.mean(hinge)?;
        let margin_value = tape.value(hinge).item();
        history.push(EpochStats {
            cross_entropy: ce_value,
            margin_penalty: margin_value,
            mean_pos_energy: mean_pos,
        });
        if epoch == config.epochs {
            break;
        }
        if config.margin_weight > 0.0 {
            terms.push(tape.scale(hinge, config.margin_weight));
        }
        let Some(&first) = terms.first() else {
            // Nothing to optimize: single class and no margin term.
            continue;
        };
        let mut loss = first;
        for &t in &terms[1..] {
            loss = tape.add(loss, t)?;
        }
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NanLoss {
                iteration: epoch,
                detail: format!("pretraining loss {loss_value}"),
            });
        }
        tape.backward(loss)?;
        let lr = config.lr;
        for (layer, lv) in model.encoder.layers.iter_mut().zip(&vars.layers) {
            layer.w1.axpy_neg(lr, tape.grad(lv.w1))?;
            layer.b1.axpy_neg(lr, tape.grad(lv.b1))?;
            layer.w2.axpy_neg(lr, tape.grad(lv.w2))?;
            layer.b2.axpy_neg(lr, tape.grad(lv.b2))?;
        }
        model.classifier.axpy_neg(lr, tape.grad(vars.classifier))?;
        if head_trainable {
            model.scoring_head.w.axpy_neg(lr, tape.grad(vars.head_w))?;
            model.scoring_head.b.axpy_neg(lr, tape.grad(vars.head_b))?;
        }
    }
    Ok((model, history))
}

/// Trains the encoder, classifier and scoring head by full-batch gradient
/// descent on cross-entropy plus `w · mean(max(0, Ê⁺ − m_id))`. With a
/// single class only the energy-margin term is active.
pub fn pretrain(train: &Dataset, config: &PretrainConfig) -> Result<FrozenModel> {
    pretrain_with_history(train, config).map(|(m, _)| m)
}

impl FrozenModel {
    fn matrices(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for l in &self.encoder.layers {
            out.extend([&l.w1, &l.b1, &l.w2, &l.b2]);
        }
        out.extend([&self.classifier, &self.scoring_head.w, &self.scoring_head.b]);
        out
    }

    /// SHA-256 over the exact bit patterns of every parameter, in hex.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for m in self.matrices() {
            hasher.update((m.rows() as u64).to_le_bytes());
            hasher.update((m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        for l in &self.encoder.layers {
            hasher.update(l.epsilon.to_bits().to_le_bytes());
        }
        hasher.update([self.encoder.normalize as u8]);
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.cols()
    }
}

pub const CHECKPOINT_FORMAT: &str = "sigood-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    checksum: String,
    model: FrozenModel,
}

/// Writes the model as JSON: format tag, version, parameter checksum and
/// every matrix with its shape, plus the pretraining configuration.
pub fn save_checkpoint(model: &FrozenModel, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        checksum: model.checksum(),
        model: model.clone(),
    };
    let text = serde_json::to_string_pretty(&ck).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<FrozenModel> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(format!("reading {}", path.display()), e)
        }
    })?;
    let ck: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            ck.format, ck.version
        )));
    }
    if ck.model.checksum() != ck.checksum {
        return Err(Error::Checkpoint(format!("{}: checksum mismatch", path.display())));
    }
    Ok(ck.model)
}
