//! The self-improving detection loop.
//!
//! Every iteration generates a prompt from the current embeddings `G_t`,
//! injects it to obtain `G_p`, splits the nodes of each graph by the sign of
//! their energy variation, takes one gradient step on the prompt generator
//! against the EPO loss, and finally replaces `G_t` with `G_p` recomputed
//! under the updated generator. A graph's score is derived from its loss in
//! the last iteration.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::diffmat::Tape;
use crate::energy::{partition_nodes, positive_energy_on_tape, Partition};
use crate::epo::{epo_losses, EpoConfig};
use crate::error::{Error, Result};
use crate::gnn::{encode_dataset, node_positive_energies, FrozenModel, ScoringHead, NORM_EPS};
use crate::graph::{Dataset, DistLabel};
use crate::linalg::Matrix;
use crate::prompt::{generate_prompt_on_tape, prompt_for, PromptGenParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// One prompt generator shared by the whole test set.
    Transductive,
    /// An independent prompt generator per test graph.
    PerGraph,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    /// Optimize and score the mean positive energy of `G_p` instead of the
    /// EPO loss.
    NoEpo,
    /// No optimization; score is the mean positive energy of `G_t`.
    NoPg,
}

/// How the final EPO loss becomes a score (larger = more OOD).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSign {
    /// `D = −L`: graphs with stronger energy contrast score higher.
    NegLoss,
    /// `D = +L`: graphs whose energies resist the prompt score higher.
    ///
    /// The log-ratio response of a node to a prompt is scaled by
    /// `σ(Ê)/softplus(Ê)`, which decreases with the energy, so confident
    /// low-energy (ID-like) nodes are the easiest to contrast and their
    /// graphs reach the lowest losses. This is the default.
    Loss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub beta: f64,
    pub clamp_arg: f64,
    pub iterations: usize,
    /// Step size on the *summed* transductive loss. Its gradient grows with
    /// the number of test graphs and with `beta`; large steps let the
    /// accumulated prompt drag every embedding to one point, after which all
    /// losses tie at `log 2`. Scale it down roughly as `1 / n_graphs`.
    pub lr: f64,
    pub mode: Mode,
    pub pg_depth: u8,
    pub epsilon_ln: f64,
    pub tau: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub score_sign: ScoreSign,
    /// Re-evaluate the loss right after every step (costs one extra forward
    /// pass per iteration).
    pub check_descent: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            beta: 80.0,
            clamp_arg: 50.0,
            iterations: 500,
            lr: 3e-8,
            mode: Mode::Transductive,
            pg_depth: 3,
            epsilon_ln: crate::prompt::DEFAULT_EPSILON_LN,
            tau: 0.0,
            seed: 0,
            ablation: Ablation::Full,
            score_sign: ScoreSign::Loss,
            check_descent: false,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(1..=3).contains(&self.pg_depth) {
            return Err(Error::Config(format!(
                "pg_depth must be 1, 2 or 3, got {}",
                self.pg_depth
            )));
        }
        if !(self.epsilon_ln > 0.0) {
            return Err(Error::Config("epsilon_ln must be > 0".into()));
        }
        self.epo().validate()
    }

    pub fn epo(&self) -> EpoConfig {
        EpoConfig {
            beta: self.beta,
            clamp_arg: self.clamp_arg,
        }
    }
}

/// One iteration of one graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub n_ood: usize,
    pub n_id: usize,
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    pub graph_id: usize,
    pub score: f64,
    pub decision: DistLabel,
    pub label: Option<DistLabel>,
    pub trace: Vec<IterationRecord>,
}

/// Mutable state of the loop over a stack of graphs.
#[derive(Clone, Debug)]
pub struct DetectorState {
    /// Current embeddings `G_t`, all graphs stacked.
    pub g_t: Matrix,
    /// Graph `g` owns rows `offsets[g]..offsets[g + 1]` of `g_t`.
    pub offsets: Vec<usize>,
    pub pg: PromptGenParams,
    pub iteration: usize,
}

impl DetectorState {
    pub fn new(g_t: Matrix, offsets: Vec<usize>, config: &DetectorConfig) -> Result<Self> {
        if offsets.first() != Some(&0) || offsets.last() != Some(&g_t.rows()) || offsets.len() < 2 {
            return Err(Error::shape("detector_state", "offsets do not cover the embeddings"));
        }
        if offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::EmptyGraph);
        }
        let mut pg = PromptGenParams::init(g_t.cols(), config.pg_depth, config.seed)?;
        pg.epsilon_ln = config.epsilon_ln;
        Ok(DetectorState {
            g_t,
            offsets,
            pg,
            iteration: 0,
        })
    }

    pub fn graph_count(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// Result of one [`sigood_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// One entry per graph.
    pub graphs: Vec<IterationRecord>,
    /// Sum of the per-graph objectives before the update.
    pub total_loss: f64,
    /// The same objective after the update, on the same reference and
    /// partition (only with `check_descent`).
    pub post_step_loss: Option<f64>,
}

struct Forward {
    tape: Tape,
    vars: crate::prompt::PromptVars,
    per_graph: crate::diffmat::Var,
    total: crate::diffmat::Var,
}

/// Builds the objective for `pg` on reference `g_t`. With `partitions` set
/// (Full ablation) they are reused; otherwise they are derived from the
/// energy variation and returned.
fn forward(
    g_t: &Matrix,
    offsets: &[usize],
    pg: &PromptGenParams,
    head: &ScoringHead,
    e_t: &[f64],
    config: &DetectorConfig,
    partitions: Option<&[Partition]>,
    renormalize: bool,
) -> Result<(Forward, Vec<Partition>)> {
    let mut tape = Tape::new();
    let vars = pg.on_tape(&mut tape);
    let x = tape.constant(g_t.clone());
    let prompt = generate_prompt_on_tape(&mut tape, x, pg, &vars)?;
    let mut g_p = tape.add(x, prompt)?;
    if renormalize {
        g_p = tape.row_normalize(g_p, NORM_EPS)?;
    }
    let hw = tape.constant(head.w.clone());
    let hb = tape.constant(head.b.clone());
    let logits = tape.linear(g_p, hw, hb)?;
    let e_p = positive_energy_on_tape(&mut tape, logits);

    let (per_graph, parts) = match config.ablation {
        Ablation::NoEpo | Ablation::NoPg => (tape.segment_mean(e_p, offsets)?, Vec::new()),
        Ablation::Full => {
            let parts = match partitions {
                Some(p) => p.to_vec(),
                None => {
                    let ep = tape.value(e_p).as_slice();
                    let mut parts = Vec::with_capacity(offsets.len() - 1);
                    for w in offsets.windows(2) {
                        let delta: Vec<f64> = (w[0]..w[1]).map(|i| ep[i].ln() - e_t[i].ln()).collect();
                        parts.push(partition_nodes(&delta)?.shifted(w[0]));
                    }
                    parts
                }
            };
            (epo_losses(&mut tape, e_p, e_t, &parts, &config.epo())?, parts)
        }
    };
    let total = tape.sum(per_graph);
    Ok((
        Forward {
            tape,
            vars,
            per_graph,
            total,
        },
        parts,
    ))
}

/// One iteration of the loop: prompt, inject, partition, loss, one
/// gradient step on the generator, then `G_t ← G_t + P(G_t)` under the
/// updated generator.
pub fn sigood_step(state: &mut DetectorState, model: &FrozenModel, config: &DetectorConfig) -> Result<StepRecord> {
    let head = &model.scoring_head;
    let renormalize = model.encoder.normalize;
    // With a normalizing encoder the reference is the projection of G_t,
    // computed exactly as G_p is, so a zero prompt gives ΔE = 0 bit for bit.
    let e_t = if renormalize {
        node_positive_energies(&state.g_t.normalize_rows(NORM_EPS), head)?
    } else {
        node_positive_energies(&state.g_t, head)?
    };
    if let Some(i) = e_t.iter().position(|e| !e.is_finite()) {
        return Err(Error::NanLoss {
            iteration: state.iteration + 1,
            detail: format!("node {i} has reference energy {}", e_t[i]),
        });
    }
    let (mut fwd, parts) = forward(
        &state.g_t,
        &state.offsets,
        &state.pg,
        head,
        &e_t,
        config,
        None,
        renormalize,
    )?;
    state.iteration += 1;
    let losses = fwd.tape.value(fwd.per_graph).as_slice().to_vec();
    let total_loss = fwd.tape.value(fwd.total).item();
    if !total_loss.is_finite() {
        let bad = losses.iter().position(|l| !l.is_finite()).unwrap_or(0);
        return Err(Error::NanLoss {
            iteration: state.iteration,
            detail: format!("graph {bad} has loss {}", losses[bad]),
        });
    }
    let graphs = losses
        .iter()
        .enumerate()
        .map(|(g, &loss)| {
            let n = state.offsets[g + 1] - state.offsets[g];
            let (n_ood, n_id, fallback) = match parts.get(g) {
                Some(p) => (p.ood.len(), p.id.len(), p.fallback_used),
                None => (0, n, false),
            };
            IterationRecord {
                iteration: state.iteration,
                loss,
                n_ood,
                n_id,
                fallback,
            }
        })
        .collect();

    fwd.tape.backward(fwd.total)?;
    state.pg.descend(&fwd.tape, &fwd.vars, config.lr)?;

    let post_step_loss = if config.check_descent {
        let reuse = (config.ablation == Ablation::Full).then_some(parts.as_slice());
        let (after, _) = forward(
            &state.g_t,
            &state.offsets,
            &state.pg,
            head,
            &e_t,
            config,
            reuse,
            renormalize,
        )?;
        Some(after.tape.value(after.total).item())
    } else {
        None
    };

    let prompt = prompt_for(&state.g_t, &state.pg)?;
    state.g_t.add_assign(&prompt)?;
    if renormalize {
        state.g_t = state.g_t.normalize_rows(NORM_EPS);
    }
    if state.g_t.has_non_finite() {
        return Err(Error::NanLoss {
            iteration: state.iteration,
            detail: "embeddings became non-finite".into(),
        });
    }
    Ok(StepRecord {
        graphs,
        total_loss,
        post_step_loss,
    })
}

/// Runs the loop to completion; returns per-graph traces and the per-step
/// records.
pub fn run_loop(
    state: &mut DetectorState,
    model: &FrozenModel,
    config: &DetectorConfig,
) -> Result<(Vec<Vec<IterationRecord>>, Vec<StepRecord>)> {
    config.validate()?;
    let mut traces = vec![Vec::with_capacity(config.iterations); state.graph_count()];
    let mut steps = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let step = sigood_step(state, model, config)?;
        for (t, r) in traces.iter_mut().zip(&step.graphs) {
            t.push(*r);
        }
        steps.push(step);
    }
    Ok((traces, steps))
}

fn score_from_trace(trace: &[IterationRecord], config: &DetectorConfig) -> f64 {
    let last = trace.last().expect("at least one iteration").loss;
    match (config.ablation, config.score_sign) {
        (Ablation::Full, ScoreSign::NegLoss) => -last,
        _ => last,
    }
}

/// Scores every graph of `test`. Larger scores mean more OOD-like.
pub fn detect(test: &Dataset, model: &FrozenModel, config: &DetectorConfig) -> Result<Vec<DetectionResult>> {
    config.validate()?;
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if test.feature_dim != model.encoder.input_dim {
        return Err(Error::FeatureDim {
            left: model.encoder.input_dim,
            right: test.feature_dim,
        });
    }
    let embedded = encode_dataset(test, model)?;
    let labels: Vec<Option<DistLabel>> = test.graphs.iter().map(|g| g.dist_label).collect();
    let finish = |g: usize, score: f64, trace: Vec<IterationRecord>| DetectionResult {
        graph_id: g,
        score,
        decision: threshold_decide(score, config.tau),
        label: labels[g],
        trace,
    };

    if config.ablation == Ablation::NoPg {
        return embedded
            .iter()
            .enumerate()
            .map(|(g, eg)| {
                let e = node_positive_energies(&eg.embeddings, &model.scoring_head)?;
                Ok(finish(g, e.iter().sum::<f64>() / e.len() as f64, Vec::new()))
            })
            .collect();
    }

    match config.mode {
        Mode::Transductive => {
            let blocks: Vec<&Matrix> = embedded.iter().map(|e| &e.embeddings).collect();
            let mut offsets = vec![0];
            for b in &blocks {
                offsets.push(offsets.last().unwrap() + b.rows());
            }
            let mut state = DetectorState::new(Matrix::vstack(&blocks)?, offsets, config)?;
            let (traces, _) = run_loop(&mut state, model, config)?;
            Ok(traces
                .into_iter()
                .enumerate()
                .map(|(g, t)| finish(g, score_from_trace(&t, config), t))
                .collect())
        }
        Mode::PerGraph => embedded
            .into_iter()
            .enumerate()
            .map(|(g, eg)| {
                let n = eg.node_count();
                let mut state = DetectorState::new(eg.embeddings, vec![0, n], config)?;
                let (mut traces, _) = run_loop(&mut state, model, config)?;
                let t = traces.pop().unwrap();
                Ok(finish(g, score_from_trace(&t, config), t))
            })
            .collect(),
    }
}

/// OOD iff `score ≥ tau`.
pub fn threshold_decide(score: f64, tau: f64) -> DistLabel {
    if score >= tau {
        DistLabel::Ood
    } else {
        DistLabel::Id
    }
}

/// Empirical `(1 − target_fpr)` quantile of held-out ID scores, linearly
/// interpolated between order statistics.
pub fn calibrate_tau(id_scores: &[f64], target_fpr: f64) -> Result<f64> {
    if id_scores.is_empty() {
        return Err(Error::EmptyIndexSet("calibrate_tau"));
    }
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::Config(format!(
            "target_fpr must lie in (0, 1), got {target_fpr}"
        )));
    }
    let mut s = id_scores.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = (1.0 - target_fpr) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    let frac = pos - lo as f64;
    if s[lo] == s[hi] {
        return Ok(s[lo]);
    }
    Ok(s[lo] + frac * (s[hi] - s[lo]))
}

/// `graph_id,score,decision,label`; the label column appears when every
/// result carries a label.
pub fn scores_csv(results: &[DetectionResult]) -> String {
    let labelled = results.iter().all(|r| r.label.is_some());
    let mut out = String::from(if labelled {
        "graph_id,score,decision,label\n"
    } else {
        "graph_id,score,decision\n"
    });
    for r in results {
        let _ = write!(out, "{},{},{}", r.graph_id, r.score, r.decision.as_u8());
        if let (true, Some(l)) = (labelled, r.label) {
            let _ = write!(out, ",{}", l.as_u8());
        }
        out.push('\n');
    }
    out
}

/// `graph_id,iteration,loss,n_ood,n_id,fallback`.
pub fn trace_csv(results: &[DetectionResult]) -> String {
    let mut out = String::from("graph_id,iteration,loss,n_ood,n_id,fallback\n");
    for r in results {
        for t in &r.trace {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.graph_id, t.iteration, t.loss, t.n_ood, t.n_id, t.fallback as u8
            );
        }
    }
    out
}
