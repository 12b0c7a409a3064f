//! Self-checks: finite-difference gradient suites and the reward-derivation
//! witness on seeded random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffmat::{grad_check, Tape, Var};
use crate::energy::{partition_nodes, positive_energy_on_tape};
use crate::epo::{epo_losses, verify_reward_derivation, DerivationReport, EpoConfig};
use crate::error::{Error, Result};
use crate::gnn::{node_positive_energies, ScoringHead};
use crate::linalg::Matrix;
use crate::prompt::{generate_prompt_on_tape, PromptGenParams, PromptVars};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Smallest distance from a ReLU input (or from the EPO clamp bounds) that a
/// random instance must keep. Central differences straddling a kink measure
/// the mean of two one-sided slopes, not the derivative, so instances that
/// land that close to one are redrawn.
pub const KINK_MARGIN: f64 = 1e-2;

/// Computations covered by [`gradient_suite`].
pub const GRADIENT_CHECKS: [&str; 4] = ["prompt-generator", "layer-norm", "energy-chain", "epo-pipeline"];

#[derive(Clone, Debug, PartialEq)]
pub struct GradientRow {
    pub check: &'static str,
    pub instance: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).expect("sizes match")
}

fn random_prompt(rng: &mut ChaCha8Rng, h: usize, depth: u8) -> Result<PromptGenParams> {
    let mut p = PromptGenParams::init(h, depth, rng.random())?;
    for m in p.tensors_mut() {
        for v in m.as_mut_slice() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    Ok(p)
}

/// Smallest population standard deviation among the rows fed to layer
/// norm. Its third derivative grows like `1/σ³`, so nearly constant rows
/// make central differences too inaccurate to be an oracle at this step.
pub const MIN_ROW_STD: f64 = 0.2;

fn min_row_std(m: &Matrix) -> f64 {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Draws until `sample` accepts, giving up after a fixed number of tries.
fn redraw<T>(mut sample: impl FnMut() -> Result<Option<T>>) -> Result<T> {
    for _ in 0..10_000 {
        if let Some(v) = sample()? {
            return Ok(v);
        }
    }
    Err(Error::Config(
        "no well-conditioned gradient-check instance in 10000 draws".into(),
    ))
}

/// Whether the prompt generator at `x` keeps every ReLU input at least
/// [`KINK_MARGIN`] from zero and its layer-norm input well conditioned.
fn well_conditioned(pg: &PromptGenParams, x: &Matrix) -> Result<bool> {
    let mut t = Tape::new();
    let mut v = t.constant(x.clone());
    let layers = [(&pg.w1, &pg.b1), (&pg.w2, &pg.b2)];
    for (w, b) in layers.iter().take(pg.depth as usize - 1) {
        let (w, b) = (t.constant((*w).clone()), t.constant((*b).clone()));
        let z = t.linear(v, w, b)?;
        if t.value(z).as_slice().iter().any(|z| z.abs() <= KINK_MARGIN) {
            return Ok(false);
        }
        v = t.relu(z);
    }
    Ok(min_row_std(t.value(v)) >= MIN_ROW_STD)
}

fn weighted_sum(t: &mut Tape, x: Var, weights: &Matrix) -> Result<Var> {
    let w = t.mul_const(x, weights.clone())?;
    Ok(t.sum(w))
}

/// Runs each check of [`GRADIENT_CHECKS`] on `instances` random problems.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<GradientRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(4 * instances);
    for instance in 0..instances {
        let n = rng.random_range(3..7);
        let h = rng.random_range(2..6);
        let depth = rng.random_range(1..=3u8);

        let (pg, x) = redraw(|| {
            let pg = random_prompt(&mut rng, h, depth)?;
            let x = random_matrix(&mut rng, n, h, 1.5);
            Ok(well_conditioned(&pg, &x)?.then_some((pg, x)))
        })?;
        let out_w = random_matrix(&mut rng, n, h, 1.0);
        let leaves: Vec<Matrix> = pg.tensors().iter().map(|m| (*m).clone()).collect();
        let (pg2, x2) = (pg.clone(), x.clone());
        let f = move |t: &mut Tape, v: &[Var]| {
            let xv = t.constant(x2.clone());
            let p = generate_prompt_on_tape(t, xv, &pg2, &PromptVars::from_slice(v))?;
            weighted_sum(t, p, &out_w)
        };
        let r = grad_check(f, &leaves, FD_STEP, FD_TOLERANCE)?;
        rows.push(GradientRow {
            check: GRADIENT_CHECKS[0],
            instance,
            max_rel_error: r.max_rel_error,
            passed: r.passed,
        });

        let x_ln = redraw(|| {
            let x = random_matrix(&mut rng, n, h, 1.5);
            Ok((min_row_std(&x) >= MIN_ROW_STD).then_some(x))
        })?;
        let gamma = random_matrix(&mut rng, 1, h, 2.0);
        let lambda = random_matrix(&mut rng, 1, h, 1.0);
        let out_w = random_matrix(&mut rng, n, h, 1.0);
        let f = move |t: &mut Tape, v: &[Var]| {
            let y = t.layer_norm(v[0], v[1], v[2], crate::prompt::DEFAULT_EPSILON_LN)?;
            weighted_sum(t, y, &out_w)
        };
        let r = grad_check(f, &[x_ln, gamma, lambda], FD_STEP, FD_TOLERANCE)?;
        rows.push(GradientRow {
            check: GRADIENT_CHECKS[1],
            instance,
            max_rel_error: r.max_rel_error,
            passed: r.passed,
        });

        let logits = random_matrix(&mut rng, n, 2, 3.0);
        let reference: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..2.0)).collect();
        let inv = Matrix::column_vector(&reference.iter().map(|r| 1.0 / r).collect::<Vec<_>>());
        let out_w = random_matrix(&mut rng, n, 1, 1.0);
        let f = move |t: &mut Tape, v: &[Var]| {
            let e = positive_energy_on_tape(t, v[0]);
            let ratio = t.mul_const(e, inv.clone())?;
            let delta = t.log(ratio)?;
            weighted_sum(t, delta, &out_w)
        };
        let r = grad_check(f, &[logits], FD_STEP, FD_TOLERANCE)?;
        rows.push(GradientRow {
            check: GRADIENT_CHECKS[2],
            instance,
            max_rel_error: r.max_rel_error,
            passed: r.passed,
        });

        // Prompt → injection → head → positive energy → EPO loss, with the
        // partition frozen at the base point.
        let pg = redraw(|| {
            let mut pg = random_prompt(&mut rng, h, depth)?;
            // Shrink the output stage only; the hidden layers keep their
            // scale so the layer-norm input stays well conditioned.
            for m in pg.tensors_mut().into_iter().skip(4) {
                *m = m.scale(0.3);
            }
            Ok(well_conditioned(&pg, &x)?.then_some(pg))
        })?;
        let head_w = random_matrix(&mut rng, h, 2, 1.0);
        let head_b = random_matrix(&mut rng, 1, 2, 0.5);
        let epo = EpoConfig {
            beta: rng.random_range(1.0..80.0),
            ..EpoConfig::default()
        };
        let split = n / 2;
        let e_t = node_positive_energies(
            &x,
            &ScoringHead {
                w: head_w.clone(),
                b: head_b.clone(),
            },
        )?;
        let build = {
            let (pg, x, head_w, head_b) = (pg.clone(), x.clone(), head_w.clone(), head_b.clone());
            move |t: &mut Tape, v: &[Var]| -> Result<(Var, Var)> {
                let xv = t.constant(x.clone());
                let p = generate_prompt_on_tape(t, xv, &pg, &PromptVars::from_slice(v))?;
                let g_p = t.add(xv, p)?;
                let (hw, hb) = (t.constant(head_w.clone()), t.constant(head_b.clone()));
                let logits = t.linear(g_p, hw, hb)?;
                Ok((g_p, positive_energy_on_tape(t, logits)))
            }
        };
        let leaves: Vec<Matrix> = pg.tensors().iter().map(|m| (*m).clone()).collect();
        let base_partitions = {
            let mut t = Tape::new();
            let vars: Vec<Var> = leaves.iter().map(|m| t.param(m.clone())).collect();
            let (_, e_p) = build(&mut t, &vars)?;
            let ep = t.value(e_p).as_slice();
            // Two "graphs" so the batched loss is exercised.
            [(0, split), (split, n)]
                .iter()
                .map(|&(a, b)| {
                    let delta: Vec<f64> = (a..b).map(|i| ep[i].ln() - e_t[i].ln()).collect();
                    partition_nodes(&delta).map(|p| p.shifted(a))
                })
                .collect::<Result<Vec<_>>>()?
        };
        let f = move |t: &mut Tape, v: &[Var]| {
            let (_, e_p) = build(t, v)?;
            let losses = epo_losses(t, e_p, &e_t, &base_partitions, &epo)?;
            Ok(t.sum(losses))
        };
        let r = grad_check(f, &leaves, FD_STEP, FD_TOLERANCE)?;
        rows.push(GradientRow {
            check: GRADIENT_CHECKS[3],
            instance,
            max_rel_error: r.max_rel_error,
            passed: r.passed,
        });
    }
    Ok(rows)
}

/// Grid resolution per simplex coordinate for `k` outcomes.
pub fn derivation_resolution(k: usize) -> usize {
    if k == 2 {
        2000
    } else {
        300
    }
}

/// [`verify_reward_derivation`] on `instances` random `(p, r, β)` with
/// `k ∈ {2, 3}`, followed by the two-point case whose Gibbs solution is
/// `(0.75, 0.25)`.
pub fn derivation_suite(instances: usize, seed: u64) -> Result<Vec<DerivationReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(instances + 1);
    for i in 0..instances {
        let k = 2 + i % 2;
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let r: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let beta = rng.random_range(0.5..3.0);
        out.push(verify_reward_derivation(&p, &r, beta, derivation_resolution(k))?);
    }
    out.push(verify_reward_derivation(
        &[0.5, 0.5],
        &[3f64.ln(), 0.0],
        1.0,
        derivation_resolution(2),
    )?);
    Ok(out)
}
