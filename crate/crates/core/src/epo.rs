//! Energy preference optimization: rewards, the Bradley–Terry preference
//! probability and the graph-level EPO loss
//!
//! ```text
//! L = −log σ( β·log mean_ood(e_p/e_t) − β·log mean_id(e_p/e_t) )
//! ```
//!
//! with the σ argument clamped to `±clamp_arg` and the reference energies
//! `e_t` treated as constants.

use serde::{Deserialize, Serialize};

use crate::diffmat::{sigmoid, softplus, Tape, Var};
use crate::energy::Partition;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpoConfig {
    pub beta: f64,
    pub clamp_arg: f64,
}

impl Default for EpoConfig {
    fn default() -> Self {
        EpoConfig {
            beta: 80.0,
            clamp_arg: 50.0,
        }
    }
}

impl EpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.clamp_arg > 0.0) {
            return Err(Error::Config(format!(
                "beta and clamp_arg must be positive, got {} and {}",
                self.beta, self.clamp_arg
            )));
        }
        Ok(())
    }
}

/// `β · log(e_p / e_t)`.
pub fn reward(e_p: f64, e_t: f64, beta: f64) -> Result<f64> {
    Ok(beta * crate::energy::energy_variation(e_p, e_t)?)
}

/// Probability that the OOD side is preferred: `σ(r_ood − r_id)`.
pub fn bt_probability(r_ood: f64, r_id: f64) -> f64 {
    sigmoid(r_ood - r_id)
}

/// EPO loss of one graph on the tape. `pos_energy_p` is an `n x 1` column;
/// gradients flow only through it.
pub fn epo_loss(
    tape: &mut Tape,
    pos_energy_p: Var,
    pos_energy_t: &[f64],
    partition: &Partition,
    config: &EpoConfig,
) -> Result<Var> {
    let losses = epo_losses(
        tape,
        pos_energy_p,
        pos_energy_t,
        std::slice::from_ref(partition),
        config,
    )?;
    Ok(tape.sum(losses))
}

/// Per-graph EPO losses (`G x 1`) for a stacked batch. Each partition holds
/// global row indices into `pos_energy_p`. A graph whose ID side is empty
/// (a single-node graph) contributes ratio 1 on that side.
pub fn epo_losses(
    tape: &mut Tape,
    pos_energy_p: Var,
    pos_energy_t: &[f64],
    partitions: &[Partition],
    config: &EpoConfig,
) -> Result<Var> {
    config.validate()?;
    let n = tape.value(pos_energy_p).rows();
    if pos_energy_t.len() != n || tape.value(pos_energy_p).cols() != 1 {
        return Err(Error::shape(
            "epo_loss",
            format!(
                "energies {:?} vs {} reference values",
                tape.value(pos_energy_p).shape(),
                pos_energy_t.len()
            ),
        ));
    }
    if let Some(&bad) = pos_energy_t.iter().find(|&&e| !(e > 0.0)) {
        return Err(Error::Config(format!("reference energy {bad} is not positive")));
    }
    let inv_t = Matrix::column_vector(&pos_energy_t.iter().map(|e| 1.0 / e).collect::<Vec<_>>());
    let ratio = tape.mul_const(pos_energy_p, inv_t)?;

    // Rows of `groups` are the non-empty sides; `signs` maps them to graphs.
    let mut groups = Vec::with_capacity(2 * partitions.len());
    let mut signs = Matrix::zeros(partitions.len(), 2 * partitions.len());
    for (g, p) in partitions.iter().enumerate() {
        if p.ood.is_empty() {
            return Err(Error::EmptyIndexSet("epo_loss (OOD side)"));
        }
        signs[(g, groups.len())] = config.beta;
        groups.push(p.ood.clone());
        if !p.id.is_empty() {
            signs[(g, groups.len())] = -config.beta;
            groups.push(p.id.clone());
        }
    }
    let used = groups.len();
    let signs = Matrix::from_vec(
        partitions.len(),
        used,
        (0..partitions.len())
            .flat_map(|g| signs.row(g)[..used].to_vec())
            .collect(),
    )?;
    let means = tape.group_mean(ratio, groups)?;
    let log_means = tape.log(means)?;
    let signs = tape.constant(signs);
    let arg = tape.matmul(signs, log_means)?;
    let arg = tape.clamp(arg, -config.clamp_arg, config.clamp_arg);
    let neg = tape.neg(arg);
    // −log σ(a) = softplus(−a)
    Ok(tape.softplus(neg))
}

/// Plain-value EPO loss of one graph.
pub fn epo_loss_value(
    pos_energy_p: &[f64],
    pos_energy_t: &[f64],
    partition: &Partition,
    config: &EpoConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let ep = tape.constant(Matrix::column_vector(pos_energy_p));
    let loss = epo_loss(&mut tape, ep, pos_energy_t, partition, config)?;
    Ok(tape.value(loss).item())
}

/// Outcome of [`verify_reward_derivation`].
#[derive(Clone, Debug, PartialEq)]
pub struct DerivationReport {
    /// Grid maximizer of `J(q) = Σ q r − β Σ q log(q/p)`.
    pub q_grid: Vec<f64>,
    /// `p ⊙ exp(r/β) / Z`.
    pub q_closed: Vec<f64>,
    pub distance: f64,
    pub grid_step: f64,
    /// `max_i |r_i − β log(q_i/p_i) − β log Z|` evaluated at the grid
    /// maximizer.
    pub reward_residual: f64,
    /// The same residual at the closed form; zero up to rounding.
    pub closed_form_residual: f64,
}

impl DerivationReport {
    /// Grid and closed form agree to within two grid steps.
    pub fn passed(&self) -> bool {
        self.distance < 2.0 * self.grid_step
    }
}

fn kl_objective(q: &[f64], p: &[f64], r: &[f64], beta: f64) -> f64 {
    q.iter()
        .zip(p)
        .zip(r)
        .map(|((&qi, &pi), &ri)| {
            let kl = if qi > 0.0 { qi * (qi / pi).ln() } else { 0.0 };
            qi * ri - beta * kl
        })
        .sum()
}

/// Numerically checks that maximizing expected reward under a KL penalty to
/// `p` yields the Gibbs distribution `q ∝ p·exp(r/β)`, and hence that
/// `r = β log(q/p) + β log Z`. The simplex is searched on a grid with
/// `resolution` steps per coordinate.
pub fn verify_reward_derivation(p: &[f64], r: &[f64], beta: f64, resolution: usize) -> Result<DerivationReport> {
    let k = p.len();
    if !(2..=4).contains(&k) || r.len() != k {
        return Err(Error::Config(format!(
            "need 2 <= k <= 4 probabilities with matching rewards, got {k} and {}",
            r.len()
        )));
    }
    if p.iter().any(|&v| !(v > 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("p = {p:?} is not on the open simplex")));
    }
    if !(beta > 0.0) || resolution == 0 {
        return Err(Error::Config("beta and resolution must be positive".into()));
    }
    let step = 1.0 / resolution as f64;
    let mut best = (f64::NEG_INFINITY, vec![0.0; k]);
    let mut counts = vec![0usize; k - 1];
    loop {
        let used: usize = counts.iter().sum();
        if used <= resolution {
            let mut q: Vec<f64> = counts.iter().map(|&c| c as f64 * step).collect();
            q.push((resolution - used) as f64 * step);
            let j = kl_objective(&q, p, r, beta);
            if j > best.0 {
                best = (j, q);
            }
        }
        // Odometer over the first k−1 coordinates.
        let mut pos = 0;
        loop {
            if pos == k - 1 {
                return Ok(finish(p, r, beta, step, best.1));
            }
            counts[pos] += 1;
            if counts[..=pos].iter().sum::<usize>() <= resolution {
                break;
            }
            counts[pos] = 0;
            pos += 1;
        }
    }
}

fn finish(p: &[f64], r: &[f64], beta: f64, step: f64, q_grid: Vec<f64>) -> DerivationReport {
    let m = r.iter().map(|ri| ri / beta).fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = p.iter().zip(r).map(|(pi, ri)| pi * (ri / beta - m).exp()).collect();
    let z_shifted: f64 = unnorm.iter().sum();
    let q_closed: Vec<f64> = unnorm.iter().map(|u| u / z_shifted).collect();
    let log_z = z_shifted.ln() + m;
    let residual = |q: &[f64]| {
        q.iter()
            .zip(p)
            .zip(r)
            .map(|((&qi, &pi), &ri)| {
                if qi > 0.0 {
                    (ri - beta * (qi / pi).ln() - beta * log_z).abs()
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    };
    let distance = q_grid
        .iter()
        .zip(&q_closed)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    DerivationReport {
        reward_residual: residual(&q_grid),
        closed_form_residual: residual(&q_closed),
        q_grid,
        q_closed,
        distance,
        grid_step: step,
    }
}

/// `−log σ(x)` for callers that already hold the σ argument.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    softplus(-x)
}
