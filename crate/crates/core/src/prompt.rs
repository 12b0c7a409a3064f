//! Prompt generator and prompt injection on node embeddings.
//!
//! For a node embedding `v` (a row) the generator computes
//!
//! ```text
//! v* = ReLU(ReLU(v·W1 + b1)·W2 + b2)
//! P  = LN_{γ,λ}(v*)·W3 + b3
//! ```
//!
//! where `LN` standardizes each row with its own mean and variance and then
//! applies the learnable scale `γ` and shift `λ`. Depth 2 drops the `W2`
//! layer, depth 1 also drops `W1` and normalizes `v` directly.

pub use crate::gnn::EmbeddedGraph;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmat::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const DEFAULT_EPSILON_LN: f64 = 1e-5;

/// Half-width of the uniform initialization of `W1` and `W2`.
pub const INIT_RANGE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptGenParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub w3: Matrix,
    pub b3: Matrix,
    pub gamma: Matrix,
    pub lambda: Matrix,
    pub epsilon_ln: f64,
    pub depth: u8,
}

impl PromptGenParams {
    /// `W1`, `W2` uniform in `±INIT_RANGE`; `W3 = b3 = 0` so the first prompt
    /// is exactly zero; `γ = 1`, `λ = 0`, other biases 0.
    pub fn init(hidden_dim: usize, depth: u8, seed: u64) -> Result<Self> {
        if !(1..=3).contains(&depth) {
            return Err(Error::Config(format!("prompt depth must be 1, 2 or 3, got {depth}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = || {
            let data = (0..hidden_dim * hidden_dim)
                .map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE))
                .collect();
            Matrix::from_vec(hidden_dim, hidden_dim, data).expect("square")
        };
        let w1 = uniform();
        let w2 = uniform();
        Ok(PromptGenParams {
            w1,
            b1: Matrix::zeros(1, hidden_dim),
            w2,
            b2: Matrix::zeros(1, hidden_dim),
            w3: Matrix::zeros(hidden_dim, hidden_dim),
            b3: Matrix::zeros(1, hidden_dim),
            gamma: Matrix::filled(1, hidden_dim, 1.0),
            lambda: Matrix::zeros(1, hidden_dim),
            epsilon_ln: DEFAULT_EPSILON_LN,
            depth,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.w3.rows()
    }

    pub(crate) fn tensors(&self) -> [&Matrix; 8] {
        [
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.w3,
            &self.b3,
            &self.gamma,
            &self.lambda,
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Matrix; 8] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.gamma,
            &mut self.lambda,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_dim();
        let square = [&self.w1, &self.w2, &self.w3];
        let rows = [&self.b1, &self.b2, &self.b3, &self.gamma, &self.lambda];
        if square.iter().any(|m| m.shape() != (h, h)) || rows.iter().any(|m| m.shape() != (1, h)) {
            return Err(Error::shape(
                "prompt_params",
                format!("inconsistent widths for h = {h}"),
            ));
        }
        if !(self.epsilon_ln > 0.0) {
            return Err(Error::Config(format!(
                "epsilon_ln must be > 0, got {}",
                self.epsilon_ln
            )));
        }
        if !(1..=3).contains(&self.depth) {
            return Err(Error::Config(format!(
                "prompt depth must be 1, 2 or 3, got {}",
                self.depth
            )));
        }
        Ok(())
    }

    /// Registers every tensor as a trainable leaf.
    pub fn on_tape(&self, tape: &mut Tape) -> PromptVars {
        let [w1, b1, w2, b2, w3, b3, gamma, lambda] = self.tensors().map(|m| tape.param(m.clone()));
        PromptVars {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            gamma,
            lambda,
        }
    }

    /// One plain gradient-descent step using the gradients left on `tape`.
    pub fn descend(&mut self, tape: &Tape, vars: &PromptVars, lr: f64) -> Result<()> {
        let grads = vars.all().map(|v| tape.grad(v));
        for (m, g) in self.tensors_mut().into_iter().zip(grads) {
            m.axpy_neg(lr, g)?;
        }
        Ok(())
    }

    /// Largest absolute entry over all tensors.
    pub fn max_abs(&self) -> f64 {
        self.tensors().iter().map(|m| m.max_abs()).fold(0.0, f64::max)
    }
}

/// Tape handles of a [`PromptGenParams`].
#[derive(Clone, Copy, Debug)]
pub struct PromptVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
    pub gamma: Var,
    pub lambda: Var,
}

impl PromptVars {
    /// Handles in the order of [`PromptVars::all`].
    pub(crate) fn from_slice(v: &[Var]) -> Self {
        PromptVars {
            w1: v[0],
            b1: v[1],
            w2: v[2],
            b2: v[3],
            w3: v[4],
            b3: v[5],
            gamma: v[6],
            lambda: v[7],
        }
    }

    fn all(&self) -> [Var; 8] {
        [
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.w3,
            self.b3,
            self.gamma,
            self.lambda,
        ]
    }
}

/// Differentiable prompt for the embedding rows in `x`.
pub fn generate_prompt_on_tape(tape: &mut Tape, x: Var, params: &PromptGenParams, vars: &PromptVars) -> Result<Var> {
    let h = params.hidden_dim();
    if tape.value(x).cols() != h {
        return Err(Error::shape(
            "generate_prompt",
            format!("embedding width {} for prompt width {h}", tape.value(x).cols()),
        ));
    }
    let mut v = x;
    if params.depth >= 2 {
        let z = tape.linear(v, vars.w1, vars.b1)?;
        v = tape.relu(z);
    }
    if params.depth == 3 {
        let z = tape.linear(v, vars.w2, vars.b2)?;
        v = tape.relu(z);
    }
    let normed = tape.layer_norm(v, vars.gamma, vars.lambda, params.epsilon_ln)?;
    tape.linear(normed, vars.w3, vars.b3)
}

/// Prompt matrix `P_m` (`n x h`) for an embedded graph.
pub fn generate_prompt(graph: &EmbeddedGraph, params: &PromptGenParams) -> Result<Matrix> {
    prompt_for(&graph.embeddings, params)
}

/// Prompt for an arbitrary stack of embedding rows.
pub fn prompt_for(embeddings: &Matrix, params: &PromptGenParams) -> Result<Matrix> {
    params.validate()?;
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape);
    let x = tape.constant(embeddings.clone());
    let p = generate_prompt_on_tape(&mut tape, x, params, &vars)?;
    Ok(tape.value(p).clone())
}

/// `G_p = G_t + P_m`, row by row.
pub fn inject_prompt(graph: &EmbeddedGraph, prompt: &Matrix) -> Result<EmbeddedGraph> {
    if graph.embeddings.shape() != prompt.shape() {
        return Err(Error::shape(
            "inject_prompt",
            format!("{:?} + {:?}", graph.embeddings.shape(), prompt.shape()),
        ));
    }
    Ok(EmbeddedGraph {
        embeddings: graph.embeddings.add(prompt)?,
        origin: graph.origin,
    })
}
