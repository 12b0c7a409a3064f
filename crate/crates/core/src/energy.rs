//! Node energies, their strictly positive transform, energy variation and
//! the OOD/ID node partition.
//!
//! The raw energy `Ê = −logsumexp(f)` of a 2-logit head is negative whenever
//! the logits are confident, so every ratio or logarithm downstream works on
//! `Ê⁺ = softplus(Ê) + EPS_POS`, which is positive, strictly increasing in `Ê`
//! and smooth.

use std::fmt::Write as _;

use crate::diffmat::{softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Offset keeping the positive energy away from zero.
pub const EPS_POS: f64 = 1e-6;

/// `−log Σ exp(f_k)` via the max-shift trick.
pub fn node_energy(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::INFINITY {
        return f64::NEG_INFINITY;
    }
    -(m + logits.iter().map(|f| (f - m).exp()).sum::<f64>().ln())
}

pub fn positive_energy(e_hat: f64) -> f64 {
    softplus(e_hat) + EPS_POS
}

/// `log(e_p / e_t)`; both energies must be strictly positive.
pub fn energy_variation(e_p: f64, e_t: f64) -> Result<f64> {
    if !(e_p > 0.0 && e_t > 0.0) {
        return Err(Error::Config(format!(
            "energy variation needs positive energies, got {e_p} and {e_t}"
        )));
    }
    Ok(e_p.ln() - e_t.ln())
}

/// Positive energy of every row of a logit matrix.
pub fn positive_energies(logits: &Matrix) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| positive_energy(node_energy(logits.row(i))))
        .collect()
}

/// Differentiable `Ê⁺` column (`n x 1`) for an `n x 2` logit variable.
pub fn positive_energy_on_tape(tape: &mut Tape, logits: Var) -> Var {
    let lse = tape.row_logsumexp(logits);
    let e_hat = tape.neg(lse);
    let sp = tape.softplus(e_hat);
    tape.add_scalar(sp, EPS_POS)
}

/// Split of a graph's nodes into the OOD side (energy went up) and the ID
/// side.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub ood: Vec<usize>,
    pub id: Vec<usize>,
    pub fallback_used: bool,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.ood.len() + self.id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same partition with every index shifted by `offset`.
    pub fn shifted(&self, offset: usize) -> Partition {
        Partition {
            ood: self.ood.iter().map(|i| i + offset).collect(),
            id: self.id.iter().map(|i| i + offset).collect(),
            fallback_used: self.fallback_used,
        }
    }
}

/// Nodes with `ΔE > 0` go to the OOD side, the rest (zeros included) to the
/// ID side. When one side would be empty the split falls back to the median:
/// strictly above it is OOD (or at-or-above it, if nothing is strictly
/// above). If every value is identical the first
/// `⌈n/2⌉` nodes are declared OOD.
pub fn partition_nodes(delta_e: &[f64]) -> Result<Partition> {
    if delta_e.is_empty() {
        return Err(Error::EmptyIndexSet("partition_nodes"));
    }
    let split = |pred: &dyn Fn(f64) -> bool| -> (Vec<usize>, Vec<usize>) {
        (0..delta_e.len()).partition(|&i| pred(delta_e[i]))
    };
    let (ood, id) = split(&|d| d > 0.0);
    if !ood.is_empty() && !id.is_empty() {
        return Ok(Partition {
            ood,
            id,
            fallback_used: false,
        });
    }
    let mut sorted = delta_e.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    // With many values tied at the median nothing may lie strictly above
    // it; the tied block then joins the OOD side.
    for (ood, id) in [split(&|d| d > median), split(&|d| d >= median)] {
        if !ood.is_empty() && !id.is_empty() {
            return Ok(Partition {
                ood,
                id,
                fallback_used: true,
            });
        }
    }
    // Only reachable when all values are equal (or n = 1, where the ID side
    // stays empty).
    let half = n.div_ceil(2);
    Ok(Partition {
        ood: (0..half).collect(),
        id: (half..n).collect(),
        fallback_used: true,
    })
}

/// Per-node energy diagnostics of one graph for one prompt step.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub raw_energy: Vec<f64>,
    pub pos_energy: Vec<f64>,
    pub delta_e: Vec<f64>,
    pub partition: Partition,
}

impl EnergyReport {
    /// Builds the report from prompt-enhanced logits and the reference
    /// positive energies.
    pub fn new(logits_p: &Matrix, pos_energy_t: &[f64]) -> Result<Self> {
        if logits_p.rows() != pos_energy_t.len() {
            return Err(Error::shape(
                "energy_report",
                format!(
                    "{} logit rows, {} reference energies",
                    logits_p.rows(),
                    pos_energy_t.len()
                ),
            ));
        }
        let raw_energy: Vec<f64> = (0..logits_p.rows()).map(|i| node_energy(logits_p.row(i))).collect();
        let pos_energy: Vec<f64> = raw_energy.iter().map(|&e| positive_energy(e)).collect();
        let delta_e = pos_energy
            .iter()
            .zip(pos_energy_t)
            .map(|(&p, &t)| energy_variation(p, t))
            .collect::<Result<Vec<_>>>()?;
        let partition = partition_nodes(&delta_e)?;
        Ok(EnergyReport {
            raw_energy,
            pos_energy,
            delta_e,
            partition,
        })
    }

    /// `node,raw,positive,delta,side` with one row per node.
    pub fn to_csv(&self) -> String {
        let mut side = vec!["id"; self.raw_energy.len()];
        for &i in &self.partition.ood {
            side[i] = "ood";
        }
        let mut out = String::from("node,raw,positive,delta,side\n");
        for i in 0..self.raw_energy.len() {
            let _ = writeln!(
                out,
                "{i},{},{},{},{}",
                self.raw_energy[i], self.pos_energy[i], self.delta_e[i], side[i]
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::diffmat::grad_check;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn energy_examples() {
        assert_abs_diff_eq!(node_energy(&[0.0, 0.0]), -LN2, epsilon = 1e-15);
        assert_abs_diff_eq!(node_energy(&[1.0, 1.0]), -1.0 - LN2, epsilon = 1e-15);
        assert_abs_diff_eq!(node_energy(&[-1000.0, -1000.0]), 1000.0 - LN2, epsilon = 1e-12);
    }

    #[test]
    fn positive_energy_examples() {
        assert_abs_diff_eq!(positive_energy(0.0), LN2 + 1e-6, epsilon = 1e-15);
        assert_abs_diff_eq!(positive_energy(50.0), 50.0 + 1e-6, epsilon = 1e-9);
    }

    #[test]
    fn variation_examples() {
        assert_eq!(energy_variation(0.3, 0.3).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(energy_variation(e * 0.7, 0.7).unwrap(), 1.0, epsilon = 1e-15);
        assert!(energy_variation(0.0, 1.0).is_err());
        assert!(energy_variation(1.0, -1.0).is_err());
    }

    #[test]
    fn partition_examples() {
        let p = partition_nodes(&[0.5, -0.2, 0.1]).unwrap();
        assert_eq!((p.ood, p.id, p.fallback_used), (vec![0, 2], vec![1], false));
        let p = partition_nodes(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!((p.ood, p.id, p.fallback_used), (vec![0, 1], vec![2], true));
        let p = partition_nodes(&[-1.0, -2.0, -3.0]).unwrap();
        assert_eq!((p.ood, p.id, p.fallback_used), (vec![0], vec![1, 2], true));
        assert!(partition_nodes(&[]).is_err());
    }

    #[test]
    fn partition_single_node_and_even_median() {
        let p = partition_nodes(&[0.3]).unwrap();
        assert_eq!((p.ood, p.id), (vec![0], vec![]));
        let p = partition_nodes(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(p.fallback_used);
        assert_eq!((p.ood, p.id), (vec![2, 3], vec![0, 1]));
        let p = partition_nodes(&[1.0, 2.0, 3.0, 4.0].map(|v: f64| -v)).unwrap();
        assert_eq!((p.ood, p.id), (vec![0, 1], vec![2, 3]));
        let p = partition_nodes(&[-1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!((p.ood, p.id), (vec![1, 2, 3], vec![0]));
    }

    #[test]
    fn energy_chain_gradient() {
        let logits = Matrix::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.5], vec![-0.7, -0.1]]).unwrap();
        let reference = [0.4, 0.9, 1.3];
        let f = move |t: &mut Tape, v: &[Var]| {
            let e = positive_energy_on_tape(t, v[0]);
            let inv = Matrix::column_vector(&reference.map(|r| 1.0 / r));
            let ratio = t.mul_const(e, inv)?;
            let delta = t.log(ratio)?;
            Ok(t.sum(delta))
        };
        let report = grad_check(f, &[logits], 1e-4, 1e-6).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn report_csv_lists_every_node() {
        let logits = Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 1.0]]).unwrap();
        let r = EnergyReport::new(&logits, &[0.5, 0.5]).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().ends_with(",ood"));
    }

    proptest! {
        #[test]
        fn shift_identity(a in -50.0f64..50.0, b in -50.0f64..50.0, c in -100.0f64..100.0) {
            let lhs = node_energy(&[a + c, b + c]);
            prop_assert!((lhs - (node_energy(&[a, b]) - c)).abs() < 1e-10);
        }

        #[test]
        fn positive_energy_is_monotone(a in -40.0f64..40.0, gap in 1e-3f64..10.0) {
            prop_assert!(positive_energy(a) < positive_energy(a + gap));
            prop_assert!(positive_energy(a) > 0.0);
        }

        #[test]
        fn variation_antisymmetric(a in 1e-6f64..1e3, b in 1e-6f64..1e3) {
            let ab = energy_variation(a, b).unwrap();
            let ba = energy_variation(b, a).unwrap();
            prop_assert_eq!(ab, -ba);
            prop_assert_eq!(ab == 0.0, a == b);
        }

        #[test]
        fn partition_is_total_and_disjoint(v in proptest::collection::vec(-2.0f64..2.0, 1..40)) {
            let p = partition_nodes(&v).unwrap();
            let mut all: Vec<usize> = p.ood.iter().chain(&p.id).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..v.len()).collect::<Vec<_>>());
            if v.len() > 1 {
                prop_assert!(!p.ood.is_empty() && !p.id.is_empty());
            }
        }
    }
}
