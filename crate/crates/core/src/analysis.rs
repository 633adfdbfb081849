//! Certifies that FiLM is a bilinear layer whose per-output matrices have
//! rank at most two.
//!
//! For output feature `i`, FiLM computes `(I_f w_fᵢ)(I_c w̄_cᵢ) + I_c w_cᵢ`.
//! The first term is `I_f (w_fᵢ w̄_cᵢᵀ) I_cᵀ`. The bias term is linear in
//! `I_c` only, but for a fixed `I_f` with a nonzero entry `I_f[k]` it
//! equals `I_f W'ᵢ I_cᵀ` where `W'ᵢ` is zero except row `k`, which holds
//! `w_cᵢᵀ / I_f[k]`. The sum of two rank-one matrices has rank ≤ 2.

use serde::{Deserialize, Serialize};

use crate::conditioning::{film_condition, FilmParams};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOL: f64 = 1e-10;

/// Largest accepted |bilinear − FiLM| on unit-scale inputs.
pub const EQUIVALENCE_TOL: f64 = 1e-9;

/// Feature vectors whose largest entry is smaller than this are redrawn.
pub const MIN_PIVOT: f64 = 1e-6;

/// Condition vectors drawn per feature vector.
pub const CONDITION_SAMPLES: usize = 10;

const MAX_SWEEPS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub max_deviation: f64,
    /// Largest numerical rank seen for each output feature.
    pub ranks: Vec<usize>,
    pub pass: bool,
    pub trials: usize,
    pub tolerance: f64,
}

impl EquivalenceReport {
    fn new(outputs: usize, trials: usize) -> Self {
        Self {
            max_deviation: 0.0,
            ranks: vec![0; outputs],
            pass: true,
            trials,
            tolerance: EQUIVALENCE_TOL,
        }
    }

    fn refresh(&mut self) {
        self.pass = self.max_deviation <= self.tolerance && self.ranks.iter().all(|&r| r <= 2);
    }

    /// Combines two reports over the same output width.
    pub fn merge(&mut self, other: &EquivalenceReport) {
        self.max_deviation = self.max_deviation.max(other.max_deviation);
        if self.ranks.len() < other.ranks.len() {
            self.ranks.resize(other.ranks.len(), 0);
        }
        for (a, &b) in self.ranks.iter_mut().zip(&other.ranks) {
            *a = (*a).max(b);
        }
        self.trials += other.trials;
        self.refresh();
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }
}

/// Index of the largest-magnitude entry, lowest index on ties.
fn pivot(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if v.abs() > values[best].abs() {
            best = i;
        }
    }
    best
}

/// The matrix `W_i[D, D']` with `I_f W_i I_cᵀ` equal to FiLM output `i`
/// for this `I_f` and every `I_c`.
pub fn film_to_bilinear_matrix(p: &FilmParams, i: usize, i_f: &Tensor) -> Result<Tensor> {
    let dims = p.dims();
    if i >= dims.output {
        return Err(Error::Parameter(format!(
            "output index {i} out of range for O = {}",
            dims.output
        )));
    }
    if i_f.shape() != [dims.feature] {
        return Err(crate::error::dim_err(
            "film_to_bilinear_matrix",
            i_f.shape(),
            &[dims.feature],
        ));
    }
    let k = pivot(i_f.data());
    let pivot_value = i_f.data()[k];
    if pivot_value == 0.0 {
        return Err(Error::Degenerate(
            "feature vector is all zeros; no pivot to divide by".into(),
        ));
    }
    let (w_f, gain, w_c) = p.output_columns(i);
    let mut w = Tensor::outer(&w_f, &gain);
    for (j, &b) in w_c.iter().enumerate() {
        let cur = w.at(&[k, j]);
        w.set(&[k, j], cur + b / pivot_value);
    }
    Ok(w)
}

/// Singular values in descending order, by one-sided Jacobi rotations
/// applied to the columns of the taller orientation of `m`.
pub fn singular_values(m: &Tensor) -> Result<Vec<f64>> {
    let (r, c) = m.dims2()?;
    let (rows, cols, mut a) = if r >= c {
        (r, c, m.transpose()?.into_data())
    } else {
        (c, r, m.data().to_vec())
    };
    // `a` holds the columns of the tall matrix as contiguous rows.
    let col = |a: &[f64], j: usize| a[j * rows..(j + 1) * rows].to_vec();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (ap, aq) = (col(&a, p), col(&a, q));
                let alpha: f64 = ap.iter().map(|x| x * x).sum();
                let beta: f64 = aq.iter().map(|x| x * x).sum();
                let gamma: f64 = ap.iter().zip(&aq).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for k in 0..rows {
                    a[p * rows + k] = cs * ap[k] - sn * aq[k];
                    a[q * rows + k] = sn * ap[k] + cs * aq[k];
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..cols)
        .map(|j| col(&a, j).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(sv)
}

/// Number of singular values above `tol · σ_max`.
pub fn numerical_rank(m: &Tensor, tol: f64) -> Result<usize> {
    if !(tol > 0.0) {
        return Err(Error::Parameter(format!("rank tolerance must be positive, got {tol}")));
    }
    if m.is_empty() {
        return Err(Error::Parameter("empty matrix".into()));
    }
    let sv = singular_values(m)?;
    let top = sv[0];
    if top == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > tol * top).count())
}

fn bilinear_form(i_f: &Tensor, w: &Tensor, i_c: &Tensor) -> Result<f64> {
    let row = i_f.reshape(&[1, i_f.len()])?.matmul(w)?;
    Ok(row.data().iter().zip(i_c.data()).map(|(a, b)| a * b).sum())
}

/// Draws `trials` feature vectors, builds every `W_i`, and compares the
/// bilinear form against FiLM over a fresh set of condition vectors.
pub fn verify_film_equivalence(p: &FilmParams, trials: usize, rng: &mut Rng) -> Result<EquivalenceReport> {
    if trials == 0 {
        return Err(Error::Parameter("trials must be at least 1".into()));
    }
    let dims = p.dims();
    let mut report = EquivalenceReport::new(dims.output, trials);
    for _ in 0..trials {
        let i_f = loop {
            let t = Tensor::uniform_init(rng, &[dims.feature], -1.0, 1.0)?;
            if t.max_abs() >= MIN_PIVOT {
                break t;
            }
        };
        let matrices = (0..dims.output)
            .map(|i| film_to_bilinear_matrix(p, i, &i_f))
            .collect::<Result<Vec<_>>>()?;
        for (i, w) in matrices.iter().enumerate() {
            let r = numerical_rank(w, RANK_TOL)?;
            report.ranks[i] = report.ranks[i].max(r);
        }
        for _ in 0..CONDITION_SAMPLES {
            let i_c = Tensor::uniform_init(rng, &[dims.condition], -1.0, 1.0)?;
            let film = film_condition(p, &i_f, &i_c)?;
            for (i, w) in matrices.iter().enumerate() {
                let dev = (bilinear_form(&i_f, w, &i_c)? - film.data()[i]).abs();
                if !dev.is_finite() {
                    return Err(Error::NonFinite("bilinear/FiLM deviation".into()));
                }
                report.max_deviation = report.max_deviation.max(dev);
            }
        }
    }
    report.refresh();
    Ok(report)
}
