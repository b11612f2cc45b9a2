//! Logistic-surrogate scalar kernels and per-cell linearizations.
//!
//! The auxiliary-variable expectations `ω̂ = tanh(φ/2)/(2φ)` render the
//! Bernoulli-logistic likelihood conditionally quadratic; the curvature
//! weights `σ(x)(1−σ(x))` form the diagonal of the data Fisher blocks.

use nalgebra::DVector;

use crate::model::{LabelMode, ModelState};
use crate::tensor::MiniBatch;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pólya-Gamma expectation `tanh(x/2)/(2x)`, with a series fallback
/// `1/4 − x²/48` below |x| = 1e−6 to avoid the 0/0 singularity.
pub fn omega_hat(phi: f64) -> f64 {
    if phi.abs() < 1e-6 {
        0.25 - phi * phi / 48.0
    } else {
        (phi / 2.0).tanh() / (2.0 * phi)
    }
}

/// Same kernel as [`omega_hat`], applied to head scores ψ.
pub fn nu_hat(psi: f64) -> f64 {
    omega_hat(psi)
}

/// Logistic curvature weight `1/(e^{−x/2} + e^{x/2})² = σ(x)(1−σ(x))`,
/// evaluated in the overflow-free product form.
pub fn curvature_weight(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// `κ = y − 1/2` for a binary cell label.
pub fn kappa(y: u8) -> f64 {
    y as f64 - 0.5
}

/// Model-expected κ for a cell with score φ: `σ(φ) − 1/2`.
pub fn expected_kappa(phi: f64) -> f64 {
    sigmoid(phi) - 0.5
}

/// Per-cell linearization: the rank-wise factor product `A`, the score
/// `φ = λ·A`, and one `C` vector per mode with `C^(k)·u^(k) = φ`.
#[derive(Debug, Clone)]
pub struct CellLinearization {
    pub a: DVector<f64>,
    pub phi: f64,
    pub c: Vec<DVector<f64>>,
}

/// Head-side linearization: factor prepended with 1 and score ψ = β·ũ.
#[derive(Debug, Clone)]
pub struct HeadLinearization {
    pub u_tilde: DVector<f64>,
    pub psi: f64,
}

/// Factor vector prepended with the bias 1.
pub fn u_tilde(u: &DVector<f64>) -> DVector<f64> {
    let mut v = DVector::zeros(u.len() + 1);
    v[0] = 1.0;
    v.rows_mut(1, u.len()).copy_from(u);
    v
}

pub fn linearize_head(state: &ModelState, mode: usize, task: usize, entity: usize) -> HeadLinearization {
    let ut = u_tilde(&state.factor_row(mode, entity));
    let psi = state.heads[&mode][task].dot(&ut);
    HeadLinearization { u_tilde: ut, psi }
}

pub fn linearize_cell(state: &ModelState, indices: &[usize]) -> CellLinearization {
    let rank = state.rank();
    let k_modes = indices.len();
    let mut a = DVector::from_element(rank, 1.0);
    for (k, &idx) in indices.iter().enumerate() {
        for r in 0..rank {
            a[r] *= state.factors[k][(idx, r)];
        }
    }
    let phi = state.lambda.dot(&a);
    let mut c = Vec::with_capacity(k_modes);
    for k in 0..k_modes {
        let mut ck = DVector::zeros(rank);
        for r in 0..rank {
            let mut prod = state.lambda[r];
            for (k2, &idx2) in indices.iter().enumerate() {
                if k2 != k {
                    prod *= state.factors[k2][(idx2, r)];
                }
            }
            ck[r] = prod;
        }
        c.push(ck);
    }
    CellLinearization { a, phi, c }
}

/// Frozen per-cell expectations for one mini-batch: ω̂, curvature weights
/// N and the κ values (observed or model-expected), aligned with
/// `batch.cells`.
#[derive(Debug, Clone)]
pub struct BatchAux {
    pub omega: Vec<f64>,
    pub curvature: Vec<f64>,
    pub kappa: Vec<f64>,
}

pub fn batch_aux(state: &ModelState, batch: &MiniBatch, label_mode: LabelMode) -> BatchAux {
    let mut omega = Vec::with_capacity(batch.cells.len());
    let mut curvature = Vec::with_capacity(batch.cells.len());
    let mut kap = Vec::with_capacity(batch.cells.len());
    for cell in &batch.cells {
        let lin = linearize_cell(state, &cell.indices);
        omega.push(omega_hat(lin.phi));
        curvature.push(curvature_weight(lin.phi));
        kap.push(match label_mode {
            LabelMode::Observed => kappa(cell.y),
            LabelMode::Expected => expected_kappa(lin.phi),
        });
    }
    BatchAux { omega, curvature, kappa: kap }
}

/// [`batch_aux`] computed with per-cell parallelism. Cells map to output
/// slots by index, so the result is identical to the sequential version.
pub fn batch_aux_parallel(state: &ModelState, batch: &MiniBatch, label_mode: LabelMode) -> BatchAux {
    use rayon::prelude::*;
    let per: Vec<(f64, f64, f64)> = batch
        .cells
        .par_iter()
        .map(|cell| {
            let lin = linearize_cell(state, &cell.indices);
            let kap = match label_mode {
                LabelMode::Observed => kappa(cell.y),
                LabelMode::Expected => expected_kappa(lin.phi),
            };
            (omega_hat(lin.phi), curvature_weight(lin.phi), kap)
        })
        .collect();
    BatchAux {
        omega: per.iter().map(|p| p.0).collect(),
        curvature: per.iter().map(|p| p.1).collect(),
        kappa: per.iter().map(|p| p.2).collect(),
    }
}

/// Frozen per-entity expectations for one supervised task, aligned with
/// `labels.task_entries(l)`.
#[derive(Debug, Clone)]
pub struct TaskAux {
    pub nu: Vec<f64>,
    pub curvature: Vec<f64>,
}

pub fn task_aux(
    state: &ModelState,
    mode: usize,
    task: usize,
    entries: &[(usize, f64)],
) -> TaskAux {
    let mut nu = Vec::with_capacity(entries.len());
    let mut curvature = Vec::with_capacity(entries.len());
    for &(entity, _) in entries {
        let lin = linearize_head(state, mode, task, entity);
        nu.push(nu_hat(lin.psi));
        curvature.push(curvature_weight(lin.psi));
    }
    TaskAux { nu, curvature }
}
