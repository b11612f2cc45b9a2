//! Log-posterior surrogate objectives for the three parameter blocks.
//!
//! Each objective treats the frozen expectations (ω̂, ν̂) passed in as
//! constants, which makes it exactly quadratic in its own argument; the
//! inference gradients are derivatives of these functions.

use nalgebra::DVector;

use crate::augment::{linearize_cell, BatchAux, TaskAux};
use crate::model::{LabelSet, ModelState};
use crate::tensor::MiniBatch;

/// Objective value with its per-term breakdown.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ObjectiveValue {
    pub likelihood: f64,
    pub prior: f64,
    pub supervision: f64,
    pub multi_target: f64,
}

impl ObjectiveValue {
    pub fn total(&self) -> f64 {
        self.likelihood + self.prior + self.supervision + self.multi_target
    }
}

/// Sign with the `sign(0) = 0` convention.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Surrogate log-posterior of λ over one mini-batch:
/// `Σ_i κ_iφ_i − ω̂_iφ_i²/2 − ½ (λ⊘√τ)ᵀ(λ⊘√τ)`.
pub fn log_post_lambda(state: &ModelState, batch: &MiniBatch, aux: &BatchAux) -> ObjectiveValue {
    let mut likelihood = 0.0;
    for (i, cell) in batch.cells.iter().enumerate() {
        let lin = linearize_cell(state, &cell.indices);
        likelihood += aux.kappa[i] * lin.phi - aux.omega[i] * lin.phi * lin.phi / 2.0;
    }
    let mut prior = 0.0;
    for r in 0..state.rank() {
        prior -= state.lambda[r] * state.lambda[r] / state.tau[r] / 2.0;
    }
    ObjectiveValue { likelihood, prior, ..Default::default() }
}

/// Surrogate log-posterior of one head β_l: data term over the labeled
/// set, Gaussian prior, and the cross-task sign penalty.
pub fn log_post_beta(
    state: &ModelState,
    mode: usize,
    task: usize,
    labels: &LabelSet,
    aux: &TaskAux,
) -> ObjectiveValue {
    let beta = &state.heads[&mode][task];
    let rho2 = &state.head_vars[&mode][task];
    let q = &state.q[&mode];

    let mut supervision = 0.0;
    for (m, &(entity, z)) in labels.task_entries(task).iter().enumerate() {
        let lin = crate::augment::linearize_head(state, mode, task, entity);
        supervision += z * lin.psi / 2.0 - aux.nu[m] * lin.psi * lin.psi / 2.0;
    }
    let mut prior = 0.0;
    for r in 0..beta.len() {
        prior -= beta[r] * beta[r] / rho2[r] / 2.0;
    }
    let mut multi_target = 0.0;
    for j in 0..labels.tasks() {
        if j == task {
            continue;
        }
        let other = &state.heads[&mode][j];
        let dot: f64 = beta.iter().zip(other.iter()).map(|(&b, &o)| b * sign(o)).sum();
        multi_target -= q[(task, j)] * dot;
    }
    ObjectiveValue { supervision, prior, multi_target, ..Default::default() }
}

/// Surrogate log-posterior of one factor row: cell likelihood restricted
/// to batch cells hitting the entity, Gaussian prior, and (when labeled)
/// the per-task logistic supervision terms.
pub fn log_post_factor(
    state: &ModelState,
    mode: usize,
    entity: usize,
    batch: &MiniBatch,
    aux: &BatchAux,
    labels: Option<&LabelSet>,
    task_auxes: Option<&[TaskAux]>,
) -> ObjectiveValue {
    let mut likelihood = 0.0;
    for (i, cell) in batch.cells.iter().enumerate() {
        if cell.indices[mode] != entity {
            continue;
        }
        let lin = linearize_cell(state, &cell.indices);
        likelihood += aux.kappa[i] * lin.phi - aux.omega[i] * lin.phi * lin.phi / 2.0;
    }
    let u = state.factor_row(mode, entity);
    let mut prior = 0.0;
    for r in 0..u.len() {
        prior -= u[r] * u[r] / state.factor_vars[mode][(entity, r)] / 2.0;
    }
    let mut supervision = 0.0;
    if let (Some(set), Some(auxes)) = (labels, task_auxes) {
        if set.mode == mode {
            for &(l, z) in set.entity_labels(entity) {
                let m = set.position(l, entity).expect("entity labeled for task");
                let beta = &state.heads[&mode][l];
                let beta0 = beta[0];
                let beta_hat: DVector<f64> = beta.rows(1, u.len()).into_owned();
                let proj = u.dot(&beta_hat);
                let psi = beta0 + proj;
                supervision += z * proj / 2.0 - auxes[l].nu[m] * psi * psi / 2.0;
            }
        }
    }
    ObjectiveValue { likelihood, prior, supervision, ..Default::default() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{batch_aux, nu_hat, omega_hat, task_aux, BatchAux};
    use crate::model::{init_state, Hyperparams, LabelMode, LabelSet};
    use crate::tensor::{Cell, MiniBatch};
    use crate::tensor::{ingest_tuples, ModeDecl};
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state_k2(rank: usize) -> (crate::tensor::ObservedTensor, ModelState) {
        let data = "a,b\nx,u\ny,v\nz,w\n";
        let decls = vec![ModeDecl::entity("a"), ModeDecl::entity("b")];
        let (t, _) = ingest_tuples(data.as_bytes(), &decls, 0).unwrap();
        let hyper = Hyperparams { rank, ..Default::default() };
        let s = init_state(&t.scheme, &[], &hyper, &mut ChaCha8Rng::seed_from_u64(1), None).unwrap();
        (t, s)
    }

    #[test]
    fn lambda_objective_zero_at_origin() {
        let (_, mut state) = state_k2(2);
        state.lambda.fill(0.0);
        let batch = MiniBatch {
            cells: vec![Cell { indices: vec![0, 0], y: 1 }, Cell { indices: vec![1, 1], y: 0 }],
            t: 0,
        };
        let aux = batch_aux(&state, &batch, LabelMode::Observed);
        let v = log_post_lambda(&state, &batch, &aux);
        assert_eq!(v.likelihood, 0.0);
        assert_eq!(v.prior, 0.0);
        assert_eq!(v.total(), 0.0);
    }

    #[test]
    fn lambda_objective_hand_value() {
        // single cell, y=1, A=(1), λ=(1), τ=(1): 0.5 − ω̂(1)/2 − 0.5
        let (_, mut state) = state_k2(1);
        state.lambda[0] = 1.0;
        state.delta[0] = 1.0;
        state.tau[0] = 1.0;
        state.factors[0][(0, 0)] = 1.0;
        state.factors[1][(0, 0)] = 1.0;
        let batch = MiniBatch { cells: vec![Cell { indices: vec![0, 0], y: 1 }], t: 0 };
        let aux = batch_aux(&state, &batch, LabelMode::Observed);
        let v = log_post_lambda(&state, &batch, &aux);
        let expect = 0.5 - omega_hat(1.0) / 2.0 - 0.5;
        assert!((v.total() - expect).abs() < 1e-12);
        assert!((v.total() + 0.1155).abs() < 1e-4);
    }

    #[test]
    fn weaker_prior_increases_toward_zero() {
        let (_, mut state) = state_k2(2);
        state.lambda = DVector::from_vec(vec![0.7, -1.1]);
        let batch = MiniBatch { cells: vec![Cell { indices: vec![0, 0], y: 1 }], t: 0 };
        let aux = batch_aux(&state, &batch, LabelMode::Observed);
        let v1 = log_post_lambda(&state, &batch, &aux).prior;
        state.tau *= 2.0;
        let v2 = log_post_lambda(&state, &batch, &aux).prior;
        assert!(v2 > v1 && v2 < 0.0);
    }

    fn supervised_state() -> (ModelState, LabelSet) {
        let data = "a,b\nx,u\ny,v\nz,w\n";
        let decls = vec![ModeDecl::entity("a"), ModeDecl::entity("b")];
        let (t, _) = ingest_tuples(data.as_bytes(), &decls, 0).unwrap();
        let labels = LabelSet::new(
            0,
            vec!["t0".into(), "t1".into()],
            &[(0, 0, 1.0), (1, 0, -1.0), (0, 1, 1.0), (2, 1, -1.0), (1, 1, 1.0)],
        )
        .unwrap();
        let hyper = Hyperparams { rank: 2, ..Default::default() };
        let s = init_state(&t.scheme, std::slice::from_ref(&labels), &hyper, &mut ChaCha8Rng::seed_from_u64(5), None)
            .unwrap();
        (s, labels)
    }

    #[test]
    fn beta_multi_target_term_hand_value() {
        let (mut state, labels) = supervised_state();
        state.q.insert(0, DMatrix::from_element(2, 2, 1.0));
        state.q.get_mut(&0).unwrap()[(0, 0)] = 0.0;
        state.q.get_mut(&0).unwrap()[(1, 1)] = 0.0;
        // β_1=(1,−2), β_2=(3,−0.5) in R+1 = 3 dims: use (1,−2,0) and (3,−0.5,0)
        state.heads.get_mut(&0).unwrap()[0] = DVector::from_vec(vec![1.0, -2.0, 0.0]);
        state.heads.get_mut(&0).unwrap()[1] = DVector::from_vec(vec![3.0, -0.5, 0.0]);
        let aux = task_aux(&state, 0, 0, labels.task_entries(0));
        let v = log_post_beta(&state, 0, 0, &labels, &aux);
        assert!((v.multi_target - (-3.0)).abs() < 1e-12);
    }

    #[test]
    fn beta_zero_is_zero_and_single_task_has_no_multi_term() {
        let (mut state, labels) = supervised_state();
        state.heads.get_mut(&0).unwrap()[0].fill(0.0);
        let aux = task_aux(&state, 0, 0, labels.task_entries(0));
        let v = log_post_beta(&state, 0, 0, &labels, &aux);
        assert_eq!(v.prior, 0.0);
        assert_eq!(v.multi_target, 0.0);

        let single = LabelSet::new(0, vec!["t".into()], &[(0, 0, 1.0), (1, 0, -1.0)]).unwrap();
        let data = "a,b\nx,u\ny,v\nz,w\n";
        let decls = vec![ModeDecl::entity("a"), ModeDecl::entity("b")];
        let (t, _) = ingest_tuples(data.as_bytes(), &decls, 0).unwrap();
        let hyper = Hyperparams { rank: 2, ..Default::default() };
        let s = init_state(&t.scheme, std::slice::from_ref(&single), &hyper, &mut ChaCha8Rng::seed_from_u64(5), None)
            .unwrap();
        let aux = task_aux(&s, 0, 0, single.task_entries(0));
        assert_eq!(log_post_beta(&s, 0, 0, &single, &aux).multi_target, 0.0);
    }

    #[test]
    fn factor_pure_prior_when_absent_and_unlabeled() {
        let (_, mut state) = state_k2(2);
        let batch = MiniBatch { cells: vec![Cell { indices: vec![0, 0], y: 1 }], t: 0 };
        let aux = batch_aux(&state, &batch, LabelMode::Observed);
        state.factors[0].row_mut(2).copy_from_slice(&[0.5, -0.25]);
        let v = log_post_factor(&state, 0, 2, &batch, &aux, None, None);
        assert_eq!(v.likelihood, 0.0);
        assert_eq!(v.supervision, 0.0);
        let u = state.factor_row(0, 2);
        let want = -(u[0] * u[0] / state.factor_vars[0][(2, 0)] + u[1] * u[1] / state.factor_vars[0][(2, 1)]) / 2.0;
        assert!((v.prior - want).abs() < 1e-12);
    }

    #[test]
    fn factor_supervision_hand_value() {
        let (mut state, labels) = supervised_state();
        // z=+1, β̂=(1,0), β_0=0, u=(1,0): 0.5 − ν̂(1)·0.5
        state.heads.get_mut(&0).unwrap()[0] = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        state.factors[0].row_mut(0).copy_from_slice(&[1.0, 0.0]);
        let auxes = vec![
            task_aux(&state, 0, 0, labels.task_entries(0)),
            task_aux(&state, 0, 1, labels.task_entries(1)),
        ];
        let batch = MiniBatch { cells: vec![], t: 0 };
        let baux = BatchAux { omega: vec![], curvature: vec![], kappa: vec![] };
        // silence the other task's contribution
        let mut solo = state.clone();
        solo.heads.get_mut(&0).unwrap()[1].fill(0.0);
        let auxes_solo = vec![
            task_aux(&solo, 0, 0, labels.task_entries(0)),
            task_aux(&solo, 0, 1, labels.task_entries(1)),
        ];
        let v = log_post_factor(&solo, 0, 0, &batch, &baux, Some(&labels), Some(&auxes_solo));
        // entity 0 is labeled +1 for both tasks; task 1's head is zero so its
        // term is −ν̂(0)·0²/2 = 0 plus z·0/2 = 0.
        let want = 0.5 - nu_hat(1.0) * 0.5;
        assert!((v.supervision - want).abs() < 1e-12);
        assert!((want - 0.38447).abs() < 1e-4);
        let _ = auxes;
    }

    #[test]
    fn breakdown_sums_to_total() {
        let (state, labels) = supervised_state();
        let aux = task_aux(&state, 0, 0, labels.task_entries(0));
        let v = log_post_beta(&state, 0, 0, &labels, &aux);
        assert!((v.total() - (v.likelihood + v.prior + v.supervision + v.multi_target)).abs() < 1e-12);
    }
}
