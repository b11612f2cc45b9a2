//! Stochastic partial-natural-gradient inference: gradients, partial
//! Fisher blocks, closed-form variance updates, the learning-rate
//! schedule, and the full fitting loop.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{batch_aux, task_aux, BatchAux, TaskAux};
use crate::error::{Error, Result};
use crate::eval::roc_auc;
use crate::model::{init_state, Hyperparams, LabelSet, ModelState, Optimizer};
use crate::objective::{log_post_lambda, sign};
use crate::tensor::{MiniBatch, ObservedTensor};

/// Floor applied to zero entries of the self-diagonal conditioner.
pub const SELF_DIAGONAL_FLOOR: f64 = 1e-8;

/// Robbins-Monro style learning rate `γ_t = (τ_p + t)^{−θ}`.
pub fn learning_rate(t: u64, delay: f64, forgetting: f64) -> f64 {
    (delay + t as f64).powf(-forgetting)
}

/// How a partial Fisher block is stabilized before inversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// Add the prior's inverse-variance diagonal.
    Prior,
    /// Add the block's own diagonal (floored at [`SELF_DIAGONAL_FLOOR`]).
    SelfDiagonal,
    /// Leave the raw data block.
    None,
}

impl Optimizer {
    pub fn conditioning(self) -> Conditioning {
        match self {
            Optimizer::Sgd => Conditioning::None,
            Optimizer::Natgrad1 => Conditioning::Prior,
            Optimizer::Natgrad2 => Conditioning::SelfDiagonal,
        }
    }
}

/// Small symmetric positive-definite preconditioner block.
#[derive(Debug, Clone)]
pub struct FisherBlock {
    pub matrix: DMatrix<f64>,
    pub conditioning: Conditioning,
}

impl FisherBlock {
    fn build(mut data: DMatrix<f64>, prior_inv_var: &DVector<f64>, cond: Conditioning, what: &str) -> Result<Self> {
        match cond {
            Conditioning::Prior => {
                for r in 0..data.nrows() {
                    data[(r, r)] += 1.0 / prior_inv_var[r];
                }
            }
            Conditioning::SelfDiagonal => {
                for r in 0..data.nrows() {
                    let d = data[(r, r)].max(SELF_DIAGONAL_FLOOR);
                    data[(r, r)] += d;
                }
            }
            Conditioning::None => {}
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadFisher(what.to_string()));
        }
        Ok(Self { matrix: data, conditioning: cond })
    }

    /// Solve `M x = g` through a symmetric Cholesky factorization.
    pub fn solve(&self, g: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
        let chol = self
            .matrix
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))?;
        Ok(chol.solve(g))
    }
}

/// `C` vector of one cell for one mode, plus the score φ = C·u.
fn cell_c(state: &ModelState, indices: &[usize], mode: usize) -> (DVector<f64>, f64) {
    let rank = state.rank();
    let mut c = DVector::zeros(rank);
    for r in 0..rank {
        let mut prod = state.lambda[r];
        for (k, &idx) in indices.iter().enumerate() {
            if k != mode {
                prod *= state.factors[k][(idx, r)];
            }
        }
        c[r] = prod;
    }
    let u = state.factor_row(mode, indices[mode]);
    let phi = c.dot(&u);
    (c, phi)
}

/// Gradient of the λ surrogate over the mini-batch (ω̂ and κ frozen in
/// `aux`): `Σ_i κ_iA_i − [AᵀΩ̂A + diag(τ)⁻¹]λ`.
pub fn grad_lambda(state: &ModelState, batch: &MiniBatch, aux: &BatchAux) -> DVector<f64> {
    let rank = state.rank();
    let mut g = DVector::zeros(rank);
    for (i, cell) in batch.cells.iter().enumerate() {
        let lin = crate::augment::linearize_cell(state, &cell.indices);
        let w = aux.kappa[i] - aux.omega[i] * lin.phi;
        g.axpy(w, &lin.a, 1.0);
    }
    for r in 0..rank {
        g[r] -= state.lambda[r] / state.tau[r];
    }
    g
}

/// Partial Fisher block for λ: `AᵀNA` plus the requested conditioner.
pub fn fisher_lambda(
    state: &ModelState,
    batch: &MiniBatch,
    aux: &BatchAux,
    cond: Conditioning,
) -> Result<FisherBlock> {
    let rank = state.rank();
    let mut data = DMatrix::zeros(rank, rank);
    for (i, cell) in batch.cells.iter().enumerate() {
        let lin = crate::augment::linearize_cell(state, &cell.indices);
        data.ger(aux.curvature[i], &lin.a, &lin.a, 1.0);
    }
    FisherBlock::build(data, &state.tau, cond, "lambda")
}

/// Gradient of the β_l surrogate (ν̂ frozen in `aux`):
/// `Σ_m z_mũ_m/2 − [Ũᵀν̂Ũ + diag(ρ²)⁻¹]β − Σ_{j≠l}Q_{l,j}Sign(β_j)`.
pub fn grad_beta(
    state: &ModelState,
    mode: usize,
    task: usize,
    labels: &LabelSet,
    aux: &TaskAux,
) -> DVector<f64> {
    let beta = &state.heads[&mode][task];
    let rho2 = &state.head_vars[&mode][task];
    let q = &state.q[&mode];
    let mut g = DVector::zeros(beta.len());
    for (m, &(entity, z)) in labels.task_entries(task).iter().enumerate() {
        let lin = crate::augment::linearize_head(state, mode, task, entity);
        let w = z / 2.0 - aux.nu[m] * lin.psi;
        g.axpy(w, &lin.u_tilde, 1.0);
    }
    for r in 0..beta.len() {
        g[r] -= beta[r] / rho2[r];
    }
    for j in 0..labels.tasks() {
        if j == task {
            continue;
        }
        let other = &state.heads[&mode][j];
        for r in 0..beta.len() {
            g[r] -= q[(task, j)] * sign(other[r]);
        }
    }
    g
}

/// Partial Fisher block for β_l: `ŨᵀOŨ` plus the conditioner. The sign
/// penalty is linear and contributes no curvature.
pub fn fisher_beta(
    state: &ModelState,
    mode: usize,
    task: usize,
    labels: &LabelSet,
    aux: &TaskAux,
    cond: Conditioning,
) -> Result<FisherBlock> {
    let beta_len = state.rank() + 1;
    let mut data = DMatrix::zeros(beta_len, beta_len);
    for (m, &(entity, _)) in labels.task_entries(task).iter().enumerate() {
        let lin = crate::augment::linearize_head(state, mode, task, entity);
        data.ger(aux.curvature[m], &lin.u_tilde, &lin.u_tilde, 1.0);
    }
    FisherBlock::build(data, &state.head_vars[&mode][task], cond, "beta")
}

/// Gradient of one factor row's surrogate (ω̂/ν̂ frozen).
pub fn grad_factor(
    state: &ModelState,
    mode: usize,
    entity: usize,
    batch: &MiniBatch,
    cell_ids: &[usize],
    aux: &BatchAux,
    labels: Option<&LabelSet>,
    task_auxes: Option<&[TaskAux]>,
) -> DVector<f64> {
    let rank = state.rank();
    let u = state.factor_row(mode, entity);
    let mut g = DVector::zeros(rank);
    for &i in cell_ids {
        let (c, phi) = cell_c(state, &batch.cells[i].indices, mode);
        let w = aux.kappa[i] - aux.omega[i] * phi;
        g.axpy(w, &c, 1.0);
    }
    for r in 0..rank {
        g[r] -= u[r] / state.factor_vars[mode][(entity, r)];
    }
    if let (Some(set), Some(auxes)) = (labels, task_auxes) {
        if set.mode == mode {
            for &(l, z) in set.entity_labels(entity) {
                let m = set.position(l, entity).expect("labeled entity");
                let beta = &state.heads[&mode][l];
                let beta_hat: DVector<f64> = beta.rows(1, rank).into_owned();
                let psi = beta[0] + u.dot(&beta_hat);
                let w = z / 2.0 - auxes[l].nu[m] * psi;
                g.axpy(w, &beta_hat, 1.0);
            }
        }
    }
    g
}

/// Partial Fisher block for one factor row: `CᵀNC (+ Σ_l O_{l,n} β̂β̂ᵀ)`
/// plus the conditioner.
#[allow(clippy::too_many_arguments)]
pub fn fisher_factor(
    state: &ModelState,
    mode: usize,
    entity: usize,
    batch: &MiniBatch,
    cell_ids: &[usize],
    aux: &BatchAux,
    labels: Option<&LabelSet>,
    task_auxes: Option<&[TaskAux]>,
    cond: Conditioning,
) -> Result<FisherBlock> {
    let rank = state.rank();
    let mut data = DMatrix::zeros(rank, rank);
    for &i in cell_ids {
        let (c, _) = cell_c(state, &batch.cells[i].indices, mode);
        data.ger(aux.curvature[i], &c, &c, 1.0);
    }
    if let (Some(set), Some(auxes)) = (labels, task_auxes) {
        if set.mode == mode {
            for &(l, _) in set.entity_labels(entity) {
                let m = set.position(l, entity).expect("labeled entity");
                let beta_hat: DVector<f64> = state.heads[&mode][l].rows(1, rank).into_owned();
                data.ger(auxes[l].curvature[m], &beta_hat, &beta_hat, 1.0);
            }
        }
    }
    let prior = state.factor_vars[mode].row(entity).transpose();
    FisherBlock::build(data, &prior, cond, "factor")
}

/// Multiplicative-gamma δ update (all components from the pre-update δ),
/// followed by the τ cumulative product.
pub fn update_delta(state: &mut ModelState) {
    let rank = state.rank();
    let old = state.delta.clone();
    for r in 0..rank {
        let mut num = 1.0;
        for h in r..rank {
            let mut prod = 1.0;
            for l in 0..=h {
                if l != r {
                    prod /= old[l];
                }
            }
            num += state.lambda[h] * state.lambda[h] / 2.0 * prod;
        }
        let denom = 0.5 * (rank - r) as f64 + state.a_sched[r] + 1.0;
        state.delta[r] = num / denom;
    }
    state.tau = crate::model::compute_tau(&state.delta);
}

/// Scalar closed-form inverse-gamma variance update.
pub fn variance_update(x: f64, a_c: f64, b: f64) -> f64 {
    (x * x + 2.0 * b) / (2.0 * a_c + 3.0)
}

/// Full-sweep closed-form update of every μ² and ρ².
pub fn update_variances(state: &mut ModelState, hyper: &Hyperparams) {
    let supervised = state.supervised_modes();
    for k in 0..state.factors.len() {
        let b = if supervised.contains(&k) { hyper.b1 } else { hyper.b2 };
        for n in 0..state.factors[k].nrows() {
            for r in 0..state.rank() {
                state.factor_vars[k][(n, r)] = variance_update(state.factors[k][(n, r)], hyper.a_c, b);
            }
        }
    }
    let modes: Vec<usize> = state.heads.keys().copied().collect();
    for k in modes {
        let tasks = state.heads[&k].len();
        for l in 0..tasks {
            for r in 0..state.rank() + 1 {
                let beta = state.heads[&k][l][r];
                state.head_vars.get_mut(&k).unwrap()[l][r] = variance_update(beta, hyper.a_c, hyper.b2);
            }
        }
    }
}

fn check_finite(v: &DVector<f64>, param: &str, iter: u64) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { param: param.to_string(), iter });
    }
    Ok(())
}

fn apply_update(
    x: &mut DVector<f64>,
    gamma: f64,
    grad: &DVector<f64>,
    fisher: Option<&FisherBlock>,
    what: &str,
    iter: u64,
) -> Result<()> {
    let step = match fisher {
        Some(f) => f.solve(grad, what)?,
        None => grad.clone(),
    };
    x.axpy(gamma, &step, 1.0);
    check_finite(x, what, iter)
}

/// One Algorithm-style iteration over a mini-batch: frozen expectations,
/// then β → ρ² → factors → μ² → λ → δ/τ, each consuming the freshest
/// parameter values. `state.t` advances by one.
pub fn step(
    state: &mut ModelState,
    batch: &MiniBatch,
    labels: &[LabelSet],
    hyper: &Hyperparams,
) -> Result<()> {
    step_parallel(state, batch, labels, hyper, false)
}

/// [`step`] with the per-cell expectation pass optionally parallelized.
/// The parallel pass fills output slots by cell index, so results match
/// the sequential path bit for bit.
pub fn step_parallel(
    state: &mut ModelState,
    batch: &MiniBatch,
    labels: &[LabelSet],
    hyper: &Hyperparams,
    parallel: bool,
) -> Result<()> {
    debug_assert_eq!(state.t, batch.t);
    let iter = state.t;
    let gamma = learning_rate(iter, hyper.delay, hyper.forgetting);
    let cond = hyper.optimizer.conditioning();
    let use_fisher = cond != Conditioning::None;

    let aux = if parallel {
        crate::augment::batch_aux_parallel(state, batch, hyper.label_mode)
    } else {
        batch_aux(state, batch, hyper.label_mode)
    };

    // per-mode frozen task expectations, computed before any update
    let mut task_auxes: BTreeMap<usize, Vec<TaskAux>> = BTreeMap::new();
    for set in labels {
        let auxes: Vec<TaskAux> = (0..set.tasks())
            .map(|l| task_aux(state, set.mode, l, set.task_entries(l)))
            .collect();
        task_auxes.insert(set.mode, auxes);
    }

    // heads and their variances
    for set in labels {
        let auxes = &task_auxes[&set.mode];
        for l in 0..set.tasks() {
            let g = grad_beta(state, set.mode, l, set, &auxes[l]);
            let fisher = if use_fisher {
                Some(fisher_beta(state, set.mode, l, set, &auxes[l], cond)?)
            } else {
                None
            };
            let mut beta = state.heads[&set.mode][l].clone();
            apply_update(&mut beta, gamma, &g, fisher.as_ref(), "beta", iter)?;
            state.heads.get_mut(&set.mode).unwrap()[l] = beta;
            for r in 0..state.rank() + 1 {
                let b = state.heads[&set.mode][l][r];
                state.head_vars.get_mut(&set.mode).unwrap()[l][r] =
                    variance_update(b, hyper.a_c, hyper.b2);
            }
        }
    }

    // factor rows for entities touched by the batch, mode by mode
    let supervised = state.supervised_modes();
    for mode in 0..state.factors.len() {
        let mut by_entity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, cell) in batch.cells.iter().enumerate() {
            by_entity.entry(cell.indices[mode]).or_default().push(i);
        }
        let set = labels.iter().find(|s| s.mode == mode);
        let auxes = set.map(|s| task_auxes[&s.mode].as_slice());
        let b = if supervised.contains(&mode) { hyper.b1 } else { hyper.b2 };
        for (&entity, cell_ids) in &by_entity {
            let g = grad_factor(state, mode, entity, batch, cell_ids, &aux, set, auxes);
            let fisher = if use_fisher {
                Some(fisher_factor(state, mode, entity, batch, cell_ids, &aux, set, auxes, cond)?)
            } else {
                None
            };
            let mut u = state.factor_row(mode, entity);
            apply_update(&mut u, gamma, &g, fisher.as_ref(), "factor", iter)?;
            for r in 0..state.rank() {
                state.factors[mode][(entity, r)] = u[r];
                state.factor_vars[mode][(entity, r)] = variance_update(u[r], hyper.a_c, b);
            }
        }
    }

    // component weights
    let g = grad_lambda(state, batch, &aux);
    let fisher = if use_fisher {
        Some(fisher_lambda(state, batch, &aux, cond)?)
    } else {
        None
    };
    let mut lambda = state.lambda.clone();
    apply_update(&mut lambda, gamma, &g, fisher.as_ref(), "lambda", iter)?;
    state.lambda = lambda;

    update_delta(state);
    state.t += 1;
    Ok(())
}

/// One per-iteration record of a fitting run.
#[derive(Debug, Clone)]
pub struct IterRecord {
    pub t: u64,
    pub gamma: f64,
    pub objective: f64,
    /// Validation AUC per task, when a validation set was supplied and
    /// this iteration was an evaluation point.
    pub auc: Vec<f64>,
    /// Count of components with `|λ_r| < 0.1·max|λ|`.
    pub lambda_small: usize,
    pub millis: f64,
}

/// Fitting trace plus the final state.
#[derive(Debug, Clone, Default)]
pub struct FitReport {
    pub records: Vec<IterRecord>,
    pub iterations: u64,
    pub wall_clock_secs: f64,
    pub stopped_early: bool,
}

impl FitReport {
    /// Export as delimited text, one record per iteration.
    pub fn write_to<W: std::io::Write>(&self, mut w: W, task_names: &[String]) -> Result<()> {
        write!(w, "t,gamma,objective,lambda_small,millis")?;
        for t in task_names {
            write!(w, ",auc_{t}")?;
        }
        writeln!(w)?;
        for r in &self.records {
            write!(w, "{},{},{},{},{}", r.t, r.gamma, r.objective, r.lambda_small, r.millis)?;
            for i in 0..task_names.len() {
                match r.auc.get(i) {
                    Some(a) => write!(w, ",{a}")?,
                    None => write!(w, ",")?,
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Held-out truth used for validation AUC during fitting: entity/label
/// pairs per task over one mode.
#[derive(Debug, Clone)]
pub struct ValidationSpec {
    pub mode: usize,
    pub truth_per_task: Vec<Vec<(usize, bool)>>,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub validation: Option<ValidationSpec>,
    /// Evaluate validation AUC every this many iterations.
    pub eval_every: u64,
    /// Stop after this many evaluations without `min_delta` improvement.
    pub patience: Option<u64>,
    pub min_delta: f64,
    pub record_every: u64,
    /// Worker threads for the per-cell expectation pass; 1 is fully
    /// sequential.
    pub workers: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            validation: None,
            eval_every: 10,
            patience: None,
            min_delta: 1e-4,
            record_every: 1,
            workers: 1,
        }
    }
}

/// Derive an isolated random stream from the master seed.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub const STREAM_INIT: u64 = 0;

/// Stream for the mini-batch (and negative sampling) of iteration `t`;
/// re-derivable at resume so a resumed fit replays the same batches.
pub fn batch_rng(seed: u64, t: u64) -> ChaCha8Rng {
    seeded_stream(seed, 1 + t)
}

fn validation_auc(state: &ModelState, spec: &ValidationSpec) -> Vec<f64> {
    spec.truth_per_task
        .iter()
        .enumerate()
        .map(|(l, truth)| {
            let mut scores = Vec::with_capacity(truth.len());
            let mut flags = Vec::with_capacity(truth.len());
            for &(entity, positive) in truth {
                let lin = crate::augment::linearize_head(state, spec.mode, l, entity);
                scores.push(crate::augment::sigmoid(lin.psi));
                flags.push(positive);
            }
            roc_auc(&scores, &flags).unwrap_or(f64::NAN)
        })
        .collect()
}

/// Count of components with magnitude below one tenth of the largest.
pub fn lambda_small_count(lambda: &DVector<f64>) -> usize {
    let max = lambda.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if max == 0.0 {
        return lambda.len();
    }
    lambda.iter().filter(|&&v| v.abs() < 0.1 * max).count()
}

/// Continue fitting an existing state for `iters` further iterations.
pub fn fit_state(
    state: &mut ModelState,
    tensor: &ObservedTensor,
    labels: &[LabelSet],
    hyper: &Hyperparams,
    options: &FitOptions,
    iters: u64,
) -> Result<FitReport> {
    let mut report = FitReport::default();
    let start = Instant::now();
    let mut best_auc = f64::NEG_INFINITY;
    let mut stale_checks = 0u64;
    let pool = if options.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(options.workers)
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?,
        )
    } else {
        None
    };
    for _ in 0..iters {
        let t = state.t;
        let iter_start = Instant::now();
        let mut rng = batch_rng(hyper.seed, t);
        let batch = tensor.sample_minibatch(hyper.batch_size, hyper.neg_ratio, &mut rng, t)?;
        match &pool {
            Some(p) => p.install(|| step_parallel(state, &batch, labels, hyper, true))?,
            None => step(state, &batch, labels, hyper)?,
        }

        let mut auc = Vec::new();
        if let Some(spec) = &options.validation {
            if (t + 1) % options.eval_every == 0 {
                auc = validation_auc(state, spec);
                let mean: f64 = auc.iter().sum::<f64>() / auc.len().max(1) as f64;
                if mean > best_auc + options.min_delta {
                    best_auc = mean;
                    stale_checks = 0;
                } else {
                    stale_checks += 1;
                }
            }
        }

        if t % options.record_every == 0 || !auc.is_empty() {
            let aux = batch_aux(state, &batch, hyper.label_mode);
            let objective = log_post_lambda(state, &batch, &aux).total();
            report.records.push(IterRecord {
                t,
                gamma: learning_rate(t, hyper.delay, hyper.forgetting),
                objective,
                auc: auc.clone(),
                lambda_small: lambda_small_count(&state.lambda),
                millis: iter_start.elapsed().as_secs_f64() * 1e3,
            });
        }
        report.iterations += 1;

        if let Some(patience) = options.patience {
            if !auc.is_empty() && stale_checks >= patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Initialize from the master seed and run the full fitting loop.
pub fn fit(
    tensor: &ObservedTensor,
    labels: &[LabelSet],
    hyper: &Hyperparams,
    options: &FitOptions,
) -> Result<(ModelState, FitReport)> {
    let mut rng = seeded_stream(hyper.seed, STREAM_INIT);
    let mut state = init_state(&tensor.scheme, labels, hyper, &mut rng, None)?;
    let report = fit_state(&mut state, tensor, labels, hyper, options, hyper.max_iters)?;
    Ok((state, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LabelSet;
    use crate::objective::{log_post_beta, log_post_factor};
    use crate::tensor::{ingest_tuples, Cell, ModeDecl};
    use nalgebra::DMatrix;

    fn fixture() -> (ObservedTensor, Vec<LabelSet>, ModelState, Hyperparams) {
        let data = "a,b\nx,u\ny,v\nz,w\nx,v\ny,w\nz,u\nx,w\n";
        let decls = vec![ModeDecl::entity("a"), ModeDecl::entity("b")];
        let (tensor, _) = ingest_tuples(data.as_bytes(), &decls, 0).unwrap();
        let labels = vec![LabelSet::new(
            0,
            vec!["t0".into(), "t1".into()],
            &[(0, 0, 1.0), (1, 0, -1.0), (2, 0, 1.0), (0, 1, 1.0), (1, 1, -1.0)],
        )
        .unwrap()];
        let hyper = Hyperparams { rank: 3, batch_size: 6, max_iters: 8, ..Default::default() };
        let mut rng = seeded_stream(hyper.seed, STREAM_INIT);
        let state = init_state(&tensor.scheme, &labels, &hyper, &mut rng, None).unwrap();
        (tensor, labels, state, hyper)
    }

    fn test_batch() -> MiniBatch {
        MiniBatch {
            cells: vec![
                Cell { indices: vec![0, 0], y: 1 },
                Cell { indices: vec![1, 1], y: 1 },
                Cell { indices: vec![0, 2], y: 0 },
                Cell { indices: vec![2, 1], y: 0 },
                Cell { indices: vec![0, 1], y: 1 },
            ],
            t: 0,
        }
    }

    #[test]
    fn learning_rate_schedule() {
        let g0 = learning_rate(0, 256.0, 0.61);
        assert!((g0 - 256.0f64.powf(-0.61)).abs() < 1e-15);
        let g1 = learning_rate(1, 256.0, 0.61);
        assert!(g1 < g0);
        assert!(learning_rate(1_000_000, 256.0, 0.61) < 1e-3);
        assert_eq!(learning_rate(0, 1.0, 1.0), 1.0);
    }

    #[test]
    fn lambda_gradient_matches_finite_difference() {
        let (_, _, state, hyper) = fixture();
        let batch = test_batch();
        let aux = batch_aux(&state, &batch, hyper.label_mode);
        let g = grad_lambda(&state, &batch, &aux);
        let h = 1e-5;
        for r in 0..state.rank() {
            let mut sp = state.clone();
            sp.lambda[r] += h;
            let mut sm = state.clone();
            sm.lambda[r] -= h;
            let fd = (log_post_lambda(&sp, &batch, &aux).total()
                - log_post_lambda(&sm, &batch, &aux).total())
                / (2.0 * h);
            let rel = (g[r] - fd).abs() / g[r].abs().max(1.0);
            assert!(rel < 1e-6, "r={r} grad={} fd={fd}", g[r]);
        }
    }

    #[test]
    fn beta_gradient_matches_finite_difference() {
        let (_, labels, state, _) = fixture();
        let set = &labels[0];
        let aux = task_aux(&state, 0, 0, set.task_entries(0));
        let g = grad_beta(&state, 0, 0, set, &aux);
        let h = 1e-5;
        for r in 0..state.rank() + 1 {
            let mut sp = state.clone();
            sp.heads.get_mut(&0).unwrap()[0][r] += h;
            let mut sm = state.clone();
            sm.heads.get_mut(&0).unwrap()[0][r] -= h;
            let fd = (log_post_beta(&sp, 0, 0, set, &aux).total()
                - log_post_beta(&sm, 0, 0, set, &aux).total())
                / (2.0 * h);
            let rel = (g[r] - fd).abs() / g[r].abs().max(1.0);
            assert!(rel < 1e-6, "r={r} grad={} fd={fd}", g[r]);
        }
    }

    #[test]
    fn factor_gradient_matches_finite_difference() {
        let (_, labels, state, hyper) = fixture();
        let batch = test_batch();
        let aux = batch_aux(&state, &batch, hyper.label_mode);
        let set = &labels[0];
        let auxes: Vec<TaskAux> = (0..set.tasks())
            .map(|l| task_aux(&state, 0, l, set.task_entries(l)))
            .collect();
        let entity = 0usize;
        let cell_ids: Vec<usize> = batch
            .cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.indices[0] == entity)
            .map(|(i, _)| i)
            .collect();
        let g = grad_factor(&state, 0, entity, &batch, &cell_ids, &aux, Some(set), Some(&auxes));
        let h = 1e-5;
        for r in 0..state.rank() {
            let mut sp = state.clone();
            sp.factors[0][(entity, r)] += h;
            let mut sm = state.clone();
            sm.factors[0][(entity, r)] -= h;
            let fd = (log_post_factor(&sp, 0, entity, &batch, &aux, Some(set), Some(&auxes)).total()
                - log_post_factor(&sm, 0, entity, &batch, &aux, Some(set), Some(&auxes)).total())
                / (2.0 * h);
            let rel = (g[r] - fd).abs() / g[r].abs().max(1.0);
            assert!(rel < 1e-6, "r={r} grad={} fd={fd}", g[r]);
        }
    }

    #[test]
    fn surrogate_newton_step_reaches_stationary_point() {
        // with curvature taken as the frozen ω̂ the surrogate is exactly
        // quadratic, so one solved step zeroes its gradient
        let (_, _, mut state, hyper) = fixture();
        let batch = test_batch();
        let aux = batch_aux(&state, &batch, hyper.label_mode);
        let rank = state.rank();
        let mut hess = DMatrix::zeros(rank, rank);
        for (i, cell) in batch.cells.iter().enumerate() {
            let lin = crate::augment::linearize_cell(&state, &cell.indices);
            hess.ger(aux.omega[i], &lin.a, &lin.a, 1.0);
        }
        for r in 0..rank {
            hess[(r, r)] += 1.0 / state.tau[r];
        }
        let g = grad_lambda(&state, &batch, &aux);
        let step = hess.cholesky().unwrap().solve(&g);
        state.lambda += step;
        let g_after = grad_lambda(&state, &batch, &aux);
        assert!(g_after.norm() < 1e-10, "residual gradient {}", g_after.norm());
    }

    #[test]
    fn fisher_conditioning_variants() {
        let (_, _, state, hyper) = fixture();
        let batch = test_batch();
        let aux = batch_aux(&state, &batch, hyper.label_mode);
        let raw = fisher_lambda(&state, &batch, &aux, Conditioning::None).unwrap();
        let prior = fisher_lambda(&state, &batch, &aux, Conditioning::Prior).unwrap();
        for r in 0..state.rank() {
            let want = raw.matrix[(r, r)] + 1.0 / state.tau[r];
            assert!((prior.matrix[(r, r)] - want).abs() < 1e-12);
        }
        let selfd = fisher_lambda(&state, &batch, &aux, Conditioning::SelfDiagonal).unwrap();
        for r in 0..state.rank() {
            let d = raw.matrix[(r, r)];
            assert!((selfd.matrix[(r, r)] - (d + d.max(SELF_DIAGONAL_FLOOR))).abs() < 1e-12);
        }
        // empty data matrix still solvable under the floored self diagonal
        let empty = MiniBatch { cells: vec![], t: 0 };
        let eaux = batch_aux(&state, &empty, hyper.label_mode);
        let f = fisher_lambda(&state, &empty, &eaux, Conditioning::SelfDiagonal).unwrap();
        let ones = DVector::from_element(state.rank(), 1.0);
        let x = f.solve(&ones, "lambda").unwrap();
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn delta_update_hand_values_and_simultaneity() {
        // hand-checkable rank-2 state
        let hyper = Hyperparams { rank: 2, ..Default::default() };
        let data = "a,b\nx,u\ny,v\n";
        let decls = vec![ModeDecl::entity("a"), ModeDecl::entity("b")];
        let (tensor, _) = ingest_tuples(data.as_bytes(), &decls, 0).unwrap();
        let mut rng = seeded_stream(0, STREAM_INIT);
        let mut state = init_state(&tensor.scheme, &[], &hyper, &mut rng, None).unwrap();
        state.lambda = DVector::from_vec(vec![2.0, 1.0]);
        state.delta = DVector::from_vec(vec![2.0, 4.0]);
        update_delta(&mut state);
        // a = (1, 1.5); δ1 = (1 + 2 + 0.5/4)/3, δ2 = (1 + 0.5/2)/3
        assert!((state.delta[0] - 3.125 / 3.0).abs() < 1e-12);
        assert!((state.delta[1] - 1.25 / 3.0).abs() < 1e-12);
        assert!((state.tau[0] - state.delta[0]).abs() < 1e-15);
        assert!((state.tau[1] - state.delta[0] * state.delta[1]).abs() < 1e-15);
    }

    #[test]
    fn delta_update_rank_one() {
        let hyper = Hyperparams { rank: 1, ..Default::default() };
        let data = "a,b\nx,u\n";
        let decls = vec![ModeDecl::entity("a"), ModeDecl::entity("b")];
        let (tensor, _) = ingest_tuples(data.as_bytes(), &decls, 0).unwrap();
        let mut rng = seeded_stream(0, STREAM_INIT);
        let mut state = init_state(&tensor.scheme, &[], &hyper, &mut rng, None).unwrap();
        state.lambda[0] = 3.0;
        update_delta(&mut state);
        assert!((state.delta[0] - (1.0 + 4.5) / 2.5).abs() < 1e-12);
    }

    #[test]
    fn variance_update_values() {
        assert!((variance_update(0.5, 1.0, 0.4) - 0.21).abs() < 1e-12);
        assert!((variance_update(0.0, 1.0, 3.0) - 1.2).abs() < 1e-12);
        let (_, _, mut state, hyper) = fixture();
        state.factors[0][(0, 0)] = 2.0;
        state.factors[1][(0, 0)] = 2.0;
        update_variances(&mut state, &hyper);
        // mode 0 supervised (b1), mode 1 unsupervised (b2)
        assert!((state.factor_vars[0][(0, 0)] - (4.0 + 0.8) / 5.0).abs() < 1e-12);
        assert!((state.factor_vars[1][(0, 0)] - (4.0 + 6.0) / 5.0).abs() < 1e-12);
    }

    #[test]
    fn step_advances_and_stays_finite() {
        let (tensor, labels, mut state, hyper) = fixture();
        for t in 0..3 {
            let mut rng = batch_rng(hyper.seed, t);
            let batch = tensor
                .sample_minibatch(hyper.batch_size, hyper.neg_ratio, &mut rng, t)
                .unwrap();
            step(&mut state, &batch, &labels, &hyper).unwrap();
        }
        assert_eq!(state.t, 3);
        assert!(state.lambda.iter().all(|v| v.is_finite()));
        assert!(state.factors.iter().all(|f| f.iter().all(|v| v.is_finite())));
        assert!(state.delta.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn fit_is_deterministic_and_resumable() {
        let (tensor, labels, _, hyper) = fixture();
        let options = FitOptions::default();
        let (s1, r1) = fit(&tensor, &labels, &hyper, &options).unwrap();
        let (s2, _) = fit(&tensor, &labels, &hyper, &options).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(r1.iterations, hyper.max_iters);

        let mut half = Hyperparams { max_iters: 4, ..hyper.clone() };
        let (mut s3, _) = fit(&tensor, &labels, &half, &options).unwrap();
        half.max_iters = hyper.max_iters;
        fit_state(&mut s3, &tensor, &labels, &half, &options, 4).unwrap();
        assert_eq!(s1, s3);
    }

    #[test]
    fn sgd_path_runs() {
        let (tensor, labels, _, mut hyper) = fixture();
        hyper.optimizer = Optimizer::Sgd;
        hyper.max_iters = 3;
        let (state, report) = fit(&tensor, &labels, &hyper, &FitOptions::default()).unwrap();
        assert_eq!(state.t, 3);
        assert_eq!(report.records.len(), 3);
        assert!(report.records.iter().all(|r| r.objective.is_finite()));
    }

    #[test]
    fn parallel_workers_match_single_threaded() {
        let (tensor, labels, _, mut hyper) = fixture();
        hyper.max_iters = 4;
        let (s1, _) = fit(&tensor, &labels, &hyper, &FitOptions::default()).unwrap();
        let opts = FitOptions { workers: 4, ..Default::default() };
        let (s2, _) = fit(&tensor, &labels, &hyper, &opts).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn lambda_small_counting() {
        let l = DVector::from_vec(vec![1.0, 0.05, -0.2, 0.0]);
        assert_eq!(lambda_small_count(&l), 2);
        assert_eq!(lambda_small_count(&DVector::from_element(3, 0.0)), 3);
    }
}
