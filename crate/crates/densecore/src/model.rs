//! Latent-variable state, hyper-parameters, partial label sets and the
//! deterministic derived quantities (shape schedule, component variances,
//! task-correlation matrix).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufReader, Read};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TensorScheme;

/// Inference flavor: plain stochastic gradient or one of the two
/// Fisher-conditioned natural-gradient variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    #[default]
    Natgrad1,
    Natgrad2,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "natgrad1" => Ok(Self::Natgrad1),
            "natgrad2" => Ok(Self::Natgrad2),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Whether data-term expectations use the realized cell labels or the
/// model-expected labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    #[default]
    Observed,
    Expected,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Rank bound R.
    pub rank: usize,
    pub a_c: f64,
    pub b1: f64,
    pub b2: f64,
    /// Learning-rate delay τ_p.
    pub delay: f64,
    /// Forgetting rate θ, must lie in (0.5, 1].
    pub forgetting: f64,
    pub batch_size: usize,
    pub neg_ratio: f64,
    pub max_iters: u64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Initialization standard deviation σ_0 for factors and heads.
    pub init_scale: f64,
    pub label_mode: LabelMode,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            rank: 8,
            a_c: 1.0,
            b1: 0.4,
            b2: 3.0,
            delay: 256.0,
            forgetting: 0.61,
            batch_size: 1024,
            neg_ratio: 1.0,
            max_iters: 1000,
            optimizer: Optimizer::Natgrad1,
            seed: 42,
            init_scale: 0.1,
            label_mode: LabelMode::Observed,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.rank < 1 {
            return Err(Error::Config("rank must be >= 1".into()));
        }
        if !(self.forgetting > 0.5 && self.forgetting <= 1.0) {
            return Err(Error::Config("forgetting rate must lie in (0.5, 1]".into()));
        }
        if self.delay < 0.0 {
            return Err(Error::Config("delay must be >= 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.neg_ratio < 0.0 {
            return Err(Error::Config("neg_ratio must be >= 0".into()));
        }
        for (name, v) in [("a_c", self.a_c), ("b1", self.b1), ("b2", self.b2), ("init_scale", self.init_scale)] {
            if v <= 0.0 {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Partial binary labels over a subset of one mode's entities, one column
/// per task. Labels are stored as ±1.
#[derive(Debug, Clone)]
pub struct LabelSet {
    pub mode: usize,
    pub task_names: Vec<String>,
    /// Per task: sorted `(entity, z)` with z in {−1, +1}.
    per_task: Vec<Vec<(usize, f64)>>,
    /// Per entity: `(task, z)` pairs, for factor-side lookups.
    by_entity: HashMap<usize, Vec<(usize, f64)>>,
}

impl LabelSet {
    pub fn new(
        mode: usize,
        task_names: Vec<String>,
        entries: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let l = task_names.len();
        let mut per_task: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); l];
        for &(entity, task, z) in entries {
            if task >= l {
                return Err(Error::Labels(format!("task index {task} out of range")));
            }
            if z != 1.0 && z != -1.0 {
                return Err(Error::Labels(format!("label must be ±1, got {z}")));
            }
            per_task[task].insert(entity, z);
        }
        for (t, m) in per_task.iter().enumerate() {
            let pos = m.values().filter(|&&z| z > 0.0).count();
            let neg = m.len() - pos;
            if pos == 0 || neg == 0 {
                return Err(Error::Labels(format!(
                    "task `{}` needs at least one positive and one negative label",
                    task_names[t]
                )));
            }
        }
        let per_task: Vec<Vec<(usize, f64)>> =
            per_task.into_iter().map(|m| m.into_iter().collect()).collect();
        let mut by_entity: HashMap<usize, Vec<(usize, f64)>> = HashMap::new();
        for (t, list) in per_task.iter().enumerate() {
            for &(e, z) in list {
                by_entity.entry(e).or_default().push((t, z));
            }
        }
        Ok(Self { mode, task_names, per_task, by_entity })
    }

    pub fn tasks(&self) -> usize {
        self.task_names.len()
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.task_names
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    /// Sorted `(entity, z)` pairs labeled for task `l`.
    pub fn task_entries(&self, l: usize) -> &[(usize, f64)] {
        &self.per_task[l]
    }

    /// `(task, z)` pairs for one entity, or an empty slice.
    pub fn entity_labels(&self, entity: usize) -> &[(usize, f64)] {
        self.by_entity.get(&entity).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Position of `entity` inside `task_entries(l)`, if labeled.
    pub fn position(&self, l: usize, entity: usize) -> Option<usize> {
        self.per_task[l].binary_search_by_key(&entity, |&(e, _)| e).ok()
    }
}

/// Parse a delimited label file with columns
/// `mode_name,raw_entity_id,task_name,label`; labels in {+1,-1,1,0} with
/// 0 mapped to −1 (warned). Returns one [`LabelSet`] per labeled mode.
pub fn read_labels<R: Read>(source: R, scheme: &TensorScheme) -> Result<Vec<LabelSet>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(BufReader::new(source));
    // (mode, entity, task_name) -> z
    let mut raw: BTreeMap<usize, Vec<(usize, String, f64)>> = BTreeMap::new();
    let mut zero_warned = false;
    for record in reader.records() {
        let r = record?;
        if r.len() < 4 {
            return Err(Error::Labels("expected 4 columns: mode,entity,task,label".into()));
        }
        let mode = scheme.mode_index(r.get(0).unwrap().trim())?;
        let raw_id = r.get(1).unwrap().trim();
        let entity = scheme.entity_maps[mode]
            .index_of(raw_id)
            .ok_or_else(|| Error::Labels(format!("unknown entity `{raw_id}` in mode {mode}")))?;
        let task = r.get(2).unwrap().trim().to_string();
        let z = match r.get(3).unwrap().trim() {
            "+1" | "1" => 1.0,
            "-1" => -1.0,
            "0" => {
                if !zero_warned {
                    eprintln!("warning: label 0 mapped to -1");
                    zero_warned = true;
                }
                -1.0
            }
            other => return Err(Error::Labels(format!("invalid label `{other}`"))),
        };
        raw.entry(mode).or_default().push((entity, task, z));
    }
    let mut out = Vec::new();
    for (mode, rows) in raw {
        let mut task_names: Vec<String> = Vec::new();
        for (_, t, _) in &rows {
            if !task_names.contains(t) {
                task_names.push(t.clone());
            }
        }
        let entries: Vec<(usize, usize, f64)> = rows
            .iter()
            .map(|(e, t, z)| (*e, task_names.iter().position(|n| n == t).unwrap(), *z))
            .collect();
        out.push(LabelSet::new(mode, task_names, &entries)?);
    }
    Ok(out)
}

/// Inverse-gamma shape schedule `a_1 = 1, a_l = 1 + (l−1)/R`.
pub fn shape_schedule(rank: usize) -> DVector<f64> {
    DVector::from_fn(rank, |r, _| 1.0 + r as f64 / rank as f64)
}

/// Cumulative product `τ_r = Π_{l≤r} δ_l`.
pub fn compute_tau(delta: &DVector<f64>) -> DVector<f64> {
    let mut tau = delta.clone();
    for r in 1..tau.len() {
        tau[r] = tau[r - 1] * delta[r];
    }
    tau
}

/// Reverse-cosine task-correlation matrix
/// `Q_{l,j} = 1 − z_l·z_j / (|z_l||z_j|)` over commonly labeled entities.
pub fn compute_q(labels: &LabelSet) -> Result<DMatrix<f64>> {
    let l = labels.tasks();
    let mut q = DMatrix::zeros(l, l);
    for a in 0..l {
        for b in (a + 1)..l {
            let ea = labels.task_entries(a);
            let eb = labels.task_entries(b);
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            let mut common = 0usize;
            let mut ib = 0usize;
            for &(e, za) in ea {
                while ib < eb.len() && eb[ib].0 < e {
                    ib += 1;
                }
                if ib < eb.len() && eb[ib].0 == e {
                    let zb = eb[ib].1;
                    dot += za * zb;
                    na += za * za;
                    nb += zb * zb;
                    common += 1;
                }
            }
            if common == 0 {
                return Err(Error::NoCommonLabels(
                    labels.task_names[a].clone(),
                    labels.task_names[b].clone(),
                ));
            }
            let v = 1.0 - dot / (na.sqrt() * nb.sqrt());
            q[(a, b)] = v;
            q[(b, a)] = v;
        }
    }
    Ok(q)
}

/// All latent variables of the decomposition model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub lambda: DVector<f64>,
    pub delta: DVector<f64>,
    pub tau: DVector<f64>,
    pub a_sched: DVector<f64>,
    /// Per mode: n_k × R factor matrix.
    pub factors: Vec<DMatrix<f64>>,
    /// Per mode: n_k × R factor variances μ².
    pub factor_vars: Vec<DMatrix<f64>>,
    /// Supervised mode -> per-task head vector of length R+1 (bias first).
    pub heads: BTreeMap<usize, Vec<DVector<f64>>>,
    /// Supervised mode -> per-task head variances ρ², length R+1.
    pub head_vars: BTreeMap<usize, Vec<DVector<f64>>>,
    /// Supervised mode -> frozen L×L task-correlation matrix.
    pub q: BTreeMap<usize, DMatrix<f64>>,
    pub t: u64,
}

impl ModelState {
    pub fn rank(&self) -> usize {
        self.lambda.len()
    }

    pub fn supervised_modes(&self) -> BTreeSet<usize> {
        self.heads.keys().copied().collect()
    }

    pub fn factor_row(&self, mode: usize, entity: usize) -> DVector<f64> {
        self.factors[mode].row(entity).transpose()
    }
}

/// Initial variance value `2b / (2a_c + 3)`, the fixed point of the
/// closed-form variance update at zero parameters.
pub fn init_variance(a_c: f64, b: f64) -> f64 {
    2.0 * b / (2.0 * a_c + 3.0)
}

/// Randomly initialize all latent variables. `q_override`, when given,
/// replaces the computed task-correlation matrix for every supervised mode.
pub fn init_state<R: Rng>(
    scheme: &TensorScheme,
    labels: &[LabelSet],
    hyper: &Hyperparams,
    rng: &mut R,
    q_override: Option<&DMatrix<f64>>,
) -> Result<ModelState> {
    hyper.validate()?;
    let rank = hyper.rank;
    let std_norm = Normal::new(0.0, 1.0).unwrap();
    let small = Normal::new(0.0, hyper.init_scale).unwrap();

    let lambda = DVector::from_fn(rank, |_, _| std_norm.sample(rng));
    let delta = DVector::from_element(rank, 1.0);
    let tau = compute_tau(&delta);
    let a_sched = shape_schedule(rank);

    let supervised: BTreeSet<usize> = labels.iter().map(|l| l.mode).collect();
    let mut factors = Vec::with_capacity(scheme.mode_count());
    let mut factor_vars = Vec::with_capacity(scheme.mode_count());
    for (k, &n) in scheme.cardinalities.iter().enumerate() {
        factors.push(DMatrix::from_fn(n, rank, |_, _| small.sample(rng)));
        let b = if supervised.contains(&k) { hyper.b1 } else { hyper.b2 };
        factor_vars.push(DMatrix::from_element(n, rank, init_variance(hyper.a_c, b)));
    }

    let mut heads = BTreeMap::new();
    let mut head_vars = BTreeMap::new();
    let mut q = BTreeMap::new();
    for set in labels {
        let per_task: Vec<DVector<f64>> = (0..set.tasks())
            .map(|_| DVector::from_fn(rank + 1, |_, _| small.sample(rng)))
            .collect();
        let vars: Vec<DVector<f64>> = (0..set.tasks())
            .map(|_| DVector::from_element(rank + 1, init_variance(hyper.a_c, hyper.b2)))
            .collect();
        heads.insert(set.mode, per_task);
        head_vars.insert(set.mode, vars);
        let qm = match q_override {
            Some(m) => m.clone(),
            None => compute_q(set)?,
        };
        q.insert(set.mode, qm);
    }

    Ok(ModelState { lambda, delta, tau, a_sched, factors, factor_vars, heads, head_vars, q, t: 0 })
}
