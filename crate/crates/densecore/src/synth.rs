//! Synthetic benchmark generator: uniform background tuples plus planted
//! dense bipartite cores confined to a rating band and a contiguous week
//! window, with partial labels and full ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LabelSet;
use crate::tensor::{EntityMap, ObservedTensor, TensorScheme, SECONDS_PER_WEEK};

/// One planted dense core: an index box spanning a group of entities per
/// entity mode, a rating band and a week window, filled to `density`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoreSpec {
    /// Per entity mode: `(offset, size)` of the member index range.
    pub groups: Vec<(usize, usize)>,
    /// Inclusive rating band, 1-based.
    pub rating_band: (usize, usize),
    /// Inclusive week window.
    pub window: (usize, usize),
    /// Fraction of the core box that is filled, in (0, 1].
    pub density: f64,
    /// Tasks for which this core's entities are positive.
    pub tasks: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub entity_names: Vec<String>,
    pub entity_sizes: Vec<usize>,
    pub weeks: usize,
    pub background_tuples: usize,
    pub cores: Vec<CoreSpec>,
    /// Number of supervision tasks.
    pub tasks: usize,
    /// Fraction of ground-truth positives revealed as labels, in (0, 1].
    pub label_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            entity_names: vec!["reviewer".into(), "product".into()],
            entity_sizes: vec![500, 300],
            weeks: 20,
            background_tuples: 20_000,
            cores: vec![
                CoreSpec {
                    groups: vec![(0, 20), (0, 15)],
                    rating_band: (4, 5),
                    window: (0, 3),
                    density: 0.9,
                    tasks: vec![0],
                },
                CoreSpec {
                    groups: vec![(20, 20), (15, 15)],
                    rating_band: (1, 2),
                    window: (8, 11),
                    density: 0.9,
                    tasks: vec![1],
                },
            ],
            tasks: 2,
            label_fraction: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.entity_names.len() != self.entity_sizes.len() {
            return Err(Error::Synthetic("entity_names and entity_sizes lengths differ".into()));
        }
        if self.entity_sizes.iter().any(|&n| n == 0) || self.weeks == 0 {
            return Err(Error::Synthetic("mode sizes must be >= 1".into()));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Synthetic("label_fraction must lie in (0, 1]".into()));
        }
        for (c, core) in self.cores.iter().enumerate() {
            if core.groups.len() != self.entity_sizes.len() {
                return Err(Error::Synthetic(format!("core {c}: one group per entity mode required")));
            }
            for (k, &(off, size)) in core.groups.iter().enumerate() {
                if size == 0 || off + size > self.entity_sizes[k] {
                    return Err(Error::Synthetic(format!(
                        "core {c}: group {off}+{size} exceeds mode size {}",
                        self.entity_sizes[k]
                    )));
                }
            }
            let (lo, hi) = core.rating_band;
            if !(1 <= lo && lo <= hi && hi <= 5) {
                return Err(Error::Synthetic(format!("core {c}: rating band must satisfy 1 <= lo <= hi <= 5")));
            }
            let (w0, w1) = core.window;
            if !(w0 <= w1 && w1 < self.weeks) {
                return Err(Error::Synthetic(format!("core {c}: window must fit in {} weeks", self.weeks)));
            }
            if !(core.density > 0.0 && core.density <= 1.0) {
                return Err(Error::Synthetic(format!("core {c}: density must lie in (0, 1]")));
            }
            if core.tasks.iter().any(|&t| t >= self.tasks) {
                return Err(Error::Synthetic(format!("core {c}: task index out of range")));
            }
        }
        Ok(())
    }

    /// Number of entity modes (the tensor adds a rating and a week mode).
    pub fn entity_modes(&self) -> usize {
        self.entity_sizes.len()
    }
}

/// Generated benchmark: the tensor, partial labels, and the complete
/// entity-task ground truth.
#[derive(Debug)]
pub struct SyntheticDataset {
    pub tensor: ObservedTensor,
    pub labels: Vec<LabelSet>,
    /// `(entity mode, task)` -> set of positive entities.
    pub truth: BTreeMap<(usize, usize), BTreeSet<usize>>,
    pub config: SynthConfig,
}

impl SyntheticDataset {
    /// Truth as a per-entity boolean vector for one mode and task.
    pub fn truth_vector(&self, mode: usize, task: usize) -> Vec<bool> {
        let n = self.tensor.scheme.cardinalities[mode];
        let pos = self.truth.get(&(mode, task));
        (0..n).map(|e| pos.is_some_and(|s| s.contains(&e))).collect()
    }

    /// Write the tuple file ingestible by the fitting pipeline. Week
    /// indices are emitted as epoch timestamps.
    pub fn write_tuples(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        let e = self.config.entity_modes();
        let names = self.tensor.scheme.mode_names.join(",");
        writeln!(f, "{names}")?;
        for cell in self.tensor.cells() {
            let mut fields = Vec::with_capacity(cell.len());
            for (k, &idx) in cell.iter().enumerate() {
                if k < e {
                    fields.push(self.tensor.scheme.entity_maps[k].raw_of(idx).to_string());
                } else if k == e {
                    fields.push((idx + 1).to_string());
                } else {
                    fields.push((idx as i64 * SECONDS_PER_WEEK).to_string());
                }
            }
            writeln!(f, "{}", fields.join(","))?;
        }
        Ok(())
    }

    pub fn write_labels(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "mode,entity,task,label")?;
        for set in &self.labels {
            let mode_name = &self.tensor.scheme.mode_names[set.mode];
            let map = &self.tensor.scheme.entity_maps[set.mode];
            for l in 0..set.tasks() {
                for &(entity, z) in set.task_entries(l) {
                    writeln!(
                        f,
                        "{mode_name},{},{},{}",
                        map.raw_of(entity),
                        set.task_names[l],
                        if z > 0.0 { "+1" } else { "-1" }
                    )?;
                }
            }
        }
        Ok(())
    }

    /// Write complete ground truth in the same format as the label file.
    pub fn write_truth(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "mode,entity,task,label")?;
        let modes: BTreeSet<usize> = self.truth.keys().map(|&(m, _)| m).collect();
        for mode in modes {
            let mode_name = &self.tensor.scheme.mode_names[mode];
            let map = &self.tensor.scheme.entity_maps[mode];
            for task in 0..self.config.tasks {
                let Some(pos) = self.truth.get(&(mode, task)) else { continue };
                for e in 0..self.tensor.scheme.cardinalities[mode] {
                    writeln!(
                        f,
                        "{mode_name},{},task{task},{}",
                        map.raw_of(e),
                        if pos.contains(&e) { "+1" } else { "-1" }
                    )?;
                }
            }
        }
        Ok(())
    }
}

fn build_scheme(cfg: &SynthConfig) -> TensorScheme {
    let mut mode_names: Vec<String> = cfg.entity_names.clone();
    mode_names.push("rating".into());
    mode_names.push("week".into());
    let mut cardinalities = cfg.entity_sizes.clone();
    cardinalities.push(5);
    cardinalities.push(cfg.weeks);
    let mut entity_maps = Vec::with_capacity(mode_names.len());
    for (k, name) in cfg.entity_names.iter().enumerate() {
        let mut m = EntityMap::default();
        for i in 0..cfg.entity_sizes[k] {
            m.intern(&format!("{name}{i}"));
        }
        entity_maps.push(m);
    }
    let mut ratings = EntityMap::default();
    for r in 1..=5 {
        ratings.intern(&r.to_string());
    }
    entity_maps.push(ratings);
    let mut weeks = EntityMap::default();
    for w in 0..cfg.weeks {
        weeks.intern(&w.to_string());
    }
    entity_maps.push(weeks);
    TensorScheme { mode_names, cardinalities, entity_maps }
}

/// Side lengths of a core's index box, entity modes first, then the
/// rating band and week window.
fn core_dims(core: &CoreSpec) -> Vec<usize> {
    let mut dims: Vec<usize> = core.groups.iter().map(|&(_, s)| s).collect();
    dims.push(core.rating_band.1 - core.rating_band.0 + 1);
    dims.push(core.window.1 - core.window.0 + 1);
    dims
}

fn core_offsets(core: &CoreSpec) -> Vec<usize> {
    let mut offs: Vec<usize> = core.groups.iter().map(|&(o, _)| o).collect();
    offs.push(core.rating_band.0 - 1);
    offs.push(core.window.0);
    offs
}

/// Decode a linear box position into a full tensor index tuple.
fn decode(mut linear: usize, dims: &[usize], offsets: &[usize]) -> Vec<usize> {
    let mut tuple = vec![0usize; dims.len()];
    for k in (0..dims.len()).rev() {
        tuple[k] = offsets[k] + linear % dims[k];
        linear /= dims[k];
    }
    tuple
}

/// Generate a dataset: uniform background tuples, each core filled to its
/// density by sampling box cells without replacement, partial balanced
/// labels over the ground truth.
pub fn generate<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let scheme = build_scheme(cfg);
    let e = cfg.entity_modes();

    let mut tuples: Vec<Vec<usize>> = Vec::new();
    for _ in 0..cfg.background_tuples {
        tuples.push(scheme.cardinalities.iter().map(|&n| rng.random_range(0..n)).collect());
    }

    for core in &cfg.cores {
        let dims = core_dims(core);
        let offsets = core_offsets(core);
        let volume: usize = dims.iter().product();
        if volume > 100_000_000 {
            return Err(Error::Synthetic(format!("core box volume {volume} is too large")));
        }
        let n = ((core.density * volume as f64).round() as usize).clamp(1, volume);
        let mut covered: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); e];
        for linear in sample_indices(rng, volume, n) {
            let tuple = decode(linear, &dims, &offsets);
            for k in 0..e {
                covered[k].insert(tuple[k]);
            }
            tuples.push(tuple);
        }
        // every core member must appear in at least one tuple
        for k in 0..e {
            let (off, size) = core.groups[k];
            for entity in off..off + size {
                if !covered[k].contains(&entity) {
                    let linear = rng.random_range(0..volume);
                    let mut tuple = decode(linear, &dims, &offsets);
                    tuple[k] = entity;
                    tuples.push(tuple);
                }
            }
        }
    }

    let tensor = ObservedTensor::new(scheme, tuples);

    let mut truth: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    for core in &cfg.cores {
        for &task in &core.tasks {
            for (k, &(off, size)) in core.groups.iter().enumerate() {
                truth.entry((k, task)).or_default().extend(off..off + size);
            }
        }
    }

    // all-core membership per mode, so label negatives avoid every core
    let mut core_members: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); e];
    for core in &cfg.cores {
        for (k, &(off, size)) in core.groups.iter().enumerate() {
            core_members[k].extend(off..off + size);
        }
    }

    let mut labels = Vec::new();
    for k in 0..e {
        let tasks_here: Vec<usize> = (0..cfg.tasks)
            .filter(|&t| truth.get(&(k, t)).is_some_and(|s| !s.is_empty()))
            .collect();
        if tasks_here.is_empty() {
            continue;
        }
        let non_core: Vec<usize> =
            (0..cfg.entity_sizes[k]).filter(|i| !core_members[k].contains(i)).collect();
        if non_core.is_empty() {
            return Err(Error::Synthetic(format!("mode {k} has no non-core entities to label negative")));
        }
        // one shuffled negative pool per mode; every task takes a prefix,
        // so tasks always share negatives and stay cosine-comparable
        let mut negative_pool = non_core.clone();
        for i in (1..negative_pool.len()).rev() {
            negative_pool.swap(i, rng.random_range(0..=i));
        }
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (local, &task) in tasks_here.iter().enumerate() {
            let pos: Vec<usize> = truth[&(k, task)].iter().copied().collect();
            let n_lab = ((cfg.label_fraction * pos.len() as f64).round() as usize)
                .clamp(1, pos.len())
                .min(negative_pool.len());
            for i in sample_indices(rng, pos.len(), n_lab) {
                entries.push((pos[i], local, 1.0));
            }
            for &entity in &negative_pool[..n_lab] {
                entries.push((entity, local, -1.0));
            }
        }
        let task_names: Vec<String> = tasks_here.iter().map(|t| format!("task{t}")).collect();
        labels.push(LabelSet::new(k, task_names, &entries)?);
    }

    Ok(SyntheticDataset { tensor, labels, truth, config: cfg.clone() })
}
