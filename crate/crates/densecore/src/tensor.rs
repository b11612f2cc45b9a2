//! Sparse binary tensor data model: ingestion, membership testing and
//! mini-batch sampling with negative sampling.
//!
//! Observed cells are stored as dense index tuples; every stored cell is a
//! positive (`y = 1`). Zeros only ever appear inside mini-batches, produced
//! by rejection-sampled negative draws.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub const SECONDS_PER_WEEK: i64 = 604_800;

/// How a declared input column is interpreted during ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeKind {
    /// Opaque entity identifier, interned in order of first appearance.
    Entity,
    /// Integer rating in [1, 5]; records outside the range are rejected.
    Rating,
    /// Epoch timestamp in seconds, binned to a week index.
    Time,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModeDecl {
    pub name: String,
    pub kind: ModeKind,
}

impl ModeDecl {
    pub fn entity(name: &str) -> Self {
        Self { name: name.to_string(), kind: ModeKind::Entity }
    }
}

/// Bijection between raw entity identifiers and dense indices `[0, n_k)`.
#[derive(Debug, Clone, Default)]
pub struct EntityMap {
    to_index: HashMap<String, usize>,
    to_raw: Vec<String>,
}

impl EntityMap {
    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&i) = self.to_index.get(raw) {
            return i;
        }
        let i = self.to_raw.len();
        self.to_index.insert(raw.to_string(), i);
        self.to_raw.push(raw.to_string());
        i
    }

    pub fn index_of(&self, raw: &str) -> Option<usize> {
        self.to_index.get(raw).copied()
    }

    pub fn raw_of(&self, index: usize) -> &str {
        &self.to_raw[index]
    }

    pub fn len(&self) -> usize {
        self.to_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_raw.is_empty()
    }
}

/// Mode structure of a tensor: names, cardinalities and entity maps.
#[derive(Debug, Clone)]
pub struct TensorScheme {
    pub mode_names: Vec<String>,
    pub cardinalities: Vec<usize>,
    pub entity_maps: Vec<EntityMap>,
}

impl TensorScheme {
    pub fn mode_count(&self) -> usize {
        self.mode_names.len()
    }

    pub fn mode_index(&self, name: &str) -> Result<usize> {
        self.mode_names
            .iter()
            .position(|m| m == name)
            .ok_or_else(|| Error::UnknownMode(name.to_string()))
    }

    /// Total number of index combinations, saturating on overflow.
    pub fn volume(&self) -> f64 {
        self.cardinalities.iter().map(|&n| n as f64).product()
    }
}

/// One tensor cell inside a mini-batch: a dense index tuple plus its
/// binary label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub indices: Vec<usize>,
    pub y: u8,
}

/// Mini-batch of positive cells and sampled negatives for iteration `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniBatch {
    pub cells: Vec<Cell>,
    pub t: u64,
}

/// Counters reported by ingestion.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub records: usize,
    pub duplicates: usize,
    pub rejected: usize,
}

/// Immutable sparse binary tensor over a [`TensorScheme`].
#[derive(Debug, Clone)]
pub struct ObservedTensor {
    pub scheme: TensorScheme,
    cells: Vec<Vec<usize>>,
    index: HashSet<Vec<usize>>,
}

impl ObservedTensor {
    pub fn new(scheme: TensorScheme, tuples: Vec<Vec<usize>>) -> Self {
        let mut index = HashSet::with_capacity(tuples.len());
        let mut cells = Vec::with_capacity(tuples.len());
        for t in tuples {
            debug_assert_eq!(t.len(), scheme.mode_count());
            if index.insert(t.clone()) {
                cells.push(t);
            }
        }
        Self { scheme, cells, index }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[Vec<usize>] {
        &self.cells
    }

    /// True iff the tuple is an observed (positive) cell.
    pub fn contains(&self, indices: &[usize]) -> bool {
        self.index.contains(indices)
    }

    /// Fraction of possible index combinations that are observed.
    pub fn density(&self) -> f64 {
        self.cells.len() as f64 / self.scheme.volume()
    }

    /// Sample `batch_size` positives with replacement plus
    /// `round(batch_size * neg_ratio)` rejection-sampled negatives.
    ///
    /// A negative draw is retried up to 100 times against the membership
    /// index; a draw that exhausts its retries is skipped, so extremely
    /// dense tensors yield a smaller batch than requested.
    pub fn sample_minibatch<R: Rng>(
        &self,
        batch_size: usize,
        neg_ratio: f64,
        rng: &mut R,
        t: u64,
    ) -> Result<MiniBatch> {
        if self.cells.is_empty() {
            return Err(Error::EmptyTensor);
        }
        let n_neg = (batch_size as f64 * neg_ratio).round() as usize;
        let mut cells = Vec::with_capacity(batch_size + n_neg);
        for _ in 0..batch_size {
            let i = rng.random_range(0..self.cells.len());
            cells.push(Cell { indices: self.cells[i].clone(), y: 1 });
        }
        let mut skipped = 0usize;
        for _ in 0..n_neg {
            let mut found = false;
            for _ in 0..100 {
                let cand: Vec<usize> = self
                    .scheme
                    .cardinalities
                    .iter()
                    .map(|&n| rng.random_range(0..n))
                    .collect();
                if !self.contains(&cand) {
                    cells.push(Cell { indices: cand, y: 0 });
                    found = true;
                    break;
                }
            }
            if !found {
                skipped += 1;
            }
        }
        if skipped > 0 {
            eprintln!(
                "warning: negative sampling exhausted retries for {skipped} draws; \
                 returning a smaller batch"
            );
        }
        Ok(MiniBatch { cells, t })
    }

    /// Export the observed tuple set as raw-ID rows (order of storage).
    pub fn export_tuples(&self) -> Vec<Vec<String>> {
        self.cells
            .iter()
            .map(|c| {
                c.iter()
                    .enumerate()
                    .map(|(k, &i)| self.scheme.entity_maps[k].raw_of(i).to_string())
                    .collect()
            })
            .collect()
    }

    /// Write per-mode index maps as two-column delimited text
    /// (`raw_id,dense_index`), one file per mode under `dir`.
    pub fn write_index_maps(&self, dir: &Path) -> Result<()> {
        for (k, name) in self.scheme.mode_names.iter().enumerate() {
            let path = dir.join(format!("index_map_{name}.csv"));
            let mut f = std::fs::File::create(path)?;
            writeln!(f, "raw_id,dense_index")?;
            let map = &self.scheme.entity_maps[k];
            for i in 0..map.len() {
                writeln!(f, "{},{}", map.raw_of(i), i)?;
            }
        }
        Ok(())
    }
}

fn detect_delimiter(header: &str) -> u8 {
    if header.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

/// Ingest delimited records (comma or tab, auto-detected from the header)
/// into an [`ObservedTensor`]. One column per declared mode; duplicate
/// tuples collapse; rating columns outside [1,5] reject the record; time
/// columns are converted to week indices relative to `epoch_origin`.
pub fn ingest_tuples<R: Read>(
    source: R,
    decls: &[ModeDecl],
    epoch_origin: i64,
) -> Result<(ObservedTensor, IngestStats)> {
    let mut reader = BufReader::new(source);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let delim = detect_delimiter(&header);
    let header_cols: Vec<&str> = header.trim_end_matches(['\n', '\r']).split(delim as char).collect();

    let mut col_of_mode = Vec::with_capacity(decls.len());
    for d in decls {
        let col = header_cols
            .iter()
            .position(|c| *c == d.name)
            .ok_or_else(|| Error::MissingColumn(d.name.clone()))?;
        col_of_mode.push(col);
    }

    let mut maps: Vec<EntityMap> = decls
        .iter()
        .map(|d| {
            let mut m = EntityMap::default();
            if d.kind == ModeKind::Rating {
                for r in 1..=5 {
                    m.intern(&r.to_string());
                }
            }
            m
        })
        .collect();

    let mut csv_reader = csv::ReaderBuilder::new()
        .delimiter(delim)
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);

    let mut stats = IngestStats::default();
    let mut tuples: Vec<Vec<usize>> = Vec::new();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    for record in csv_reader.records() {
        let record = record?;
        stats.records += 1;
        let mut tuple = Vec::with_capacity(decls.len());
        let mut reject = false;
        for (k, d) in decls.iter().enumerate() {
            let field = record.get(col_of_mode[k]).unwrap_or("").trim();
            match d.kind {
                ModeKind::Entity => tuple.push(maps[k].intern(field)),
                ModeKind::Rating => match field.parse::<i64>() {
                    Ok(r) if (1..=5).contains(&r) => tuple.push((r - 1) as usize),
                    _ => {
                        reject = true;
                        break;
                    }
                },
                ModeKind::Time => match field.parse::<i64>() {
                    Ok(ts) => {
                        let week = (ts - epoch_origin).div_euclid(SECONDS_PER_WEEK);
                        tuple.push(maps[k].intern(&week.to_string()));
                    }
                    Err(_) => {
                        reject = true;
                        break;
                    }
                },
            }
        }
        if reject {
            stats.rejected += 1;
            continue;
        }
        if seen.insert(tuple.clone()) {
            tuples.push(tuple);
        } else {
            stats.duplicates += 1;
        }
    }
    if stats.rejected > 0 {
        eprintln!("warning: rejected {} records during ingestion", stats.rejected);
    }

    let cardinalities: Vec<usize> = decls
        .iter()
        .enumerate()
        .map(|(k, d)| if d.kind == ModeKind::Rating { 5 } else { maps[k].len() })
        .collect();
    let scheme = TensorScheme {
        mode_names: decls.iter().map(|d| d.name.clone()).collect(),
        cardinalities,
        entity_maps: maps,
    };
    Ok((ObservedTensor::new(scheme, tuples), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn decls2() -> Vec<ModeDecl> {
        vec![ModeDecl::entity("a"), ModeDecl::entity("b")]
    }

    #[test]
    fn duplicates_collapse() {
        let data = "a,b\nx,u\ny,v\nx,u\n";
        let (t, stats) = ingest_tuples(data.as_bytes(), &decls2(), 0).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(stats.duplicates, 1);
        assert_eq!(t.scheme.cardinalities, vec![2, 2]);
    }

    #[test]
    fn tab_delimited_auto_detected() {
        let data = "a\tb\nx\tu\n";
        let (t, _) = ingest_tuples(data.as_bytes(), &decls2(), 0).unwrap();
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn missing_column_named() {
        let data = "a,c\nx,u\n";
        let err = ingest_tuples(data.as_bytes(), &decls2(), 0).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "b"));
    }

    #[test]
    fn week_conversion() {
        let decls = vec![ModeDecl::entity("a"), ModeDecl { name: "t".into(), kind: ModeKind::Time }];
        let data = format!("a,t\nx,{}\nx,{}\n", 0, SECONDS_PER_WEEK);
        let (t, _) = ingest_tuples(data.as_bytes(), &decls, 0).unwrap();
        let map = &t.scheme.entity_maps[1];
        assert_eq!(map.index_of("0"), Some(0));
        assert_eq!(map.index_of("1"), Some(1));
    }

    #[test]
    fn rating_out_of_range_rejected() {
        let decls = vec![ModeDecl::entity("a"), ModeDecl { name: "r".into(), kind: ModeKind::Rating }];
        let data = "a,r\nx,5\ny,6\nz,0\n";
        let (t, stats) = ingest_tuples(data.as_bytes(), &decls, 0).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(stats.rejected, 2);
        assert_eq!(t.scheme.cardinalities[1], 5);
    }

    #[test]
    fn contains_observed_and_not() {
        let data = "a,b\nx,u\ny,v\n";
        let (t, _) = ingest_tuples(data.as_bytes(), &decls2(), 0).unwrap();
        assert!(t.contains(&[0, 0]));
        assert!(!t.contains(&[0, 1]));
    }

    #[test]
    fn minibatch_counts_and_negative_membership() {
        let data = "a,b\nx,u\ny,v\nz,w\n";
        let (t, _) = ingest_tuples(data.as_bytes(), &decls2(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = t.sample_minibatch(16, 1.0, &mut rng, 0).unwrap();
        assert_eq!(b.cells.len(), 32);
        for c in &b.cells {
            if c.y == 0 {
                assert!(!t.contains(&c.indices));
            } else {
                assert!(t.contains(&c.indices));
            }
        }
    }

    #[test]
    fn minibatch_positives_only_when_ratio_zero() {
        let data = "a,b\nx,u\n";
        let (t, _) = ingest_tuples(data.as_bytes(), &decls2(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = t.sample_minibatch(8, 0.0, &mut rng, 3).unwrap();
        assert_eq!(b.cells.len(), 8);
        assert!(b.cells.iter().all(|c| c.y == 1));
        assert_eq!(b.t, 3);
    }

    #[test]
    fn minibatch_deterministic_replay() {
        let data = "a,b\nx,u\ny,v\nz,w\n";
        let (t, _) = ingest_tuples(data.as_bytes(), &decls2(), 0).unwrap();
        let b1 = t
            .sample_minibatch(64, 1.0, &mut ChaCha8Rng::seed_from_u64(11), 5)
            .unwrap();
        let b2 = t
            .sample_minibatch(64, 1.0, &mut ChaCha8Rng::seed_from_u64(11), 5)
            .unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn empty_tensor_errors() {
        let (t, _) = ingest_tuples("a,b\n".as_bytes(), &decls2(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(t.sample_minibatch(4, 1.0, &mut rng, 0), Err(Error::EmptyTensor)));
    }

    #[test]
    fn export_is_set_identity() {
        let data = "a,b\nx,u\ny,v\nx,u\n";
        let (t, _) = ingest_tuples(data.as_bytes(), &decls2(), 0).unwrap();
        let mut exported = t.export_tuples();
        exported.sort();
        assert_eq!(
            exported,
            vec![
                vec!["x".to_string(), "u".to_string()],
                vec!["y".to_string(), "v".to_string()],
            ]
        );
    }
}
