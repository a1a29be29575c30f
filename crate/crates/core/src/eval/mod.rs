//! Evaluation harness: partition probes, leakage, orthonormality statistics,
//! interpolation, attribute transfer and 2-D projection.
//!
//! The metric functions take [`CodeSet`]s rather than a model so that
//! hand-built codes can be scored the same way as encoder output.

mod ap;
mod image;
mod interp;
mod pca;
mod probe;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::data::{encode_dataset, FactorDataset, Split};
use crate::disentangle::{encode_checkpoint, Checkpoint, ProseModel, TrainError};
use crate::linalg::{LinalgError, Matrix};
use crate::manifold::{stiefel_project, LatentBlocks, ManifoldError};

pub use ap::average_precision;
pub use image::{
    attribute_transfer_grid, dominant_channel, interpolation_strip, Image, ImageGrid,
    GRID_SEPARATOR,
};
pub use interp::{lerp_block, slerp_block, Interpolation, SLERP_ANGLE_EPS};
pub use pca::{pca_2d, Pca, PCA_ITERATIONS, PCA_TOLERANCE};
pub use probe::{LinearProbe, PROBE_ITERATIONS, PROBE_LEARNING_RATE};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("average precision is undefined without positives")]
    NoPositives,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("probe error: {0}")]
    Probe(String),
    #[error("zero-norm vector in interpolation")]
    ZeroNorm,
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] TrainError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Flattened latent codes (block-major, one example per row) with their
/// factor labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeSet {
    pub d: usize,
    pub k: usize,
    pub codes: Matrix,
    pub labels: Vec<Vec<usize>>,
}

impl CodeSet {
    pub fn new(d: usize, k: usize, codes: Matrix, labels: Vec<Vec<usize>>) -> Result<Self> {
        if codes.cols() != d * k || codes.rows() != labels.len() {
            return Err(EvalError::Shape(format!(
                "codes {:?} for d={d}, k={k} and {} labels",
                codes.shape(),
                labels.len()
            )));
        }
        Ok(Self { d, k, codes, labels })
    }

    /// Test-time codes of one split of `dataset`.
    pub fn from_model(model: &ProseModel, dataset: &FactorDataset, split: Split) -> Result<Self> {
        let idx = dataset.indices(split);
        let codes = model.codes(&dataset.batch(&idx))?;
        let labels = idx.iter().map(|&i| dataset.labels[i].clone()).collect();
        Self::new(model.config.d, model.config.k, codes, labels)
    }

    pub fn len(&self) -> usize {
        self.codes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.rows() == 0
    }

    /// Columns of the given partitions, concatenated in order.
    pub fn partitions(&self, which: &[usize]) -> Matrix {
        let d = self.d;
        Matrix::from_fn(self.len(), which.len() * d, |r, c| {
            self.codes.get(r, which[c / d] * d + c % d)
        })
    }

    pub fn factor_labels(&self, f: usize) -> Vec<usize> {
        self.labels.iter().map(|l| l[f]).collect()
    }

    /// Replaces every code by its nearest point on the Stiefel manifold.
    pub fn projected(&self) -> Result<Self> {
        let mut codes = self.codes.clone();
        for r in 0..codes.rows() {
            let z = LatentBlocks::from_flat(codes.row(r), self.d, self.k)?;
            stiefel_project(z.matrix())?.write_flat(codes.row_mut(r));
        }
        Ok(Self { codes, ..self.clone() })
    }
}

/// Mean test AP over classes of a probe trained on `train_x` for one factor.
/// Classes absent from the test split are skipped.
fn probe_map(
    train_x: &Matrix,
    train_y: &[usize],
    test_x: &Matrix,
    test_y: &[usize],
    classes: usize,
) -> Result<f64> {
    let probe = LinearProbe::fit(train_x, train_y, classes)?;
    let scores = probe.scores(test_x)?;
    let mut total = 0.0;
    let mut counted = 0;
    for c in 0..classes {
        let pos: Vec<bool> = test_y.iter().map(|&y| y == c).collect();
        if !pos.contains(&true) {
            continue;
        }
        let s: Vec<f64> = (0..scores.rows()).map(|r| scores.get(r, c)).collect();
        total += average_precision(&s, &pos)?;
        counted += 1;
    }
    if counted == 0 {
        return Err(EvalError::NoPositives);
    }
    Ok(total / counted as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapTable {
    /// `ap[partition][factor]`.
    pub ap: Vec<Vec<f64>>,
    /// `assignment[factor]` is the partition matched to that factor.
    pub assignment: Vec<usize>,
}

impl MapTable {
    pub fn matched(&self) -> Vec<f64> {
        self.assignment
            .iter()
            .enumerate()
            .map(|(f, &p)| self.ap[p][f])
            .collect()
    }

    pub fn mean_matched(&self) -> f64 {
        let m = self.matched();
        m.iter().sum::<f64>() / m.len().max(1) as f64
    }
}

fn check_pair(train: &CodeSet, test: &CodeSet, cardinalities: &[usize]) -> Result<()> {
    if train.d != test.d || train.k != test.k {
        return Err(EvalError::Shape("train and test codes differ in layout".into()));
    }
    for set in [train, test] {
        if set.is_empty() {
            return Err(EvalError::Shape("empty code set".into()));
        }
        if set.labels.iter().any(|l| l.len() != cardinalities.len()) {
            return Err(EvalError::Shape("label width differs from factor count".into()));
        }
    }
    Ok(())
}

/// Greedy matching without replacement: repeatedly takes the highest AP
/// among unmatched factors and unused partitions (ties: lowest partition,
/// then lowest factor). Factors left over once partitions run out take their
/// best partition outright.
pub fn greedy_assignment(ap: &[Vec<f64>]) -> Vec<usize> {
    let k = ap.len();
    let factors = ap.first().map_or(0, Vec::len);
    let mut assignment = vec![usize::MAX; factors];
    let mut used = vec![false; k];
    for _ in 0..factors.min(k) {
        let mut best: Option<(usize, usize)> = None;
        for (p, row) in ap.iter().enumerate() {
            if used[p] {
                continue;
            }
            for (f, &v) in row.iter().enumerate() {
                if assignment[f] != usize::MAX {
                    continue;
                }
                if best.is_none_or(|(bp, bf)| v > ap[bp][bf]) {
                    best = Some((p, f));
                }
            }
        }
        let (p, f) = best.expect("free pair exists");
        assignment[f] = p;
        used[p] = true;
    }
    for (f, a) in assignment.iter_mut().enumerate() {
        if *a == usize::MAX {
            *a = (0..k).fold(0, |b, p| if ap[p][f] > ap[b][f] { p } else { b });
        }
    }
    assignment
}

/// Probes every (partition, factor) pair and matches factors to partitions.
pub fn map_per_partition(train: &CodeSet, test: &CodeSet, cardinalities: &[usize]) -> Result<MapTable> {
    check_pair(train, test, cardinalities)?;
    let mut ap = Vec::with_capacity(train.k);
    for p in 0..train.k {
        let tx = train.partitions(&[p]);
        let sx = test.partitions(&[p]);
        let row = cardinalities
            .iter()
            .enumerate()
            .map(|(f, &card)| probe_map(&tx, &train.factor_labels(f), &sx, &test.factor_labels(f), card))
            .collect::<Result<Vec<_>>>()?;
        ap.push(row);
    }
    let assignment = greedy_assignment(&ap);
    Ok(MapTable { ap, assignment })
}

/// Test accuracy of a probe predicting `factor` from every partition except
/// `excluded`.
pub fn leakage_score(
    train: &CodeSet,
    test: &CodeSet,
    cardinalities: &[usize],
    factor: usize,
    excluded: usize,
) -> Result<f64> {
    check_pair(train, test, cardinalities)?;
    if factor >= cardinalities.len() || excluded >= train.k {
        return Err(EvalError::Shape(format!(
            "factor {factor} / partition {excluded} out of range"
        )));
    }
    let keep: Vec<usize> = (0..train.k).filter(|&p| p != excluded).collect();
    let probe = LinearProbe::fit(
        &train.partitions(&keep),
        &train.factor_labels(factor),
        cardinalities[factor],
    )?;
    let pred = probe.predict(&test.partitions(&keep))?;
    let hits = pred
        .iter()
        .zip(test.factor_labels(factor))
        .filter(|(p, y)| **p == *y)
        .count();
    Ok(hits as f64 / test.len() as f64)
}

/// Mean of `‖ZᵀZ − I‖_F` (the norm, not its square) over the set.
pub fn orth_deviation(codes: &CodeSet) -> Result<f64> {
    if codes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in 0..codes.len() {
        total += LatentBlocks::from_flat(codes.codes.row(r), codes.d, codes.k)?.orth_deviation();
    }
    Ok(total / codes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalMetadata {
    pub checkpoint_id: String,
    pub dataset_id: String,
    pub seed: u64,
    pub projected: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalOptions {
    pub seed: u64,
    /// Project codes onto the Stiefel manifold before scoring (diagnostic).
    pub projected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub factor_names: Vec<String>,
    pub cardinalities: Vec<usize>,
    pub map_table: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub leakage: Vec<f64>,
    pub mean_orth_deviation: f64,
    pub metadata: EvalMetadata,
}

/// Short identifier of a serialized container: the CRC32 of everything
/// before its checksum trailer, as 8 hex digits. (Hashing the trailer too
/// would give the same constant for every container.)
pub fn content_id(container: &[u8]) -> String {
    let body = &container[..container.len().saturating_sub(4)];
    format!("{:08x}", crc32fast::hash(body))
}

impl EvalReport {
    pub fn matched_map(&self) -> Vec<f64> {
        self.assignment
            .iter()
            .enumerate()
            .map(|(f, &p)| self.map_table[p][f])
            .collect()
    }

    pub fn mean_matched_map(&self) -> f64 {
        mean(&self.matched_map())
    }

    pub fn mean_leakage(&self) -> f64 {
        mean(&self.leakage)
    }

    pub fn map_csv(&self) -> String {
        let mut s = String::from("partition");
        for n in &self.factor_names {
            write!(s, ",{n}").unwrap();
        }
        s.push('\n');
        for (p, row) in self.map_table.iter().enumerate() {
            write!(s, "{p}").unwrap();
            for v in row {
                write!(s, ",{v:?}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn assignment_csv(&self) -> String {
        let mut s = String::from("factor,partition,ap\n");
        for (f, (n, v)) in self.factor_names.iter().zip(self.matched_map()).enumerate() {
            writeln!(s, "{n},{},{v:?}", self.assignment[f]).unwrap();
        }
        s
    }

    pub fn leakage_csv(&self) -> String {
        let mut s = String::from("factor,excluded_partition,accuracy,chance\n");
        for (f, n) in self.factor_names.iter().enumerate() {
            writeln!(
                s,
                "{n},{},{:?},{:?}",
                self.assignment[f],
                self.leakage[f],
                1.0 / self.cardinalities[f] as f64
            )
            .unwrap();
        }
        s
    }

    pub fn summary(&self) -> String {
        let m = &self.metadata;
        let mut s = String::new();
        writeln!(s, "checkpoint {}", m.checkpoint_id).unwrap();
        writeln!(s, "dataset {}", m.dataset_id).unwrap();
        writeln!(s, "seed {}", m.seed).unwrap();
        writeln!(s, "projected {}", m.projected).unwrap();
        writeln!(s, "mean_orth_deviation {:.6}", self.mean_orth_deviation).unwrap();
        writeln!(s, "mean_matched_map {:.4}", self.mean_matched_map()).unwrap();
        writeln!(s, "mean_leakage {:.4}", self.mean_leakage()).unwrap();
        for (f, n) in self.factor_names.iter().enumerate() {
            writeln!(
                s,
                "  {n:<8} partition {} map {:.4} leakage {:.4} (chance {:.4})",
                self.assignment[f],
                self.map_table[self.assignment[f]][f],
                self.leakage[f],
                1.0 / self.cardinalities[f] as f64
            )
            .unwrap();
        }
        s
    }

    /// Writes `map.csv`, `assignment.csv`, `leakage.csv` and `summary.txt`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        for (name, body) in [
            ("map.csv", self.map_csv()),
            ("assignment.csv", self.assignment_csv()),
            ("leakage.csv", self.leakage_csv()),
            ("summary.txt", self.summary()),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|source| EvalError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Scores already-extracted train/test codes.
pub fn evaluate_codes(
    train: &CodeSet,
    test: &CodeSet,
    dataset: &FactorDataset,
    metadata: EvalMetadata,
) -> Result<EvalReport> {
    let cards: Vec<usize> = dataset.spec.factors.iter().map(|f| f.cardinality).collect();
    let (train, test) = if metadata.projected {
        (train.projected()?, test.projected()?)
    } else {
        (train.clone(), test.clone())
    };
    let table = map_per_partition(&train, &test, &cards)?;
    let leakage = (0..cards.len())
        .map(|f| leakage_score(&train, &test, &cards, f, table.assignment[f]))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        factor_names: dataset.spec.factors.iter().map(|f| f.name.clone()).collect(),
        cardinalities: cards,
        map_table: table.ap,
        assignment: table.assignment,
        leakage,
        mean_orth_deviation: orth_deviation(&test)?,
        metadata,
    })
}

/// Full report for a checkpoint on a labelled dataset.
pub fn evaluate(ckpt: &Checkpoint, dataset: &FactorDataset, options: EvalOptions) -> Result<EvalReport> {
    let train = CodeSet::from_model(&ckpt.model, dataset, Split::Train)?;
    let test = CodeSet::from_model(&ckpt.model, dataset, Split::Test)?;
    let metadata = EvalMetadata {
        checkpoint_id: content_id(&encode_checkpoint(ckpt)),
        dataset_id: content_id(&encode_dataset(dataset)),
        seed: options.seed,
        projected: options.projected,
    };
    evaluate_codes(&train, &test, dataset, metadata)
}
