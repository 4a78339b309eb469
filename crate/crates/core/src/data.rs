//! Paired EEG/face feature datasets: a synthetic generator, the
//! labeled/unlabeled/test split, and the delimited feature-file format.
//!
//! Feature files are UTF-8 CSV with the header
//! `id,split,label[,subject],eeg_0..eeg_{p-1},face_0..face_{q-1}`.
//! `split` is one of `labeled`, `unlabeled`, `test` or empty; an empty
//! `label` means the sample has no stored label.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::Tensor;
use crate::pool::{PoolError, SamplePool};
use crate::seeding::{self, Stream};
use crate::{ClassLabel, SampleId};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("missing column {0}")]
    MissingColumn(String),
    #[error("unexpected column {0}")]
    UnexpectedColumn(String),
    #[error("record {id}: {what} width {found}, expected {expected}")]
    WidthDrift {
        id: SampleId,
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("ids must be unique and dense in 0..{n}: {detail}")]
    Ids { n: usize, detail: String },
    #[error("invalid split fractions: {0}")]
    Fractions(String),
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("sample {0} needs a label but has none")]
    MissingLabel(SampleId),
    #[error("sample {0} has no split tag")]
    MissingSplit(SampleId),
    #[error("label {label} of sample {id} out of range for {classes} classes")]
    LabelOutOfRange {
        id: SampleId,
        label: ClassLabel,
        classes: usize,
    },
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    /// Part of the initial labeled pool.
    Labeled,
    Unlabeled,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Labeled => "labeled",
            SplitTag::Unlabeled => "unlabeled",
            SplitTag::Test => "test",
        })
    }
}

impl FromStr for SplitTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "labeled" | "labeled-init" => Ok(SplitTag::Labeled),
            "unlabeled" => Ok(SplitTag::Unlabeled),
            "test" => Ok(SplitTag::Test),
            other => Err(format!("unknown split tag {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: SampleId,
    pub x_eeg: Vec<f64>,
    pub x_face: Vec<f64>,
    pub label: Option<ClassLabel>,
    pub split: Option<SplitTag>,
    pub subject: Option<String>,
}

/// Records indexed by id (`records[i].id == i`), with fixed widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    d_eeg: usize,
    d_face: usize,
    classes: usize,
    records: Vec<FeatureRecord>,
}

impl Dataset {
    /// Validates widths, labels and ids, then orders records by id.
    pub fn new(d_eeg: usize, d_face: usize, classes: usize, mut records: Vec<FeatureRecord>) -> Result<Self, DataError> {
        records.sort_by_key(|r| r.id);
        let n = records.len();
        for (i, r) in records.iter().enumerate() {
            if r.id != i as SampleId {
                let detail = if i > 0 && records[i - 1].id == r.id {
                    format!("duplicate id {}", r.id)
                } else {
                    format!("expected id {i}, found {}", r.id)
                };
                return Err(DataError::Ids { n, detail });
            }
            if r.x_eeg.len() != d_eeg {
                return Err(DataError::WidthDrift {
                    id: r.id,
                    what: "eeg",
                    expected: d_eeg,
                    found: r.x_eeg.len(),
                });
            }
            if r.x_face.len() != d_face {
                return Err(DataError::WidthDrift {
                    id: r.id,
                    what: "face",
                    expected: d_face,
                    found: r.x_face.len(),
                });
            }
            if let Some(label) = r.label {
                if label >= classes {
                    return Err(DataError::LabelOutOfRange {
                        id: r.id,
                        label,
                        classes,
                    });
                }
            }
        }
        Ok(Self {
            d_eeg,
            d_face,
            classes,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn d_eeg(&self) -> usize {
        self.d_eeg
    }

    pub fn d_face(&self) -> usize {
        self.d_face
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn record(&self, id: SampleId) -> &FeatureRecord {
        &self.records[id as usize]
    }

    /// Stored labels of every record that has one.
    pub fn labels(&self) -> BTreeMap<SampleId, ClassLabel> {
        self.records
            .iter()
            .filter_map(|r| r.label.map(|l| (r.id, l)))
            .collect()
    }

    pub fn eeg_matrix(&self, ids: &[SampleId]) -> Tensor {
        let data = ids.iter().flat_map(|&i| self.record(i).x_eeg.iter().copied()).collect();
        Tensor::new(ids.len(), self.d_eeg, data).expect("validated widths")
    }

    pub fn face_matrix(&self, ids: &[SampleId]) -> Tensor {
        let data = ids.iter().flat_map(|&i| self.record(i).x_face.iter().copied()).collect();
        Tensor::new(ids.len(), self.d_face, data).expect("validated widths")
    }

    /// Copy with every face feature set to zero.
    pub fn without_face(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            r.x_face.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    /// Copy with split tags taken from `pool`.
    pub fn with_split_tags(&self, pool: &SamplePool) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            r.split = if pool.labeled().contains_key(&r.id) {
                Some(SplitTag::Labeled)
            } else if pool.unlabeled().contains(&r.id) {
                Some(SplitTag::Unlabeled)
            } else if pool.test().contains(&r.id) {
                Some(SplitTag::Test)
            } else {
                None
            };
        }
        out
    }

    /// Digest of the numeric content; used to detect a changed data source on resume.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.d_eeg as u64).to_le_bytes());
        h.update((self.d_face as u64).to_le_bytes());
        h.update((self.classes as u64).to_le_bytes());
        for r in &self.records {
            h.update(r.id.to_le_bytes());
            for v in r.x_eeg.iter().chain(&r.x_face) {
                h.update(v.to_bits().to_le_bytes());
            }
            h.update(r.label.map_or(u64::MAX, |l| l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub d_eeg: usize,
    pub d_face: usize,
    pub classes: usize,
    /// Minimum distance between class prototypes.
    pub margin: f64,
    pub eeg_noise: f64,
    pub face_noise: f64,
    /// Probability that the face vector comes from a different class.
    pub inconsistency_rate: f64,
    /// Probability that the stored label is replaced by a wrong class.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            d_eeg: 16,
            d_face: 16,
            classes: 2,
            margin: 2.0,
            eeg_noise: 0.8,
            face_noise: 0.4,
            inconsistency_rate: 0.1,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.n_samples == 0 || self.d_eeg == 0 || self.d_face == 0 {
            return bad("sample count and widths must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        for (name, rate) in [("inconsistency_rate", self.inconsistency_rate), ("label_noise", self.label_noise)] {
            if !(0.0..1.0).contains(&rate) {
                return bad(format!("{name} must lie in [0, 1), got {rate}"));
            }
        }
        for (name, v) in [("eeg_noise", self.eeg_noise), ("face_noise", self.face_noise), ("margin", self.margin)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// A generated dataset plus the latent facts behind each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// Class whose prototype produced the EEG vector.
    pub true_class: Vec<ClassLabel>,
    /// Class whose prototype produced the face vector.
    pub face_class: Vec<ClassLabel>,
}

fn sample_normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Random orthogonal `d×d` map (Gram-Schmidt on a Gaussian matrix).
fn random_rotation(rng: &mut impl Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = gaussian_vec(rng, d);
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// Centered class prototypes whose closest pair is exactly `margin` apart.
fn prototypes(rng: &mut impl Rng, classes: usize, d: usize, margin: f64) -> Vec<Vec<f64>> {
    let mut protos: Vec<Vec<f64>> = (0..classes).map(|_| gaussian_vec(rng, d)).collect();
    let mut centre = vec![0.0; d];
    for p in &protos {
        centre.iter_mut().zip(p).for_each(|(c, x)| *c += x / classes as f64);
    }
    for p in &mut protos {
        p.iter_mut().zip(&centre).for_each(|(x, c)| *x -= c);
    }
    let mut closest = f64::INFINITY;
    for i in 0..classes {
        for j in i + 1..classes {
            let dist = protos[i]
                .iter()
                .zip(&protos[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            closest = closest.min(dist);
        }
    }
    let factor = if closest > 0.0 { margin / closest } else { 0.0 };
    for p in &mut protos {
        p.iter_mut().for_each(|x| *x *= factor);
    }
    protos
}

fn apply(map: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    map.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Draws a synthetic two-modality dataset.
///
/// Each sample draws a class `u`; the EEG vector is `A_e·e(u)` plus
/// Gaussian noise. With probability `inconsistency_rate` the face path
/// uses another class `u′ ≠ u`; the face vector is `A_f·f(u or u′)` plus
/// noise. `A_e`, `A_f` are seeded random rotations and `e`, `f` are
/// prototypes separated by `margin`.
pub fn generate(cfg: &SynthConfig) -> Result<SyntheticDataset, DataError> {
    cfg.validate()?;
    let mut structure = seeding::rng(cfg.seed, Stream::Generator, 0);
    let eeg_protos = prototypes(&mut structure, cfg.classes, cfg.d_eeg, cfg.margin);
    let face_protos = prototypes(&mut structure, cfg.classes, cfg.d_face, cfg.margin);
    let eeg_map = random_rotation(&mut structure, cfg.d_eeg);
    let face_map = random_rotation(&mut structure, cfg.d_face);
    let eeg_means: Vec<_> = eeg_protos.iter().map(|p| apply(&eeg_map, p)).collect();
    let face_means: Vec<_> = face_protos.iter().map(|p| apply(&face_map, p)).collect();

    let mut rng = seeding::rng(cfg.seed, Stream::Generator, 1);
    let mut label_rng = seeding::rng(cfg.seed, Stream::Generator, 2);
    let mut records = Vec::with_capacity(cfg.n_samples);
    let mut true_class = Vec::with_capacity(cfg.n_samples);
    let mut face_class = Vec::with_capacity(cfg.n_samples);
    for id in 0..cfg.n_samples {
        let u = rng.random_range(0..cfg.classes);
        let face_u = if rng.random::<f64>() < cfg.inconsistency_rate {
            let other = rng.random_range(0..cfg.classes - 1);
            if other >= u {
                other + 1
            } else {
                other
            }
        } else {
            u
        };
        let x_eeg = eeg_means[u]
            .iter()
            .map(|m| m + cfg.eeg_noise * sample_normal(&mut rng))
            .collect::<Vec<f64>>();
        let x_face = face_means[face_u]
            .iter()
            .map(|m| m + cfg.face_noise * sample_normal(&mut rng))
            .collect::<Vec<f64>>();
        let label = if label_rng.random::<f64>() < cfg.label_noise {
            let other = label_rng.random_range(0..cfg.classes - 1);
            if other >= u {
                other + 1
            } else {
                other
            }
        } else {
            u
        };
        true_class.push(u);
        face_class.push(face_u);
        records.push(FeatureRecord {
            id: id as SampleId,
            x_eeg,
            x_face,
            label: Some(label),
            split: None,
            subject: None,
        });
    }
    Ok(SyntheticDataset {
        dataset: Dataset::new(cfg.d_eeg, cfg.d_face, cfg.classes, records)?,
        true_class,
        face_class,
    })
}

/// Shares of the dataset assigned to the labeled, unlabeled and test parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub labeled: f64,
    pub unlabeled: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            labeled: 0.10,
            unlabeled: 0.70,
            test: 0.20,
        }
    }
}

impl SplitFractions {
    pub fn new(labeled: f64, unlabeled: f64, test: f64) -> Self {
        Self {
            labeled,
            unlabeled,
            test,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let parts = [self.labeled, self.unlabeled, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(DataError::Fractions(format!("{parts:?} outside [0, 1]")));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DataError::Fractions(format!("{parts:?} sum to {total}")));
        }
        Ok(())
    }

    /// `(labeled, unlabeled, test)` counts for `n` samples.
    pub fn counts(&self, n: usize) -> Result<(usize, usize, usize), DataError> {
        self.validate()?;
        let n_test = (self.test * n as f64).round() as usize;
        let n_lab = (self.labeled * n as f64).round() as usize;
        let n_unl = n
            .checked_sub(n_test + n_lab)
            .ok_or_else(|| DataError::Fractions(format!("parts exceed {n} samples")))?;
        // The unlabeled part may be empty only when asked for explicitly
        // (full supervision); labeled and test parts never may.
        let empty = [
            ("labeled", n_lab, false),
            ("unlabeled", n_unl, self.unlabeled == 0.0),
            ("test", n_test, false),
        ];
        for (name, count, allowed) in empty {
            if count == 0 && !allowed {
                return Err(DataError::Fractions(format!("{name} part would be empty for {n} samples")));
            }
        }
        Ok((n_lab, n_unl, n_test))
    }
}

/// Uniform random partition. The test part takes the first slots of the
/// shuffled order, so runs that share a seed and test fraction share the
/// same test set whatever the labeled/unlabeled proportions.
pub fn split(dataset: &Dataset, fractions: SplitFractions, seed: u64) -> Result<SamplePool, DataError> {
    let (n_lab, _, n_test) = fractions.counts(dataset.len())?;
    let mut order: Vec<SampleId> = (0..dataset.len() as SampleId).collect();
    order.shuffle(&mut seeding::rng(seed, Stream::Split, 0));
    let test: BTreeSet<_> = order[..n_test].iter().copied().collect();
    let mut labeled = BTreeMap::new();
    for &id in &order[n_test..n_test + n_lab] {
        let label = dataset.record(id).label.ok_or(DataError::MissingLabel(id))?;
        labeled.insert(id, label);
    }
    let unlabeled = order[n_test + n_lab..].iter().copied().collect();
    Ok(SamplePool::new(dataset.len(), labeled, unlabeled, test)?)
}

/// Partition taken from the records' own split tags.
pub fn split_from_tags(dataset: &Dataset) -> Result<SamplePool, DataError> {
    let mut labeled = BTreeMap::new();
    let mut unlabeled = BTreeSet::new();
    let mut test = BTreeSet::new();
    for r in dataset.records() {
        match r.split.ok_or(DataError::MissingSplit(r.id))? {
            SplitTag::Labeled => {
                labeled.insert(r.id, r.label.ok_or(DataError::MissingLabel(r.id))?);
            }
            SplitTag::Unlabeled => {
                unlabeled.insert(r.id);
            }
            SplitTag::Test => {
                r.label.ok_or(DataError::MissingLabel(r.id))?;
                test.insert(r.id);
            }
        }
    }
    Ok(SamplePool::new(dataset.len(), labeled, unlabeled, test)?)
}

/// How the `label` column is read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelEncoding {
    /// Integer class indices in `0..classes`.
    ClassIndex { classes: usize },
    /// Self-assessment scores; `score >= threshold` is class 1, else class 0.
    Valence { threshold: f64 },
}

impl Default for LabelEncoding {
    fn default() -> Self {
        LabelEncoding::ClassIndex { classes: 2 }
    }
}

impl LabelEncoding {
    pub fn classes(&self) -> usize {
        match self {
            LabelEncoding::ClassIndex { classes } => *classes,
            LabelEncoding::Valence { .. } => 2,
        }
    }

    fn parse(&self, field: &str) -> Result<ClassLabel, String> {
        match self {
            LabelEncoding::ClassIndex { classes } => {
                let label: ClassLabel = field.parse().map_err(|_| format!("label {field:?} is not a class index"))?;
                if label >= *classes {
                    return Err(format!("label {label} out of range for {classes} classes"));
                }
                Ok(label)
            }
            LabelEncoding::Valence { threshold } => {
                let score: f64 = field.parse().map_err(|_| format!("valence {field:?} is not a number"))?;
                if !score.is_finite() {
                    return Err(format!("valence {field:?} is not finite"));
                }
                Ok(usize::from(score >= *threshold))
            }
        }
    }
}

struct Columns {
    id: usize,
    split: usize,
    label: usize,
    subject: Option<usize>,
    eeg: Vec<usize>,
    face: Vec<usize>,
}

fn resolve_columns(headers: &csv::StringRecord) -> Result<Columns, DataError> {
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    let need = |name: &str| index.get(name).copied().ok_or_else(|| DataError::MissingColumn(name.to_string()));
    let numbered = |prefix: &str| -> Result<Vec<usize>, DataError> {
        let count = headers.iter().filter(|h| h.trim().starts_with(prefix)).count();
        if count == 0 {
            return Err(DataError::MissingColumn(format!("{prefix}0")));
        }
        (0..count).map(|i| need(&format!("{prefix}{i}"))).collect()
    };
    let cols = Columns {
        id: need("id")?,
        split: need("split")?,
        label: need("label")?,
        subject: index.get("subject").copied(),
        eeg: numbered("eeg_")?,
        face: numbered("face_")?,
    };
    let known = 3 + usize::from(cols.subject.is_some()) + cols.eeg.len() + cols.face.len();
    if known != headers.len() {
        let used: BTreeSet<usize> = [cols.id, cols.split, cols.label]
            .into_iter()
            .chain(cols.subject)
            .chain(cols.eeg.iter().copied())
            .chain(cols.face.iter().copied())
            .collect();
        let extra = (0..headers.len()).find(|i| !used.contains(i)).unwrap_or(0);
        return Err(DataError::UnexpectedColumn(headers[extra].to_string()));
    }
    Ok(cols)
}

/// Reads a feature file from any reader.
pub fn read_features(reader: impl Read, encoding: LabelEncoding) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let cols = resolve_columns(rdr.headers()?)?;
    let width = rdr.headers()?.len();
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let fail = |message: String| DataError::Row { line, message };
        if row.len() != width {
            return Err(fail(format!("expected {width} fields, found {}", row.len())));
        }
        let field = |i: usize| row[i].trim();
        let id: SampleId = field(cols.id).parse().map_err(|_| fail(format!("id {:?} is not an integer", field(cols.id))))?;
        let split = match field(cols.split) {
            "" => None,
            s => Some(s.parse::<SplitTag>().map_err(fail)?),
        };
        let label = match field(cols.label) {
            "" => None,
            s => Some(encoding.parse(s).map_err(fail)?),
        };
        let parse_vec = |idx: &[usize], name: &str| -> Result<Vec<f64>, DataError> {
            idx.iter()
                .enumerate()
                .map(|(k, &i)| {
                    let v: f64 = field(i)
                        .parse()
                        .map_err(|_| fail(format!("{name}_{k} value {:?} is not a number", field(i))))?;
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(fail(format!("{name}_{k} is not finite")))
                    }
                })
                .collect()
        };
        records.push(FeatureRecord {
            id,
            x_eeg: parse_vec(&cols.eeg, "eeg")?,
            x_face: parse_vec(&cols.face, "face")?,
            label,
            split,
            subject: cols.subject.map(|i| field(i).to_string()).filter(|s| !s.is_empty()),
        });
    }
    Dataset::new(cols.eeg.len(), cols.face.len(), encoding.classes(), records)
}

pub fn ingest(path: &Path, encoding: LabelEncoding) -> Result<Dataset, DataError> {
    read_features(std::fs::File::open(path)?, encoding)
}

/// Writes the feature-file format (class-index labels).
pub fn write_features(dataset: &Dataset, writer: impl Write) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let with_subject = dataset.records.iter().any(|r| r.subject.is_some());
    let mut header = vec!["id".to_string(), "split".into(), "label".into()];
    if with_subject {
        header.push("subject".into());
    }
    header.extend((0..dataset.d_eeg).map(|i| format!("eeg_{i}")));
    header.extend((0..dataset.d_face).map(|i| format!("face_{i}")));
    w.write_record(&header)?;
    for r in &dataset.records {
        let mut row = vec![
            r.id.to_string(),
            r.split.map(|s| s.to_string()).unwrap_or_default(),
            r.label.map(|l| l.to_string()).unwrap_or_default(),
        ];
        if with_subject {
            row.push(r.subject.clone().unwrap_or_default());
        }
        row.extend(r.x_eeg.iter().chain(&r.x_face).map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    write_features(dataset, std::io::BufWriter::new(std::fs::File::create(path)?))
}
