//! Corpus loading, label repair and the deterministic train/test split.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rules::{N_RULES, RULES};

/// The one clip in the public corpus that ships without a tight-noon label.
pub const IMPUTED_CLIP: &str = "S22_6";
/// Value assigned to the missing label, inferred from the speaker's other recordings.
pub const IMPUTED_VALUE: u8 = 1;
pub const TRAIN_FRACTION: f64 = 0.8;
pub const MIN_SPLIT_RECORDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RuleLabels {
    pub separate_stretching: u8,
    pub tight_noon: u8,
    pub hide: u8,
}

impl RuleLabels {
    pub fn from_array(v: [u8; N_RULES]) -> Result<Self> {
        if v.iter().any(|&x| x > 1) {
            return Err(Error::Invalid(format!("labels must be 0 or 1, got {v:?}")));
        }
        Ok(Self {
            separate_stretching: v[0],
            tight_noon: v[1],
            hide: v[2],
        })
    }

    /// Labels in rule order.
    pub fn to_array(self) -> [u8; N_RULES] {
        [self.separate_stretching, self.tight_noon, self.hide]
    }

    /// The joint label triple packed into three bits, used as the split stratum.
    pub fn stratum(self) -> u8 {
        self.separate_stretching << 2 | self.tight_noon << 1 | self.hide
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub speaker_id: String,
    pub audio_path: PathBuf,
    pub labels: RuleLabels,
    /// Set when a missing label was filled in rather than read from the table.
    pub imputed: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IngestOptions {
    /// Drop the clip with the imputed label instead of keeping it.
    pub exclude_imputed: bool,
}

pub fn speaker_id(clip_id: &str) -> &str {
    clip_id.split('_').next().unwrap_or(clip_id)
}

/// Standard corpus layout: `<root>/labels.csv` and `<root>/audio/<clip_id>.wav`.
pub fn labels_path(root: &Path) -> PathBuf {
    root.join("labels.csv")
}

pub fn audio_path(root: &Path, clip_id: &str) -> PathBuf {
    root.join("audio").join(format!("{clip_id}.wav"))
}

const HEADER: [&str; 4] = ["clip_id", "separate_stretching", "tight_noon", "hide"];

/// Reads the labels table and resolves every row to an audio file under `root`.
/// Records keep the row order of the table.
pub fn load_corpus(root: &Path, labels_file: &Path, opts: IngestOptions) -> Result<Vec<ClipRecord>> {
    let labels_err = |msg: String| Error::Labels {
        path: labels_file.to_path_buf(),
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(labels_file)
        .map_err(|e| labels_err(e.to_string()))?;
    let header = reader.headers().map_err(|e| labels_err(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(labels_err(format!(
            "expected header `{}`, found `{}`",
            HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut missing = Vec::new();
    for (i, row) in reader.records().enumerate() {
        // Line 1 is the header.
        let line = i + 2;
        let row = row.map_err(|e| labels_err(format!("line {line}: {e}")))?;
        let clip_id = row[0].to_string();
        if clip_id.is_empty() {
            return Err(labels_err(format!("line {line}: empty clip_id")));
        }
        if !seen.insert(clip_id.clone()) {
            return Err(labels_err(format!("line {line}: duplicate clip_id {clip_id}")));
        }
        let mut labels = [0u8; N_RULES];
        let mut imputed = false;
        for (j, rule) in RULES.iter().enumerate() {
            labels[j] = match &row[j + 1] {
                "0" => 0,
                "1" => 1,
                "" if clip_id == IMPUTED_CLIP && rule.column == "tight_noon" => {
                    imputed = true;
                    IMPUTED_VALUE
                }
                "" => {
                    return Err(labels_err(format!(
                        "line {line}: missing {} label for {clip_id}",
                        rule.column
                    )))
                }
                other => {
                    return Err(labels_err(format!(
                        "line {line}: unparseable {} label {other:?}",
                        rule.column
                    )))
                }
            };
        }
        if imputed {
            tracing::warn!(clip_id, "missing tight_noon label imputed to {IMPUTED_VALUE}");
            if opts.exclude_imputed {
                continue;
            }
        }
        let path = audio_path(root, &clip_id);
        if !path.is_file() {
            missing.push(clip_id.clone());
        }
        records.push(ClipRecord {
            speaker_id: speaker_id(&clip_id).to_string(),
            clip_id,
            audio_path: path,
            labels: RuleLabels::from_array(labels)?,
            imputed,
        });
    }
    if !missing.is_empty() {
        return Err(Error::MissingAudio(missing));
    }
    if let Ok(dist) = class_distribution(&records) {
        tracing::info!(
            clips = records.len(),
            neg_mad = dist[0],
            neg_ghunnah = dist[1],
            neg_ikhfaa = dist[2],
            "corpus loaded"
        );
    }
    Ok(records)
}

/// Writes records back out in the labels-table format.
pub fn write_labels(records: &[ClipRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(HEADER).map_err(|e| csv_io(path, e))?;
    for r in records {
        let l = r.labels.to_array();
        w.write_record([
            r.clip_id.as_str(),
            &l[0].to_string(),
            &l[1].to_string(),
            &l[2].to_string(),
        ])
        .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Fraction of label-0 clips for each rule.
pub fn class_distribution(records: &[ClipRecord]) -> Result<[f64; N_RULES]> {
    if records.is_empty() {
        return Err(Error::Invalid("class distribution of an empty corpus".into()));
    }
    let mut zeros = [0usize; N_RULES];
    for r in records {
        for (z, l) in zeros.iter_mut().zip(r.labels.to_array()) {
            *z += usize::from(l == 0);
        }
    }
    Ok(zeros.map(|z| z as f64 / records.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Test,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ClipRecord>,
    pub test: Vec<ClipRecord>,
    pub seed: u64,
}

/// Number of training items for a corpus of `n`.
pub fn train_size(n: usize) -> usize {
    (n as f64 * TRAIN_FRACTION).floor() as usize
}

/// Stratified 80/20 split on the joint label triple.
///
/// Each stratum first receives `floor(0.8 * n_s)` training items; the remaining
/// training slots go to the strata with the largest fractional remainders, so
/// the total is exactly `floor(0.8 * N)` and every stratum is within one item
/// of 80 %. Membership within a stratum is a seeded shuffle. Both subsets keep
/// the input order.
pub fn split_dataset(records: &[ClipRecord], seed: u64) -> Result<DatasetSplit> {
    if records.len() < MIN_SPLIT_RECORDS {
        return Err(Error::Invalid(format!(
            "need at least {MIN_SPLIT_RECORDS} records to split, got {}",
            records.len()
        )));
    }
    let mut strata: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        strata.entry(r.labels.stratum()).or_default().push(i);
    }

    let mut quota: BTreeMap<u8, usize> = BTreeMap::new();
    let mut remainders = Vec::new();
    for (&key, members) in &strata {
        let exact = members.len() as f64 * TRAIN_FRACTION;
        quota.insert(key, exact.floor() as usize);
        remainders.push((exact - exact.floor(), key));
    }
    let mut spare = train_size(records.len()) - quota.values().sum::<usize>();
    // Largest remainder first; ties broken by stratum key for determinism.
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, key) in remainders {
        if spare == 0 {
            break;
        }
        *quota.get_mut(&key).expect("stratum present") += 1;
        spare -= 1;
    }

    let mut in_train = vec![false; records.len()];
    for (&key, members) in &strata {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(key) << 56));
        let mut order = members.clone();
        order.shuffle(&mut rng);
        for &i in &order[..quota[&key]] {
            in_train[i] = true;
        }
    }
    let (train, test): (Vec<_>, Vec<_>) = records
        .iter()
        .zip(&in_train)
        .partition(|(_, &t)| t);
    Ok(DatasetSplit {
        train: train.into_iter().map(|(r, _)| r.clone()).collect(),
        test: test.into_iter().map(|(r, _)| r.clone()).collect(),
        seed,
    })
}

impl DatasetSplit {
    /// `(clip_id, subset)` rows in corpus order of each subset, train first.
    pub fn manifest_rows(&self) -> Vec<(String, Subset)> {
        self.train
            .iter()
            .map(|r| (r.clip_id.clone(), Subset::Train))
            .chain(self.test.iter().map(|r| (r.clip_id.clone(), Subset::Test)))
            .collect()
    }

    pub fn manifest_csv(&self) -> String {
        let mut out = String::from("clip_id,subset\n");
        for (id, s) in self.manifest_rows() {
            out.push_str(&format!("{id},{}\n", s.as_str()));
        }
        out
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.manifest_csv()).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds a split from a manifest, looking records up by clip id.
    pub fn from_manifest(records: &[ClipRecord], path: &Path, seed: u64) -> Result<Self> {
        let by_id: BTreeMap<&str, &ClipRecord> =
            records.iter().map(|r| (r.clip_id.as_str(), r)).collect();
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut split = DatasetSplit {
            train: Vec::new(),
            test: Vec::new(),
            seed,
        };
        for row in reader.deserialize::<(String, Subset)>() {
            let (id, subset) = row.map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
            let rec = by_id.get(id.as_str()).ok_or_else(|| {
                Error::Invalid(format!("{}: unknown clip {id}", path.display()))
            })?;
            match subset {
                Subset::Train => split.train.push((*rec).clone()),
                Subset::Test => split.test.push((*rec).clone()),
            }
        }
        Ok(split)
    }
}
