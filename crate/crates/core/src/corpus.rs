//! Review ingestion, dataset splitting, and document construction.
//!
//! A user's document is the concatenation of the reviews they wrote; an
//! item's document is the concatenation of the reviews it received. Documents
//! are built from the *training* split only, so the joint review of every
//! held-out pair is absent from both sides by construction.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One (user, item, rating, review text) tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub review_text: String,
    /// Seconds since the epoch; 0 when the source line had no timestamp.
    pub timestamp: i64,
}

/// Wire format of one input line (the Amazon review JSON schema).
#[derive(Debug, Serialize, Deserialize)]
struct RawReview {
    #[serde(rename = "reviewerID")]
    reviewer_id: String,
    asin: String,
    overall: f64,
    #[serde(rename = "reviewText", default)]
    review_text: Option<String>,
    #[serde(rename = "unixReviewTime", default)]
    unix_review_time: Option<i64>,
}

impl ReviewRecord {
    fn from_raw(raw: RawReview) -> std::result::Result<Self, String> {
        if raw.reviewer_id.is_empty() {
            return Err("empty reviewerID".to_string());
        }
        if raw.asin.is_empty() {
            return Err("empty asin".to_string());
        }
        if !(1.0..=5.0).contains(&raw.overall) {
            return Err(format!("rating {} outside [1,5]", raw.overall));
        }
        let text = raw.review_text.unwrap_or_default();
        if text.trim().is_empty() {
            return Err("missing or empty reviewText".to_string());
        }
        Ok(ReviewRecord {
            user_id: raw.reviewer_id,
            item_id: raw.asin,
            rating: raw.overall,
            review_text: text,
            timestamp: raw.unix_review_time.unwrap_or(0),
        })
    }

    fn to_raw(&self) -> RawReview {
        RawReview {
            reviewer_id: self.user_id.clone(),
            asin: self.item_id.clone(),
            overall: self.rating,
            review_text: Some(self.review_text.clone()),
            unix_review_time: Some(self.timestamp),
        }
    }
}

/// A line that `parse_reviews` could not turn into a record, with the reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedLine {
    /// 1-based line number in the input stream.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct ParsedReviews {
    pub records: Vec<ReviewRecord>,
    pub skipped: Vec<SkippedLine>,
}

/// Parse JSON-lines review data. Bad lines are skipped and reported, never
/// fatal; input order of the surviving records is preserved.
pub fn parse_reviews<R: BufRead>(reader: R) -> Result<ParsedReviews> {
    let mut out = ParsedReviews::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawReview>(&line) {
            Ok(raw) => match ReviewRecord::from_raw(raw) {
                Ok(rec) => out.records.push(rec),
                Err(reason) => out.skipped.push(SkippedLine { line: lineno, reason }),
            },
            Err(e) => out.skipped.push(SkippedLine {
                line: lineno,
                reason: format!("malformed JSON: {e}"),
            }),
        }
    }
    if !out.skipped.is_empty() {
        log::info!("parse_reviews: skipped {} of {} lines", out.skipped.len(), out.records.len() + out.skipped.len());
    }
    Ok(out)
}

/// Lowercase tokens split on maximal runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Train/validation/test partition of a record set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<ReviewRecord>,
    pub validation: Vec<ReviewRecord>,
    pub test: Vec<ReviewRecord>,
    pub seed: u64,
    pub ratios: (f64, f64, f64),
}

/// Seeded random permutation followed by a contiguous cut at the requested
/// ratios. Split sizes use largest-remainder rounding and every split gets at
/// least one record.
pub fn split_dataset(
    records: &[ReviewRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let (r0, r1, r2) = ratios;
    if r0 <= 0.0 || r1 <= 0.0 || r2 <= 0.0 {
        return Err(Error::invalid_config("split ratios must all be positive"));
    }
    if (r0 + r1 + r2 - 1.0).abs() > 1e-9 {
        return Err(Error::invalid_config(format!(
            "split ratios sum to {}, expected 1",
            r0 + r1 + r2
        )));
    }
    let n = records.len();
    if n < 3 {
        return Err(Error::invalid_input(format!(
            "need at least 3 records to populate all splits, got {n}"
        )));
    }

    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let sizes = apportion(n, &[r0, r1, r2]);
    let (n_train, n_val) = (sizes[0], sizes[1]);

    let take = |range: std::ops::Range<usize>| -> Vec<ReviewRecord> {
        indices[range].iter().map(|&i| records[i].clone()).collect()
    };
    Ok(DatasetSplit {
        train: take(0..n_train),
        validation: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n),
        seed,
        ratios,
    })
}

/// Largest-remainder apportionment with a floor of 1 per bucket.
fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let mut sizes: Vec<usize> = ratios.iter().map(|r| (n as f64 * r).floor() as usize).collect();
    let mut rem: Vec<(usize, f64)> = ratios
        .iter()
        .enumerate()
        .map(|(i, r)| (i, n as f64 * r - sizes[i] as f64))
        .collect();
    rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut assigned: usize = sizes.iter().sum();
    for &(i, _) in rem.iter().cycle() {
        if assigned >= n {
            break;
        }
        sizes[i] += 1;
        assigned += 1;
    }
    // no bucket may be empty; steal from the largest
    for i in 0..sizes.len() {
        if sizes[i] == 0 {
            let largest = (0..sizes.len()).max_by_key(|&j| sizes[j]).unwrap();
            sizes[largest] -= 1;
            sizes[i] += 1;
        }
    }
    sizes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OwnerKind {
    User,
    Item,
}

/// One constituent review inside a document: its tokens plus the index of the
/// training record it came from, so exclusion can be audited token-by-token.
#[derive(Debug, Clone, PartialEq)]
pub struct ReviewTokens {
    /// Index into the training split this review was drawn from.
    pub source_index: usize,
    pub tokens: Vec<String>,
}

/// Ordered token sequence for one user or item, kept as a list of per-review
/// token lists so reviews can be shuffled as units.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub owner_id: String,
    pub owner_kind: OwnerKind,
    pub reviews: Vec<ReviewTokens>,
}

impl Document {
    pub fn empty(owner_id: &str, owner_kind: OwnerKind) -> Self {
        Document { owner_id: owner_id.to_string(), owner_kind, reviews: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.reviews.iter().all(|r| r.tokens.is_empty())
    }

    /// Flattened token sequence, review order preserved.
    pub fn flattened(&self) -> Vec<&str> {
        self.reviews
            .iter()
            .flat_map(|r| r.tokens.iter().map(String::as_str))
            .collect()
    }

    pub fn token_count(&self) -> usize {
        self.reviews.iter().map(|r| r.tokens.len()).sum()
    }
}

/// User and item documents for one split, keyed by owner id. BTreeMap keeps
/// iteration order deterministic.
#[derive(Debug, Clone)]
pub struct DocumentSet {
    pub users: BTreeMap<String, Document>,
    pub items: BTreeMap<String, Document>,
}

impl DocumentSet {
    pub fn user(&self, id: &str) -> Option<&Document> {
        self.users.get(id)
    }

    pub fn item(&self, id: &str) -> Option<&Document> {
        self.items.get(id)
    }
}

/// Build per-user and per-item documents from the training split only.
/// Reviews within a document are ordered by ascending timestamp, ties broken
/// by training-set position. Users and items that occur only in the held-out
/// splits get an empty, flagged document.
pub fn build_documents(split: &DatasetSplit) -> DocumentSet {
    let mut by_user: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut by_item: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, rec) in split.train.iter().enumerate() {
        by_user.entry(&rec.user_id).or_default().push(i);
        by_item.entry(&rec.item_id).or_default().push(i);
    }

    let build = |ids: Vec<usize>, owner_id: &str, kind: OwnerKind| -> Document {
        let mut ids = ids;
        ids.sort_by_key(|&i| (split.train[i].timestamp, i));
        Document {
            owner_id: owner_id.to_string(),
            owner_kind: kind,
            reviews: ids
                .into_iter()
                .map(|i| ReviewTokens {
                    source_index: i,
                    tokens: tokenize(&split.train[i].review_text),
                })
                .collect(),
        }
    };

    let mut users = BTreeMap::new();
    let mut items = BTreeMap::new();
    for (uid, ids) in by_user {
        users.insert(uid.to_string(), build(ids, uid, OwnerKind::User));
    }
    for (iid, ids) in by_item {
        items.insert(iid.to_string(), build(ids, iid, OwnerKind::Item));
    }

    // held-out-only owners are retained with empty documents
    let mut empty_users = 0usize;
    let mut empty_items = 0usize;
    for rec in split.validation.iter().chain(split.test.iter()) {
        if !users.contains_key(&rec.user_id) {
            users.insert(rec.user_id.clone(), Document::empty(&rec.user_id, OwnerKind::User));
            empty_users += 1;
        }
        if !items.contains_key(&rec.item_id) {
            items.insert(rec.item_id.clone(), Document::empty(&rec.item_id, OwnerKind::Item));
            empty_items += 1;
        }
    }
    if empty_users + empty_items > 0 {
        log::debug!(
            "build_documents: {empty_users} users and {empty_items} items have no training reviews"
        );
    }

    DocumentSet { users, items }
}

/// Seeded uniform permutation of the document's reviews. Review-level only:
/// tokens within a review never move.
pub fn shuffle_document(doc: &Document, seed: u64) -> Document {
    let mut shuffled = doc.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.reviews.shuffle(&mut rng);
    shuffled
}

/// Corpus-level statistics over all records, with no exclusion applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_ratings: usize,
    pub user_doc_avg_len: f64,
    pub item_doc_avg_len: f64,
}

pub fn compute_corpus_stats(records: &[ReviewRecord]) -> CorpusStats {
    let mut user_tokens: HashMap<&str, usize> = HashMap::new();
    let mut item_tokens: HashMap<&str, usize> = HashMap::new();
    for rec in records {
        let n = tokenize(&rec.review_text).len();
        *user_tokens.entry(&rec.user_id).or_default() += n;
        *item_tokens.entry(&rec.item_id).or_default() += n;
    }
    let avg = |m: &HashMap<&str, usize>| {
        if m.is_empty() {
            0.0
        } else {
            m.values().sum::<usize>() as f64 / m.len() as f64
        }
    };
    CorpusStats {
        n_users: user_tokens.len(),
        n_items: item_tokens.len(),
        n_ratings: records.len(),
        user_doc_avg_len: avg(&user_tokens),
        item_doc_avg_len: avg(&item_tokens),
    }
}

/// Manifest written next to the three split files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: (f64, f64, f64),
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
}

fn write_records(path: &Path, records: &[ReviewRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut f, &rec.to_raw())?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Persist a split as train/validation/test JSON-lines plus a manifest.
pub fn save_split(dir: &Path, split: &DatasetSplit) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_records(&dir.join("train.jsonl"), &split.train)?;
    write_records(&dir.join("validation.jsonl"), &split.validation)?;
    write_records(&dir.join("test.jsonl"), &split.test)?;
    let manifest = SplitManifest {
        seed: split.seed,
        ratios: split.ratios,
        n_train: split.train.len(),
        n_validation: split.validation.len(),
        n_test: split.test.len(),
    };
    let mut f = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn load_split(dir: &Path) -> Result<DatasetSplit> {
    let read = |name: &str| -> Result<Vec<ReviewRecord>> {
        let f = std::io::BufReader::new(std::fs::File::open(dir.join(name))?);
        let parsed = parse_reviews(f)?;
        if !parsed.skipped.is_empty() {
            return Err(Error::invalid_input(format!(
                "{name}: {} unparseable lines in a split file",
                parsed.skipped.len()
            )));
        }
        Ok(parsed.records)
    };
    let manifest: SplitManifest =
        serde_json::from_reader(std::fs::File::open(dir.join("manifest.json"))?)?;
    Ok(DatasetSplit {
        train: read("train.jsonl")?,
        validation: read("validation.jsonl")?,
        test: read("test.jsonl")?,
        seed: manifest.seed,
        ratios: manifest.ratios,
    })
}
