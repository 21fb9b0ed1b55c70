//! Per-frame detector scores indexed by dataset, label and video.
//!
//! The on-disk form is JSONL, one object per line:
//!
//! ```text
//! {"sample_id":"a","dataset":"D1","video_id":"v1","frame_idx":0,"label":"real","score":0.12}
//! ```
//!
//! Scores are accepted on any finite scale. Higher means "more fake".

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Ground-truth class of a sample. `Fake` is the positive class everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Real => f.write_str("real"),
            Label::Fake => f.write_str("fake"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    #[serde(rename = "dataset")]
    pub dataset_id: String,
    pub video_id: String,
    pub frame_idx: u64,
    pub label: Label,
    pub score: f64,
}

impl Sample {
    /// Serializes to one JSONL line (no trailing newline) in the shared score schema.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("sample serialization is infallible")
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("malformed line: {0}")]
    MalformedLine(String),
    #[error("invalid score: {0}")]
    InvalidScore(String),
    #[error("invalid label {0:?}, expected \"real\" or \"fake\"")]
    InvalidLabel(String),
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum StoreError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: ParseError,
    },
    #[error("line {line}: duplicate key (dataset={dataset}, video={video}, frame={frame}), first seen on line {first_line}")]
    DuplicateKey {
        line: usize,
        first_line: usize,
        dataset: String,
        video: String,
        frame: u64,
    },
    #[error("line {line}: read failure: {message}")]
    Io { line: usize, message: String },
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("video {video:?} in dataset {dataset:?} mixes real and fake frames")]
    MixedLabelVideo { dataset: String, video: String },
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, name: &str) -> Result<&'a Value, ParseError> {
    obj.get(name)
        .ok_or_else(|| ParseError::MalformedLine(format!("missing field `{name}`")))
}

fn string_field(obj: &serde_json::Map<String, Value>, name: &str) -> Result<String, ParseError> {
    match field(obj, name)? {
        Value::String(s) => Ok(s.clone()),
        other => Err(ParseError::MalformedLine(format!(
            "field `{name}` must be a string, got {other}"
        ))),
    }
}

/// Parses and validates one line of the JSONL score schema. Unknown fields are ignored.
pub fn parse_sample_line(line: &str) -> Result<Sample, ParseError> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| ParseError::MalformedLine(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ParseError::MalformedLine("expected a JSON object".into()))?;

    let sample_id = string_field(obj, "sample_id")?;
    let dataset_id = string_field(obj, "dataset")?;
    let video_id = string_field(obj, "video_id")?;
    let frame_idx = field(obj, "frame_idx")?.as_u64().ok_or_else(|| {
        ParseError::MalformedLine("field `frame_idx` must be a non-negative integer".into())
    })?;
    let label = match field(obj, "label")? {
        Value::String(s) if s == "real" => Label::Real,
        Value::String(s) if s == "fake" => Label::Fake,
        Value::String(s) => return Err(ParseError::InvalidLabel(s.clone())),
        other => return Err(ParseError::InvalidLabel(other.to_string())),
    };
    let score = match field(obj, "score")? {
        Value::Number(n) => n
            .as_f64()
            .ok_or_else(|| ParseError::InvalidScore(n.to_string()))?,
        // Non-finite values cannot be JSON numbers; they show up as strings.
        Value::String(s) => return Err(ParseError::InvalidScore(s.clone())),
        other => {
            return Err(ParseError::MalformedLine(format!(
                "field `score` must be a number, got {other}"
            )))
        }
    };
    if !score.is_finite() {
        return Err(ParseError::InvalidScore(score.to_string()));
    }

    Ok(Sample {
        sample_id,
        dataset_id,
        video_id,
        frame_idx,
        label,
        score,
    })
}

#[derive(Clone, Debug, Default)]
struct DatasetBucket {
    id: String,
    reals: Vec<usize>,
    fakes: Vec<usize>,
}

/// Immutable once built; safe to share across readers.
#[derive(Clone, Debug, Default)]
pub struct ScoreStore {
    samples: Vec<Sample>,
    buckets: Vec<DatasetBucket>,
    by_id: HashMap<String, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VideoAggregation {
    #[default]
    Mean,
    Max,
    Median,
}

impl VideoAggregation {
    fn apply(self, scores: &mut [f64]) -> f64 {
        debug_assert!(!scores.is_empty());
        match self {
            VideoAggregation::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
            VideoAggregation::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            VideoAggregation::Median => {
                scores.sort_by(f64::total_cmp);
                let n = scores.len();
                if n % 2 == 1 {
                    scores[n / 2]
                } else {
                    0.5 * (scores[n / 2 - 1] + scores[n / 2])
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VideoScore {
    pub video_id: String,
    pub label: Label,
    pub score: f64,
    pub n_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VideoScoreSet {
    pub dataset_id: String,
    pub entries: Vec<VideoScore>,
}

impl VideoScoreSet {
    pub fn partition(&self) -> (Vec<f64>, Vec<f64>) {
        let mut reals = Vec::new();
        let mut fakes = Vec::new();
        for e in &self.entries {
            match e.label {
                Label::Real => reals.push(e.score),
                Label::Fake => fakes.push(e.score),
            }
        }
        (reals, fakes)
    }
}

impl ScoreStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a store from already-validated samples, rejecting duplicate keys.
    /// Line numbers in errors are 1-based sample positions.
    pub fn from_samples<I: IntoIterator<Item = Sample>>(samples: I) -> Result<Self, StoreError> {
        let mut builder = StoreBuilder::default();
        for (i, s) in samples.into_iter().enumerate() {
            builder.push(s, i + 1)?;
        }
        Ok(builder.finish())
    }

    /// Ingests JSONL text. Blank lines are skipped but still counted for line numbers.
    pub fn ingest<R: BufRead>(reader: R) -> Result<Self, StoreError> {
        let mut builder = StoreBuilder::default();
        builder.ingest(reader, 0)?;
        Ok(builder.finish())
    }

    pub fn ingest_str(text: &str) -> Result<Self, StoreError> {
        Self::ingest(text.as_bytes())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Dataset ids in order of first appearance.
    pub fn dataset_ids(&self) -> Vec<&str> {
        self.buckets.iter().map(|b| b.id.as_str()).collect()
    }

    pub fn n_datasets(&self) -> usize {
        self.buckets.len()
    }

    fn bucket(&self, dataset_id: &str) -> Result<&DatasetBucket, StoreError> {
        self.by_id
            .get(dataset_id)
            .map(|&i| &self.buckets[i])
            .ok_or_else(|| StoreError::UnknownDataset(dataset_id.to_string()))
    }

    /// Frame-level (reals, fakes) scores of one dataset, in insertion order.
    pub fn partition(&self, dataset_id: &str) -> Result<(Vec<f64>, Vec<f64>), StoreError> {
        let b = self.bucket(dataset_id)?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| self.samples[i].score).collect();
        Ok((pick(&b.reals), pick(&b.fakes)))
    }

    /// One score per video, videos in order of first appearance.
    pub fn aggregate_video(
        &self,
        dataset_id: &str,
        rule: VideoAggregation,
    ) -> Result<VideoScoreSet, StoreError> {
        let b = self.bucket(dataset_id)?;
        let mut order: Vec<&str> = Vec::new();
        let mut frames: HashMap<&str, (Label, Vec<f64>)> = HashMap::new();
        let mut members: Vec<usize> = b.reals.iter().chain(&b.fakes).copied().collect();
        members.sort_unstable();
        for i in members {
            let s = &self.samples[i];
            match frames.get_mut(s.video_id.as_str()) {
                Some((label, scores)) => {
                    if *label != s.label {
                        return Err(StoreError::MixedLabelVideo {
                            dataset: dataset_id.to_string(),
                            video: s.video_id.clone(),
                        });
                    }
                    scores.push(s.score);
                }
                None => {
                    order.push(&s.video_id);
                    frames.insert(&s.video_id, (s.label, vec![s.score]));
                }
            }
        }
        let entries = order
            .into_iter()
            .map(|vid| {
                let (label, mut scores) = frames.remove(vid).expect("video recorded");
                let n_frames = scores.len();
                VideoScore {
                    video_id: vid.to_string(),
                    label,
                    score: rule.apply(&mut scores),
                    n_frames,
                }
            })
            .collect();
        Ok(VideoScoreSet {
            dataset_id: dataset_id.to_string(),
            entries,
        })
    }
}

/// Single-writer incremental builder; lets several files feed one store.
#[derive(Debug, Default)]
pub struct StoreBuilder {
    store: ScoreStore,
    keys: HashMap<(String, String, u64), usize>,
}

impl StoreBuilder {
    pub fn push(&mut self, sample: Sample, line: usize) -> Result<(), StoreError> {
        if !sample.score.is_finite() {
            return Err(StoreError::Parse {
                line,
                source: ParseError::InvalidScore(sample.score.to_string()),
            });
        }
        let key = (
            sample.dataset_id.clone(),
            sample.video_id.clone(),
            sample.frame_idx,
        );
        if let Some(&first_line) = self.keys.get(&key) {
            return Err(StoreError::DuplicateKey {
                line,
                first_line,
                dataset: key.0,
                video: key.1,
                frame: key.2,
            });
        }
        self.keys.insert(key, line);

        let store = &mut self.store;
        let bucket_idx = match store.by_id.get(&sample.dataset_id) {
            Some(&i) => i,
            None => {
                store.buckets.push(DatasetBucket {
                    id: sample.dataset_id.clone(),
                    ..Default::default()
                });
                store
                    .by_id
                    .insert(sample.dataset_id.clone(), store.buckets.len() - 1);
                store.buckets.len() - 1
            }
        };
        let idx = store.samples.len();
        let bucket = &mut store.buckets[bucket_idx];
        match sample.label {
            Label::Real => bucket.reals.push(idx),
            Label::Fake => bucket.fakes.push(idx),
        }
        store.samples.push(sample);
        Ok(())
    }

    /// Reads JSONL lines; `line_offset` shifts reported line numbers.
    pub fn ingest<R: BufRead>(&mut self, reader: R, line_offset: usize) -> Result<(), StoreError> {
        for (i, line) in reader.lines().enumerate() {
            let line_no = line_offset + i + 1;
            let line = line.map_err(|e| StoreError::Io {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let sample = parse_sample_line(&line).map_err(|source| StoreError::Parse {
                line: line_no,
                source,
            })?;
            self.push(sample, line_no)?;
        }
        Ok(())
    }

    pub fn finish(self) -> ScoreStore {
        self.store
    }
}
