//! Synthetic and trace-driven multimodal batches.
//!
//! Every synthetic sample is one fixed-length sequence built from documents
//! (a text span followed by its image subsequences). Subsequences that cross
//! the sequence boundary are truncated; a short sequence is padded, and the
//! padding counts toward the backbone only.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Microbatch, Plan, Sample};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    InvariantViolation { line: usize, message: String },
    #[error("global batch has {found} samples, plan expects {expected}")]
    BatchSizeMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token-length distribution of one kind of subsequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SizeDist {
    Fixed { tokens: u32 },
    /// Log-normal with the given median and log-space standard deviation.
    LogNormal { median: f64, sigma: f64 },
    /// Uniform over the inclusive integer range.
    Uniform { min: u32, max: u32 },
}

impl SizeDist {
    fn validate(&self, what: &str) -> Result<(), WorkloadError> {
        let ok = match *self {
            SizeDist::Fixed { .. } => true,
            SizeDist::LogNormal { median, sigma } => median > 0.0 && median.is_finite() && sigma >= 0.0 && sigma.is_finite(),
            SizeDist::Uniform { min, max } => min <= max,
        };
        if ok {
            Ok(())
        } else {
            Err(WorkloadError::InvalidSpec(format!("{what}: bad parameters {self:?}")))
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        match *self {
            SizeDist::Fixed { tokens } => tokens,
            SizeDist::LogNormal { median, sigma } => {
                let d = LogNormal::new(median.ln(), sigma).expect("validated");
                let x: f64 = d.sample(rng);
                x.round().clamp(1.0, f64::from(u32::MAX)) as u32
            }
            SizeDist::Uniform { min, max } => rng.random_range(min..=max),
        }
    }
}

/// Distribution of images per document.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CountDist {
    Fixed { count: u32 },
    /// Geometric on {0, 1, 2, ...} with the given mean.
    Geometric { mean: f64 },
}

impl CountDist {
    fn validate(&self) -> Result<(), WorkloadError> {
        match *self {
            CountDist::Geometric { mean } if !(mean >= 0.0 && mean.is_finite()) => {
                Err(WorkloadError::InvalidSpec(format!("image count: bad mean {mean}")))
            }
            _ => Ok(()),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        match *self {
            CountDist::Fixed { count } => count,
            CountDist::Geometric { mean } => {
                let d = Geometric::new(1.0 / (mean + 1.0)).expect("validated");
                d.sample(rng).min(u64::from(u32::MAX)) as u32
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub seq_len: u32,
    pub text: SizeDist,
    pub image_size: SizeDist,
    pub image_count: CountDist,
    /// Documents packed into each sequence before padding.
    #[serde(default = "one")]
    pub documents_per_sample: u32,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> u32 {
    1
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            seq_len: 8192,
            text: SizeDist::LogNormal { median: 512.0, sigma: 1.0 },
            image_size: SizeDist::LogNormal { median: 576.0, sigma: 0.8 },
            image_count: CountDist::Geometric { mean: 3.0 },
            documents_per_sample: 1,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.seq_len == 0 {
            return Err(WorkloadError::InvalidSpec("seq_len must be positive".into()));
        }
        if self.documents_per_sample == 0 {
            return Err(WorkloadError::InvalidSpec("documents_per_sample must be positive".into()));
        }
        self.text.validate("text")?;
        self.image_size.validate("image size")?;
        self.image_count.validate()
    }

    /// Every parameter at a point mass: all samples come out identical.
    pub fn fixed(seq_len: u32, text: u32, images: u32, image_tokens: u32) -> Self {
        WorkloadSpec {
            seq_len,
            text: SizeDist::Fixed { tokens: text },
            image_size: SizeDist::Fixed { tokens: image_tokens },
            image_count: CountDist::Fixed { count: images },
            documents_per_sample: 1,
            seed: 0,
        }
    }
}

/// Draws `bs` samples, each packed into one `seq_len` sequence.
pub fn synth_batch(spec: &WorkloadSpec, bs: usize) -> Result<Vec<Sample>, WorkloadError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..bs).map(|_| pack_sample(spec, &mut rng)).collect())
}

fn pack_sample(spec: &WorkloadSpec, rng: &mut ChaCha8Rng) -> Sample {
    let mut left = spec.seq_len;
    let mut sample = Sample::text(0);
    for _ in 0..spec.documents_per_sample {
        let text = spec.text.sample(rng).min(left);
        sample.text_tokens += text;
        left -= text;
        let count = spec.image_count.sample(rng);
        for _ in 0..count {
            if left == 0 {
                break;
            }
            let image = spec.image_size.sample(rng).min(left);
            if image > 0 {
                sample.image_subseqs.push(image);
                left -= image;
            }
        }
        if left == 0 {
            break;
        }
    }
    if sample.total_tokens() == 0 {
        // A sequence needs at least one real token.
        sample.text_tokens = 1;
    }
    sample
}

/// Zero tokens appended to reach `seq_len`.
pub fn padding(sample: &Sample, seq_len: u32) -> u64 {
    u64::from(seq_len).saturating_sub(sample.total_tokens())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    text_tokens: i64,
    #[serde(default)]
    image_subseqs: Vec<i64>,
    #[serde(default)]
    audio_subseqs: Vec<i64>,
}

fn to_tokens(v: i64, field: &str, line: usize) -> Result<u32, WorkloadError> {
    u32::try_from(v).map_err(|_| WorkloadError::InvariantViolation { line, message: format!("{field} has invalid token count {v}") })
}

fn to_tokens_list(v: &[i64], field: &str, line: usize) -> Result<Vec<u32>, WorkloadError> {
    v.iter()
        .map(|&x| match to_tokens(x, field, line)? {
            0 => Err(WorkloadError::InvariantViolation { line, message: format!("{field} contains an empty subsequence") }),
            t => Ok(t),
        })
        .collect()
}

/// Parses line-delimited JSON samples. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub fn read_samples<R: Read>(reader: R) -> Result<Vec<Sample>, WorkloadError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| WorkloadError::Parse { line: line_no, message: e.to_string() })?;
        let sample = Sample {
            text_tokens: to_tokens(rec.text_tokens, "text_tokens", line_no)?,
            image_subseqs: to_tokens_list(&rec.image_subseqs, "image_subseqs", line_no)?,
            audio_subseqs: to_tokens_list(&rec.audio_subseqs, "audio_subseqs", line_no)?,
        };
        sample.check(None).map_err(|message| WorkloadError::InvariantViolation { line: line_no, message })?;
        out.push(sample);
    }
    Ok(out)
}

pub fn ingest_trace(path: impl AsRef<Path>) -> Result<Vec<Sample>, WorkloadError> {
    read_samples(std::fs::File::open(path)?)
}

/// Writes samples in the format [`read_samples`] accepts.
pub fn write_samples<W: Write>(mut writer: W, samples: &[Sample]) -> Result<(), WorkloadError> {
    for s in samples {
        serde_json::to_writer(&mut writer, s).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Token totals of a batch; padding is kept apart from real tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct TokenTotals {
    pub text: u64,
    pub modality: u64,
    pub padding: u64,
}

pub fn token_totals(samples: &[Sample], seq_len: u32) -> TokenTotals {
    samples.iter().fold(TokenTotals::default(), |mut t, s| {
        t.text += u64::from(s.text_tokens);
        t.modality += s.modality_tokens();
        t.padding += padding(s, seq_len);
        t
    })
}

/// Splits the global batch into `DP_lm` contiguous groups of `BS / DP_lm`
/// single-sequence microbatches.
pub fn assemble_microbatches(samples: &[Sample], plan: &Plan) -> Result<Vec<Vec<Microbatch>>, WorkloadError> {
    let bs = plan.global_batch as usize;
    if samples.len() != bs {
        return Err(WorkloadError::BatchSizeMismatch { expected: bs, found: samples.len() });
    }
    let dp = plan.backbone.dp as usize;
    if dp == 0 || !bs.is_multiple_of(dp) {
        return Err(WorkloadError::InvalidSpec(format!("backbone DP {dp} does not divide batch size {bs}")));
    }
    let per = bs / dp;
    Ok((0..dp)
        .map(|g| (g * per..(g + 1) * per).map(|i| Microbatch::single(i, samples[i].clone())).collect())
        .collect())
}
