//! Deterministic multi-source QA sample generator with known answer
//! provenance.
//!
//! Each sample carries a question (an attribute token), a token context, a
//! toy image, and a gold answer. Which source actually contains the answer
//! is fixed per attribute: attributes are apportioned into context-answered,
//! image-answered, and both-answered buckets by the configured mix, mirroring
//! how some product attributes are textual and others visual. Context
//! samples embed the `attribute value` pair among distractor pairs; image
//! samples paint a per-(attribute, value) patch pattern.
//!
//! The off-label source is not blank, it is a decoy: context-answered
//! samples show an image pattern for the asked attribute with a uniformly
//! drawn value, and image-answered samples carry a context pair for the
//! asked attribute with a value that is never the true answer. Both sources
//! therefore always make a claim about the asked attribute, and only the
//! question identifies which source to trust.
//!
//! The context always starts with the question token, so the decoder can
//! select the asked-for pair from text.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{ImageGrid, ImageShape};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;

pub const DATASET_FORMAT: &str = "moemoe-ds/1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("record {record}: {message}")]
    Parse { record: usize, message: String },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {0} outside the synthetic vocabulary")]
    UnknownId(usize),
    #[error("dataset format {found:?}, expected {expected:?}")]
    FormatVersion { found: String, expected: String },
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Which source(s) contain the answer, by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceLabel {
    Context,
    Image,
    Both,
}

impl fmt::Display for SourceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SourceLabel::Context => "context",
            SourceLabel::Image => "image",
            SourceLabel::Both => "both",
        };
        f.write_str(s)
    }
}

/// Fractions of attributes answered from each source; must sum to one.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SourceMix {
    pub context: f64,
    pub image: f64,
    pub both: f64,
}

impl Default for SourceMix {
    fn default() -> Self {
        SourceMix {
            context: 0.4,
            image: 0.4,
            both: 0.2,
        }
    }
}

/// Generator configuration; fully determines the dataset given the seed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SynthConfig {
    pub n_attributes: usize,
    pub n_values: usize,
    pub n_fillers: usize,
    /// Distractor attribute-value pairs placed in every context.
    pub n_distractors: usize,
    pub k: usize,
    pub image: ImageShape,
    pub mix: SourceMix,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_attributes: 8,
            n_values: 8,
            n_fillers: 16,
            n_distractors: 3,
            k: 32,
            image: ImageShape {
                channels: 3,
                height: 16,
                width: 16,
                patch_size: 4,
            },
            mix: SourceMix::default(),
            n_train: 5000,
            n_val: 1000,
            n_test: 1000,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn vocab_size(&self) -> usize {
        3 + self.n_attributes + self.n_attributes * self.n_values + self.n_fillers
    }

    pub fn n_codes(&self) -> usize {
        self.n_attributes * self.n_values
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_attributes == 0 || self.n_values == 0 {
            return Err(DataError::InvalidConfig(
                "need at least one attribute and one value".into(),
            ));
        }
        let sum = self.mix.context + self.mix.image + self.mix.both;
        if (sum - 1.0).abs() > 1e-9
            || self.mix.context < 0.0
            || self.mix.image < 0.0
            || self.mix.both < 0.0
        {
            return Err(DataError::InvalidConfig(format!(
                "source mix must be nonnegative and sum to 1, got {sum}"
            )));
        }
        if self.n_distractors + 1 > self.n_attributes {
            return Err(DataError::InvalidConfig(format!(
                "{} distractor pairs need more than {} attributes",
                self.n_distractors, self.n_attributes
            )));
        }
        // Worst-case context: question token, then per pair up to two fillers
        // plus the pair itself, then two trailing fillers.
        let worst = 1 + (self.n_distractors + 1) * 4 + 2;
        if worst > self.k {
            return Err(DataError::InvalidConfig(format!(
                "context of up to {worst} tokens cannot fit k = {}",
                self.k
            )));
        }
        self.image
            .validate()
            .map_err(|e| DataError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    /// Number of attributes in each bucket (context, image, both), by
    /// largest-remainder apportionment of the mix.
    pub fn attribute_buckets(&self) -> [usize; 3] {
        let props = [self.mix.context, self.mix.image, self.mix.both];
        let a = self.n_attributes;
        let mut counts = [0usize; 3];
        let mut rem: Vec<(f64, usize)> = Vec::new();
        let mut assigned = 0;
        for i in 0..3 {
            let exact = props[i] * a as f64;
            counts[i] = exact.floor() as usize;
            assigned += counts[i];
            rem.push((exact - exact.floor(), i));
        }
        rem.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
        for (_, i) in rem.into_iter().cycle().take(a - assigned) {
            counts[i] += 1;
        }
        counts
    }

    pub fn label_of_attribute(&self, attribute: usize) -> SourceLabel {
        let [c, i, _] = self.attribute_buckets();
        if attribute < c {
            SourceLabel::Context
        } else if attribute < c + i {
            SourceLabel::Image
        } else {
            SourceLabel::Both
        }
    }
}

/// Bijective token <-> id map over the synthetic vocabulary.
#[derive(Debug, Clone)]
pub struct Vocab {
    n_attributes: usize,
    n_values: usize,
    n_fillers: usize,
    by_name: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(cfg: &SynthConfig) -> Self {
        let mut v = Vocab {
            n_attributes: cfg.n_attributes,
            n_values: cfg.n_values,
            n_fillers: cfg.n_fillers,
            by_name: HashMap::new(),
        };
        for id in 0..v.size() {
            v.by_name.insert(v.token_string(id).unwrap(), id);
        }
        v
    }

    pub fn size(&self) -> usize {
        3 + self.n_attributes + self.n_attributes * self.n_values + self.n_fillers
    }

    pub fn attribute_token(&self, a: usize) -> usize {
        debug_assert!(a < self.n_attributes);
        3 + a
    }

    pub fn value_token(&self, a: usize, value: usize) -> usize {
        debug_assert!(a < self.n_attributes && value < self.n_values);
        3 + self.n_attributes + a * self.n_values + value
    }

    pub fn filler_token(&self, i: usize) -> usize {
        debug_assert!(i < self.n_fillers);
        3 + self.n_attributes + self.n_attributes * self.n_values + i
    }

    /// Inverse of `value_token`.
    pub fn value_of(&self, id: usize) -> Option<(usize, usize)> {
        let base = 3 + self.n_attributes;
        let top = base + self.n_attributes * self.n_values;
        if (base..top).contains(&id) {
            let off = id - base;
            Some((off / self.n_values, off % self.n_values))
        } else {
            None
        }
    }

    pub fn attribute_of(&self, id: usize) -> Option<usize> {
        if (3..3 + self.n_attributes).contains(&id) {
            Some(id - 3)
        } else {
            None
        }
    }

    pub fn token_string(&self, id: usize) -> Result<String> {
        match id {
            PAD_ID => Ok("<pad>".into()),
            BOS_ID => Ok("<bos>".into()),
            EOS_ID => Ok("<eos>".into()),
            _ if self.attribute_of(id).is_some() => {
                Ok(format!("attr{}", self.attribute_of(id).unwrap()))
            }
            _ if self.value_of(id).is_some() => {
                let (a, v) = self.value_of(id).unwrap();
                Ok(format!("val{a}.{v}"))
            }
            _ if id < self.size() => Ok(format!(
                "filler{}",
                id - (3 + self.n_attributes + self.n_attributes * self.n_values)
            )),
            _ => Err(DataError::UnknownId(id)),
        }
    }

    /// Ids for a token string sequence, padded or truncated to `k`.
    pub fn tokenize(&self, tokens: &[String], k: usize) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(k);
        for t in tokens.iter().take(k) {
            let id = self
                .by_name
                .get(t.as_str())
                .ok_or_else(|| DataError::UnknownToken(t.clone()))?;
            ids.push(*id);
        }
        ids.resize(k, PAD_ID);
        Ok(ids)
    }

    /// Token strings for an id sequence, with padding stripped.
    pub fn detokenize(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .filter(|&&id| id != PAD_ID)
            .map(|&id| self.token_string(id))
            .collect()
    }
}

/// One triplet-plus-supervision record.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub question: Vec<usize>,
    pub context: Vec<usize>,
    pub image: ImageGrid,
    pub answer: Vec<usize>,
    pub source_label: SourceLabel,
    pub attribute_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub samples: Vec<Sample>,
}

pub struct DatasetSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn hash01(a: u64, b: u64, c: u64) -> f64 {
    let x = mix64(
        a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
            ^ c.wrapping_mul(0x1656_67B1_9E37_79F9),
    );
    (x >> 11) as f64 / (1u64 << 53) as f64
}

/// The fixed pattern painted for a given (attribute, value) code: each patch
/// is a solid per-channel color derived from the code.
pub fn pattern_image(code: usize, shape: &ImageShape) -> ImageGrid {
    let mut data = vec![0.0; shape.channels * shape.height * shape.width];
    let p = shape.patch_size;
    let per_row = shape.width / p;
    for c in 0..shape.channels {
        for y in 0..shape.height {
            for x in 0..shape.width {
                let patch = (y / p) * per_row + (x / p);
                data[(c * shape.height + y) * shape.width + x] =
                    hash01(code as u64, patch as u64, c as u64);
            }
        }
    }
    ImageGrid::new(shape.channels, shape.height, shape.width, shape.patch_size, data)
        .expect("pattern construction")
}

/// Recover the pattern code from an image, if it is exactly one of the
/// generator's patterns. This is the generator's inverse map for tests.
pub fn decode_pattern(img: &ImageGrid, cfg: &SynthConfig) -> Option<usize> {
    (0..cfg.n_codes()).find(|&code| pattern_image(code, &cfg.image).data == img.data)
}

fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ id))
}

fn generate_sample(cfg: &SynthConfig, vocab: &Vocab, id: u64) -> Sample {
    let mut rng = sample_rng(cfg.seed, id);
    let attribute = rng.gen_range(0..cfg.n_attributes);
    let value = rng.gen_range(0..cfg.n_values);
    let label = cfg.label_of_attribute(attribute);

    // Distractor pairs over other attributes, plus a claim about the asked
    // attribute: the true pair when the context is a valid source, a decoy
    // value otherwise.
    let mut others: Vec<usize> = (0..cfg.n_attributes).filter(|&a| a != attribute).collect();
    others.shuffle(&mut rng);
    let mut pairs: Vec<(usize, usize)> = others[..cfg.n_distractors]
        .iter()
        .map(|&a| (a, rng.gen_range(0..cfg.n_values)))
        .collect();
    if label == SourceLabel::Image {
        // The answer token itself must never leak into the context.
        let decoy = (value + 1 + rng.gen_range(0..cfg.n_values - 1)) % cfg.n_values;
        pairs.push((attribute, decoy));
    } else {
        pairs.push((attribute, value));
    }
    pairs.shuffle(&mut rng);

    let mut context = vec![vocab.attribute_token(attribute)];
    for (a, v) in pairs {
        for _ in 0..rng.gen_range(0..=2usize) {
            context.push(vocab.filler_token(rng.gen_range(0..cfg.n_fillers)));
        }
        context.push(vocab.attribute_token(a));
        context.push(vocab.value_token(a, v));
    }
    for _ in 0..rng.gen_range(0..=2usize) {
        context.push(vocab.filler_token(rng.gen_range(0..cfg.n_fillers)));
    }
    debug_assert!(context.len() <= cfg.k);

    let code = if label == SourceLabel::Context {
        // A decoy pattern for the asked attribute; the value is uniform, so
        // the image carries no information about the answer beyond chance.
        attribute * cfg.n_values + rng.gen_range(0..cfg.n_values)
    } else {
        attribute * cfg.n_values + value
    };

    Sample {
        id,
        // The begin marker gives the question encoder a second attendable
        // position; a lone token saturates attention and starves its
        // query/key projections of gradient.
        question: vec![BOS_ID, vocab.attribute_token(attribute)],
        context,
        image: pattern_image(code, &cfg.image),
        answer: vec![vocab.value_token(attribute, value)],
        source_label: label,
        attribute_id: attribute,
    }
}

/// Generate samples for an id range; sharded generation equals serial
/// generation because every sample derives its own stream from (seed, id).
pub fn generate_range(cfg: &SynthConfig, id_start: u64, n: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let vocab = Vocab::new(cfg);
    Ok((0..n)
        .map(|i| generate_sample(cfg, &vocab, id_start + i as u64))
        .collect())
}

/// Train/val/test splits with globally disjoint sample ids.
pub fn generate_splits(cfg: &SynthConfig) -> Result<DatasetSplits> {
    cfg.validate()?;
    let train = generate_range(cfg, 0, cfg.n_train)?;
    let val = generate_range(cfg, cfg.n_train as u64, cfg.n_val)?;
    let test = generate_range(cfg, (cfg.n_train + cfg.n_val) as u64, cfg.n_test)?;
    Ok(DatasetSplits {
        train: Dataset {
            config: cfg.clone(),
            samples: train,
        },
        val: Dataset {
            config: cfg.clone(),
            samples: val,
        },
        test: Dataset {
            config: cfg.clone(),
            samples: test,
        },
    })
}

/// The generator's inverse: recover the answer from the labeled source(s).
/// Returns `None` when the source does not actually determine the answer.
pub fn answer_from_source(sample: &Sample, cfg: &SynthConfig) -> Option<Vec<usize>> {
    let vocab = Vocab::new(cfg);
    let attr = sample.attribute_id;
    let from_context = || {
        sample.context.windows(2).find_map(|w| {
            if w[0] == vocab.attribute_token(attr) {
                if let Some((a, _)) = vocab.value_of(w[1]) {
                    if a == attr {
                        return Some(vec![w[1]]);
                    }
                }
            }
            None
        })
    };
    let from_image = || {
        let code = decode_pattern(&sample.image, cfg)?;
        let (a, v) = (code / cfg.n_values, code % cfg.n_values);
        (a == attr).then(|| vec![vocab.value_token(a, v)])
    };
    match sample.source_label {
        SourceLabel::Context => from_context(),
        SourceLabel::Image => from_image(),
        SourceLabel::Both => {
            let c = from_context()?;
            let i = from_image()?;
            (c == i).then_some(c)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: SynthConfig,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: u64,
    question_ids: Vec<usize>,
    context_ids: Vec<usize>,
    image: String,
    answer_ids: Vec<usize>,
    source_label: SourceLabel,
    attribute_id: usize,
}

fn image_to_b64(img: &ImageGrid) -> String {
    let mut bytes = Vec::with_capacity(img.data.len() * 8);
    for v in &img.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn image_from_b64(s: &str, shape: &ImageShape) -> std::result::Result<ImageGrid, String> {
    let bytes = B64.decode(s).map_err(|e| e.to_string())?;
    if bytes.len() % 8 != 0 {
        return Err("image payload is not a whole number of f64s".into());
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ImageGrid::new(
        shape.channels,
        shape.height,
        shape.width,
        shape.patch_size,
        data,
    )
    .map_err(|e| e.to_string())
}

/// Write a dataset as a header line plus one JSON record per sample.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = Header {
        format: DATASET_FORMAT.to_string(),
        config: ds.config.clone(),
    };
    serde_json::to_writer(&mut out, &header).map_err(|e| DataError::Parse {
        record: 0,
        message: e.to_string(),
    })?;
    out.write_all(b"\n")?;
    for s in &ds.samples {
        let rec = SampleRecord {
            id: s.id,
            question_ids: s.question.clone(),
            context_ids: s.context.clone(),
            image: image_to_b64(&s.image),
            answer_ids: s.answer.clone(),
            source_label: s.source_label,
            attribute_id: s.attribute_id,
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| DataError::Parse {
            record: s.id as usize,
            message: e.to_string(),
        })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = BufReader::new(File::open(path)?);
    let mut lines = file.lines();
    let header_line = lines.next().ok_or(DataError::Parse {
        record: 0,
        message: "empty file, expected a header line".into(),
    })??;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| DataError::Parse {
        record: 0,
        message: format!("bad header: {e}"),
    })?;
    if header.format != DATASET_FORMAT {
        return Err(DataError::FormatVersion {
            found: header.format,
            expected: DATASET_FORMAT.to_string(),
        });
    }
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let record = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord =
            serde_json::from_str(&line).map_err(|e| DataError::Parse {
                record,
                message: e.to_string(),
            })?;
        let image = image_from_b64(&rec.image, &header.config.image).map_err(|message| {
            DataError::Parse { record, message }
        })?;
        samples.push(Sample {
            id: rec.id,
            question: rec.question_ids,
            context: rec.context_ids,
            image,
            answer: rec.answer_ids,
            source_label: rec.source_label,
            attribute_id: rec.attribute_id,
        });
    }
    Ok(Dataset {
        config: header.config,
        samples,
    })
}
