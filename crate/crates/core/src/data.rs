//! Samples, datasets, the line-delimited feature format and a synthetic
//! generator with controllable label and language bias.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Mat;

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const MASK_ID: usize = 2;
/// Number of reserved token ids at the bottom of every vocabulary.
pub const RESERVED_TOKENS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// One utterance: token ids, audio and vision feature matrices, and a
/// sentiment score in [-3, 3].
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub tokens: Vec<usize>,
    pub audio: Mat,
    pub vision: Mat,
    pub score: f64,
}

impl Sample {
    pub fn lengths(&self) -> (usize, usize, usize) {
        (self.tokens.len(), self.audio.nrows(), self.vision.nrows())
    }

    pub fn label(&self, cls: usize) -> usize {
        class_label(self.score, cls)
    }
}

/// Maps a sentiment score to a class index: for two classes negative (< 0)
/// is 0 and non-negative is 1; for seven classes the rounded score clipped to
/// [-3, 3] and shifted to 0..=6.
pub fn class_label(score: f64, cls: usize) -> usize {
    match cls {
        2 => usize::from(score >= 0.0),
        7 => (score.round().clamp(-3.0, 3.0) + 3.0) as usize,
        _ => panic!("unsupported class count {cls}"),
    }
}

/// Binary label implied by a class index under `cls` classes.
pub fn binary_of_class(class: usize, cls: usize) -> usize {
    match cls {
        2 => class,
        // Class 3 (score rounds to 0) is non-negative.
        7 => usize::from(class >= 3),
        _ => panic!("unsupported class count {cls}"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub vocab_size: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub cls: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    split: Split,
    score: f64,
    tokens: Vec<usize>,
    audio: Vec<Vec<f64>>,
    vision: Vec<Vec<f64>>,
}

fn rows_to_mat(rows: &[Vec<f64>], width: usize) -> Mat {
    Array2::from_shape_fn((rows.len(), width), |(r, c)| rows[r][c])
}

fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

impl Dataset {
    pub fn empty(cls: usize) -> Self {
        Self {
            samples: Vec::new(),
            vocab_size: RESERVED_TOKENS,
            d_a: 0,
            d_v: 0,
            cls,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn split_vec(&self, split: Split) -> Vec<Sample> {
        self.split(split).cloned().collect()
    }

    pub fn with_classes(mut self, cls: usize) -> Result<Self> {
        if cls != 2 && cls != 7 {
            return Err(Error::InvalidArgument(format!(
                "class count must be 2 or 7, got {cls}"
            )));
        }
        self.cls = cls;
        Ok(self)
    }

    /// Parses the line-delimited feature format. Feature widths are fixed by
    /// the first record that has rows; the vocabulary covers every id seen.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        let mut samples = Vec::new();
        let mut d_a: Option<usize> = None;
        let mut d_v: Option<usize> = None;
        let mut max_token = 0;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: e.to_string(),
            })?;
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg,
            };
            if rec.tokens.is_empty() {
                return Err(parse_err("`tokens` must not be empty".into()));
            }
            if !(-3.0..=3.0).contains(&rec.score) {
                return Err(parse_err(format!("score {} outside [-3, 3]", rec.score)));
            }
            for (field, rows, width) in [("audio", &rec.audio, &mut d_a), ("vision", &rec.vision, &mut d_v)] {
                for row in rows.iter() {
                    let expected = *width.get_or_insert(row.len());
                    if row.len() != expected {
                        return Err(Error::DimensionMismatch {
                            line: line_no,
                            field: field.to_string(),
                            expected,
                            found: row.len(),
                        });
                    }
                    if row.iter().any(|x| !x.is_finite()) {
                        return Err(parse_err(format!("non-finite value in `{field}`")));
                    }
                }
            }
            max_token = max_token.max(*rec.tokens.iter().max().unwrap());
            samples.push(rec);
        }
        let d_a = d_a.unwrap_or(0);
        let d_v = d_v.unwrap_or(0);
        let samples = samples
            .into_iter()
            .map(|r| Sample {
                audio: rows_to_mat(&r.audio, d_a),
                vision: rows_to_mat(&r.vision, d_v),
                id: r.id,
                split: r.split,
                tokens: r.tokens,
                score: r.score,
            })
            .collect::<Vec<_>>();
        let vocab_size = if samples.is_empty() {
            RESERVED_TOKENS
        } else {
            (max_token + 1).max(RESERVED_TOKENS)
        };
        Ok(Self {
            samples,
            vocab_size,
            d_a,
            d_v,
            cls: 2,
        })
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        for s in &self.samples {
            let rec = Record {
                id: s.id.clone(),
                split: s.split,
                score: s.score,
                tokens: s.tokens.clone(),
                audio: mat_to_rows(&s.audio),
                vision: mat_to_rows(&s.vision),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Shape and noise knobs for [`synth_dataset_with`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub text_len: usize,
    pub audio_len: usize,
    pub vision_len: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub filler_vocab: usize,
    /// Audio/vision frames share the text length when set (needed by the
    /// temporal missing scenarios).
    pub aligned: bool,
    /// Probability that the class marker token sits at its class position.
    pub marker_reliability: f64,
    pub feature_noise: f64,
    pub train_frac: f64,
    pub valid_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            text_len: 8,
            audio_len: 12,
            vision_len: 10,
            d_a: 5,
            d_v: 8,
            filler_vocab: 40,
            aligned: false,
            marker_reliability: 0.6,
            feature_noise: 1.0,
            train_frac: 0.7,
            valid_frac: 0.1,
        }
    }
}

const MARKER_ID: usize = RESERVED_TOKENS;

fn bias_token(class: usize) -> usize {
    RESERVED_TOKENS + 1 + class
}

/// Synthetic dataset with default shapes, see [`synth_dataset_with`].
pub fn synth_dataset(n: usize, cls: usize, bias_strength: f64, seed: u64) -> Result<Dataset> {
    synth_dataset_with(n, cls, bias_strength, seed, &SynthConfig::default())
}

/// Generates `n` samples split into train/valid/test.
///
/// Every modality carries a genuine class signal: the text has a marker token
/// whose position encodes the class, and audio/vision channel 0 follows the
/// score. Filler text is drawn from a class-independent stream shared by the
/// k-th sample of every class, so with `bias_strength = 0` and balanced
/// classes every token has the same per-class count.
///
/// `bias_strength` skews the train/valid label prior toward low classes and,
/// with that probability, plants a class-specific bias token. The test split
/// is anti-biased: reversed prior, and the planted token belongs to the next
/// class.
pub fn synth_dataset_with(
    n: usize,
    cls: usize,
    bias_strength: f64,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<Dataset> {
    if cls != 2 && cls != 7 {
        return Err(Error::InvalidArgument(format!(
            "class count must be 2 or 7, got {cls}"
        )));
    }
    if n < cls {
        return Err(Error::InvalidArgument(format!(
            "need at least {cls} samples, got {n}"
        )));
    }
    if !(0.0..=1.0).contains(&bias_strength) {
        return Err(Error::InvalidArgument(format!(
            "bias strength {bias_strength} outside [0, 1]"
        )));
    }
    let text_len = cfg.text_len.max(cls + 3);
    let (audio_len, vision_len) = if cfg.aligned {
        (text_len, text_len)
    } else {
        (cfg.audio_len, cfg.vision_len)
    };
    let filler_start = RESERVED_TOKENS + 1 + cls;
    let vocab_size = filler_start + cfg.filler_vocab;

    let n_train = ((n as f64) * cfg.train_frac).round() as usize;
    let n_valid = (((n as f64) * cfg.valid_frac).round() as usize).min(n - n_train);
    let n_test = n - n_train - n_valid;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.feature_noise.max(1e-12)).unwrap();
    let mut samples = Vec::with_capacity(n);

    for (split, size) in [(Split::Train, n_train), (Split::Valid, n_valid), (Split::Test, n_test)] {
        let reversed = split == Split::Test;
        let counts = class_allocation(size, cls, bias_strength, reversed);
        let mut labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
            .collect();
        labels.shuffle(&mut rng);
        let mut seen = vec![0usize; cls];
        for (i, &class) in labels.iter().enumerate() {
            let k = seen[class];
            seen[class] += 1;
            // Filler stream keyed by (split, rank within class) only.
            let mut filler_rng = ChaCha8Rng::seed_from_u64(
                seed ^ 0x9e37_79b9_7f4a_7c15 ^ ((split as u64) << 40) ^ (k as u64),
            );
            let mut tokens = Vec::with_capacity(text_len);
            tokens.push(BOS_ID);
            for _ in 0..text_len - 2 {
                tokens.push(filler_start + filler_rng.gen_range(0..cfg.filler_vocab));
            }
            let marker_pos = if rng.gen::<f64>() < cfg.marker_reliability {
                1 + class
            } else {
                rng.gen_range(1..text_len)
            };
            tokens.insert(marker_pos, MARKER_ID);
            if bias_strength > 0.0 && rng.gen::<f64>() < bias_strength {
                let owner = if reversed { (class + 1) % cls } else { class };
                let mut pos = rng.gen_range(1..text_len);
                if pos == marker_pos {
                    pos = if pos + 1 < text_len { pos + 1 } else { 1 };
                }
                tokens[pos] = bias_token(owner);
            }

            let score = class_score(class, cls, &mut rng);
            let signal = score / 3.0;
            let mut features = |len: usize, width: usize| {
                Array2::from_shape_fn((len, width), |(_, c)| {
                    let e = noise.sample(&mut rng);
                    if c == 0 {
                        signal + e
                    } else {
                        e
                    }
                })
            };
            let audio = features(audio_len, cfg.d_a);
            let vision = features(vision_len, cfg.d_v);
            samples.push(Sample {
                id: format!("{split}-{i:05}"),
                split,
                tokens,
                audio,
                vision,
                score,
            });
        }
    }

    Ok(Dataset {
        samples,
        vocab_size,
        d_a: cfg.d_a,
        d_v: cfg.d_v,
        cls,
    })
}

/// Largest-remainder allocation of `size` samples over classes with weights
/// skewed toward class 0 (or the last class when `reversed`).
fn class_allocation(size: usize, cls: usize, bias: f64, reversed: bool) -> Vec<usize> {
    let weights: Vec<f64> = (0..cls)
        .map(|c| {
            let tilt = (cls as f64 - 1.0 - 2.0 * c as f64) / (cls as f64 - 1.0);
            let tilt = if reversed { -tilt } else { tilt };
            1.0 + 0.5 * bias * tilt
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * size as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = size - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..cls).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[c] += 1;
        rest -= 1;
    }
    counts
}

fn class_score<R: Rng>(class: usize, cls: usize, rng: &mut R) -> f64 {
    match cls {
        2 => {
            if class == 0 {
                -rng.gen_range(0.2..3.0)
            } else {
                rng.gen_range(0.0..3.0)
            }
        }
        _ => (class as f64 - 3.0 + rng.gen_range(-0.45..0.45)).clamp(-3.0, 3.0),
    }
}
