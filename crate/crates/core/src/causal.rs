//! Model-agnostic causal inference: backdoor adjustment over class-level
//! confounders and counterfactual text subtraction at test time.
//!
//! [`Mcm::forward`] only needs a joint vector and a [`ClassPriorTable`], so
//! it can sit on top of any backbone that produces one.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, Split, BOS_ID, MASK_ID, PAD_ID, RESERVED_TOKENS};
use crate::error::{Error, Result};
use crate::graph::{Mat, Var};
use crate::layers::{Linear, Session};
use crate::params::ParamStore;

/// Frequency cut-off for counterfactual word candidates.
pub const CF_TOP_K: usize = 100;
/// Minimum coefficient of variation for a word to count as class-indicative.
pub const CF_MIN_CV: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableMode {
    /// Priors from label counts.
    Train,
    /// Uniform priors; every class assumed equally frequent.
    Test,
}

/// Class priors and per-class mean features (time-averaged, then averaged
/// over the class's samples).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPriorTable {
    pub priors: Vec<f64>,
    pub text_means: Mat,
    pub audio_means: Mat,
    pub vision_means: Mat,
}

fn time_mean(m: &Mat) -> ndarray::Array1<f64> {
    m.mean_axis(ndarray::Axis(0))
        .unwrap_or_else(|| ndarray::Array1::zeros(m.ncols()))
}

/// Builds the table from `samples` (normally the training split). Text means
/// are taken over rows of `embedding` looked up by token.
pub fn build_class_table(
    samples: &[&Sample],
    cls: usize,
    embedding: &Mat,
    mode: TableMode,
) -> Result<ClassPriorTable> {
    let first = samples.first().ok_or(Error::EmptyBatch)?;
    let (d_l, d_a, d_v) = (embedding.ncols(), first.audio.ncols(), first.vision.ncols());
    let mut counts = vec![0usize; cls];
    let mut text = Mat::zeros((cls, d_l));
    let mut audio = Mat::zeros((cls, d_a));
    let mut vision = Mat::zeros((cls, d_v));
    for s in samples {
        let c = s.label(cls);
        counts[c] += 1;
        let emb = crate::layers::embed_text(&s.tokens, embedding)?;
        let mut row = text.row_mut(c);
        row += &time_mean(&emb);
        let mut row = audio.row_mut(c);
        row += &time_mean(&s.audio);
        let mut row = vision.row_mut(c);
        row += &time_mean(&s.vision);
    }
    let n = samples.len() as f64;
    let global = [
        text.sum_axis(ndarray::Axis(0)) / n,
        audio.sum_axis(ndarray::Axis(0)) / n,
        vision.sum_axis(ndarray::Axis(0)) / n,
    ];
    for (c, &k) in counts.iter().enumerate() {
        if k == 0 {
            if mode == TableMode::Train {
                return Err(Error::EmptyClass(c));
            }
            text.row_mut(c).assign(&global[0]);
            audio.row_mut(c).assign(&global[1]);
            vision.row_mut(c).assign(&global[2]);
            continue;
        }
        let k = k as f64;
        text.row_mut(c).mapv_inplace(|x| x / k);
        audio.row_mut(c).mapv_inplace(|x| x / k);
        vision.row_mut(c).mapv_inplace(|x| x / k);
    }
    let priors = match mode {
        TableMode::Train => counts.iter().map(|&k| k as f64 / n).collect(),
        TableMode::Test => vec![1.0 / cls as f64; cls],
    };
    Ok(ClassPriorTable {
        priors,
        text_means: text,
        audio_means: audio,
        vision_means: vision,
    })
}

impl ClassPriorTable {
    pub fn cls(&self) -> usize {
        self.priors.len()
    }

    /// Same class means under the equal-frequency assumption.
    pub fn uniform(&self) -> Self {
        let cls = self.cls();
        Self {
            priors: vec![1.0 / cls as f64; cls],
            ..self.clone()
        }
    }
}

/// Shared three-layer encoder `d_x -> d -> d -> d`.
#[derive(Clone, Debug)]
pub struct SharedMlp {
    pub layers: [Linear; 3],
}

impl SharedMlp {
    fn new(store: &mut ParamStore, name: &str, d_in: usize, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            layers: [
                Linear::new(store, &format!("{name}.0"), d_in, d, rng),
                Linear::new(store, &format!("{name}.1"), d, d, rng),
                Linear::new(store, &format!("{name}.2"), d, d, rng),
            ],
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Var {
        let h = self.layers[0].forward(s, x);
        let h = s.g.relu(h);
        let h = self.layers[1].forward(s, h);
        let h = s.g.relu(h);
        self.layers[2].forward(s, h)
    }
}

/// Backdoor-adjusted output head.
#[derive(Clone, Debug)]
pub struct Mcm {
    pub mlp_l: SharedMlp,
    pub mlp_a: SharedMlp,
    pub mlp_v: SharedMlp,
    pub classifiers: Vec<Linear>,
    pub d: usize,
}

pub struct McmOutput {
    /// Prior-weighted logits.
    pub y: Var,
    /// Unweighted per-class branch logits.
    pub branches: Vec<Var>,
}

impl Mcm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        d: usize,
        cls: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            mlp_l: SharedMlp::new(store, &format!("{name}.mlp_l"), dims.0, d, rng),
            mlp_a: SharedMlp::new(store, &format!("{name}.mlp_a"), dims.1, d, rng),
            mlp_v: SharedMlp::new(store, &format!("{name}.mlp_v"), dims.2, d, rng),
            classifiers: (0..cls)
                .map(|i| Linear::new(store, &format!("{name}.cls{i}"), 6 * d, cls, rng))
                .collect(),
            d,
        }
    }

    /// `y' = sum_i P(i) Classifier_i([h_m; MLP(L_i); MLP(A_i); MLP(V_i)])`.
    pub fn forward(&self, s: &mut Session, h_m: Var, table: &ClassPriorTable) -> Result<McmOutput> {
        mcm_forward(s, h_m, table, self)
    }
}

pub fn mcm_forward(s: &mut Session, h_m: Var, table: &ClassPriorTable, mcm: &Mcm) -> Result<McmOutput> {
    let cls = mcm.classifiers.len();
    if s.g.shape(h_m) != (1, 3 * mcm.d) {
        return Err(Error::Shape(format!(
            "joint vector is {:?}, expected (1, {})",
            s.g.shape(h_m),
            3 * mcm.d
        )));
    }
    if table.cls() != cls {
        return Err(Error::Shape(format!(
            "class table has {} classes, head has {cls}",
            table.cls()
        )));
    }
    for (name, m, lin) in [
        ("text", &table.text_means, &mcm.mlp_l),
        ("audio", &table.audio_means, &mcm.mlp_a),
        ("vision", &table.vision_means, &mcm.mlp_v),
    ] {
        if m.ncols() != lin.layers[0].d_in {
            return Err(Error::Shape(format!(
                "{name} class means have width {}, encoder expects {}",
                m.ncols(),
                lin.layers[0].d_in
            )));
        }
    }
    let tl = s.g.constant(table.text_means.clone());
    let ta = s.g.constant(table.audio_means.clone());
    let tv = s.g.constant(table.vision_means.clone());
    let hl = mcm.mlp_l.forward(s, tl);
    let ha = mcm.mlp_a.forward(s, ta);
    let hv = mcm.mlp_v.forward(s, tv);

    let mut branches = Vec::with_capacity(cls);
    let mut y: Option<Var> = None;
    for (i, clf) in mcm.classifiers.iter().enumerate() {
        let li = s.g.slice_rows(hl, i, 1);
        let ai = s.g.slice_rows(ha, i, 1);
        let vi = s.g.slice_rows(hv, i, 1);
        let hc = s.g.concat_cols(&[h_m, li, ai, vi]);
        let yi = clf.forward(s, hc);
        branches.push(yi);
        let weighted = s.g.scale(yi, table.priors[i]);
        y = Some(match y {
            Some(acc) => s.g.add(acc, weighted),
            None => weighted,
        });
    }
    Ok(McmOutput {
        y: y.ok_or(Error::EmptyClass(0))?,
        branches,
    })
}

/// Class-indicative words kept in counterfactual text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualVocab {
    /// Observed tokens by descending training frequency (ties by id).
    pub ranked: Vec<usize>,
    pub cv: BTreeMap<usize, f64>,
    pub retained: BTreeSet<usize>,
}

/// Coefficient of variation with the population standard deviation.
pub fn coefficient_of_variation(counts: &[f64]) -> f64 {
    let n = counts.len() as f64;
    let mu = counts.iter().sum::<f64>() / n;
    let var = counts.iter().map(|c| (c - mu).powi(2)).sum::<f64>() / n;
    var.sqrt() / mu
}

/// Counts every non-reserved token per class over the training split.
pub fn build_counterfactual_vocab(dataset: &Dataset, cls: usize) -> Result<CounterfactualVocab> {
    if !(cls == 2 || cls == 7) {
        return Err(Error::InvalidArgument(format!("unsupported class count {cls}")));
    }
    let mut counts: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for s in dataset.split(Split::Train) {
        let c = s.label(cls);
        for &t in s.tokens.iter().filter(|&&t| t >= RESERVED_TOKENS) {
            counts.entry(t).or_insert_with(|| vec![0.0; cls])[c] += 1.0;
        }
    }
    let mut ranked: Vec<(usize, f64)> = counts
        .iter()
        .map(|(&t, n)| (t, n.iter().sum::<f64>()))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let cv: BTreeMap<usize, f64> = counts
        .iter()
        .map(|(&t, n)| (t, coefficient_of_variation(n)))
        .collect();
    let retained = ranked
        .iter()
        .take(CF_TOP_K)
        .filter(|(t, _)| cv[t] >= CF_MIN_CV)
        .map(|&(t, _)| t)
        .collect();
    Ok(CounterfactualVocab {
        ranked: ranked.into_iter().map(|(t, _)| t).collect(),
        cv,
        retained,
    })
}

impl CounterfactualVocab {
    /// One `token_id<TAB>cv<TAB>retained` line per observed token, in rank order.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for t in &self.ranked {
            writeln!(out, "{t}\t{}\t{}", self.cv[t], u8::from(self.retained.contains(t)))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_tsv(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut v = Self {
            ranked: Vec::new(),
            cv: BTreeMap::new(),
            retained: BTreeSet::new(),
        };
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            let err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let mut parts = line.split('\t');
            let (Some(t), Some(cv), Some(r), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(err("expected three tab-separated fields"));
            };
            let t: usize = t.parse().map_err(|_| err("bad token id"))?;
            let cv: f64 = cv.parse().map_err(|_| err("bad cv"))?;
            v.ranked.push(t);
            v.cv.insert(t, cv);
            match r {
                "1" => {
                    v.retained.insert(t);
                }
                "0" => {}
                _ => return Err(err("retained flag must be 0 or 1")),
            }
        }
        Ok(v)
    }
}

/// Keeps retained words, padding and the sequence-start marker; every other
/// token becomes the mask token.
pub fn make_counterfactual_text(tokens: &[usize], vocab: &CounterfactualVocab) -> Vec<usize> {
    tokens
        .iter()
        .map(|&t| {
            if t == PAD_ID || t == BOS_ID || vocab.retained.contains(&t) {
                t
            } else {
                MASK_ID
            }
        })
        .collect()
}

/// `y_do - tau * y_cf` on logits.
pub fn debias_predict(y_do: &[f64], y_cf: &[f64], tau: f64) -> Vec<f64> {
    y_do.iter().zip(y_cf).map(|(a, b)| a - tau * b).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
