//! Parameterized building blocks shared by the model modules.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::params::{ParamId, ParamStore};

/// One forward pass: the graph being built, the parameters it reads, and the
/// dropout RNG (`None` disables dropout).
pub struct Session<'a> {
    pub g: Graph,
    pub store: &'a ParamStore,
    rng: Option<ChaCha8Rng>,
}

impl<'a> Session<'a> {
    pub fn eval(store: &'a ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            rng: None,
        }
    }

    pub fn train(store: &'a ParamStore, rng: ChaCha8Rng) -> Self {
        Self {
            g: Graph::new(),
            store,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    /// Inverted dropout; identity when not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let mask = Array2::from_shape_fn(self.g.shape(x), |_| {
            if rng.gen::<f64>() < p {
                0.0
            } else {
                keep
            }
        });
        let m = self.g.constant(mask);
        self.g.mul(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let w = store.insert_uniform(format!("{name}.w"), d_in, d_out, d_in, rng);
        let b = store.insert_uniform(format!("{name}.b"), 1, d_out, d_in, rng);
        Self {
            w,
            b: Some(b),
            d_in,
            d_out,
        }
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let w = store.insert_uniform(format!("{name}.w"), d_in, d_out, d_in, rng);
        Self {
            w,
            b: None,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.param(self.w);
        let y = s.g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = s.param(b);
                s.g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Learnable token lookup table standing in for a pretrained text encoder.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut table = Array2::from_shape_fn((vocab, dim), |_| rng.gen_range(-1.0..1.0));
        // Padding embeds to zero.
        table.row_mut(crate::data::PAD_ID).fill(0.0);
        let table = store.insert(format!("{name}.table"), table);
        Self { table, vocab, dim }
    }

    pub fn check(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.vocab) {
            Some(&id) => Err(Error::OutOfVocabulary {
                id,
                vocab: self.vocab,
            }),
            None => Ok(()),
        }
    }

    pub fn forward(&self, s: &mut Session, tokens: &[usize]) -> Result<Var> {
        self.check(tokens)?;
        let t = s.param(self.table);
        Ok(s.g.gather_rows(t, tokens.iter().map(|&i| Some(i)).collect()))
    }
}

/// Looks tokens up in a plain embedding matrix.
pub fn embed_text(tokens: &[usize], table: &Mat) -> Result<Mat> {
    let mut out = Mat::zeros((tokens.len(), table.ncols()));
    for (i, &t) in tokens.iter().enumerate() {
        if t >= table.nrows() {
            return Err(Error::OutOfVocabulary {
                id: t,
                vocab: table.nrows(),
            });
        }
        out.row_mut(i).assign(&table.row(t));
    }
    Ok(out)
}

/// Temporal 1-D convolution over the rows of a `T x d_in` sequence with
/// symmetric zero padding, so the output keeps length `T`.
#[derive(Clone, Debug)]
pub struct ConvProjection {
    pub taps: Vec<ParamId>,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl ConvProjection {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel width must be odd");
        let fan_in = d_in * kernel;
        let taps = (0..kernel)
            .map(|k| store.insert_uniform(format!("{name}.tap{k}"), d_in, d_out, fan_in, rng))
            .collect();
        let bias = store.insert_uniform(format!("{name}.b"), 1, d_out, fan_in, rng);
        Self {
            taps,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn kernel(&self) -> usize {
        self.taps.len()
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (t, d_in) = s.g.shape(x);
        if d_in != self.d_in {
            return Err(Error::Shape(format!(
                "convolution expects width {}, got {d_in}",
                self.d_in
            )));
        }
        let half = (self.kernel() / 2) as isize;
        let mut acc: Option<Var> = None;
        for (k, &tap) in self.taps.iter().enumerate() {
            let offset = k as isize - half;
            let shifted = if offset == 0 {
                x
            } else {
                let idx = (0..t as isize)
                    .map(|i| {
                        let j = i + offset;
                        (0..t as isize).contains(&j).then_some(j as usize)
                    })
                    .collect();
                s.g.gather_rows(x, idx)
            };
            let w = s.param(tap);
            let y = s.g.matmul(shifted, w);
            acc = Some(match acc {
                Some(a) => s.g.add(a, y),
                None => y,
            });
        }
        let b = s.param(self.bias);
        Ok(s.g.add_row(acc.expect("kernel is non-empty"), b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Mat::ones((1, dim))),
            beta: store.insert(format!("{name}.beta"), Mat::zeros((1, dim))),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.g.layer_norm(x, g, b)
    }
}

/// Position-wise `d -> 4d -> d` feed-forward block with a rectifier.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, 4 * d, rng),
            down: Linear::new(store, &format!("{name}.down"), 4 * d, d, rng),
            dropout,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let h = self.up.forward(s, x);
        let h = s.g.relu(h);
        let h = s.dropout(h, self.dropout);
        self.down.forward(s, h)
    }
}

/// Single-layer gated recurrent unit, zero initial state.
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_ih: store.insert_uniform(format!("{name}.w_ih"), d_in, 3 * hidden, hidden, rng),
            w_hh: store.insert_uniform(format!("{name}.w_hh"), hidden, 3 * hidden, hidden, rng),
            b_ih: store.insert_uniform(format!("{name}.b_ih"), 1, 3 * hidden, hidden, rng),
            b_hh: store.insert_uniform(format!("{name}.b_hh"), 1, 3 * hidden, hidden, rng),
            d_in,
            hidden,
        }
    }

    /// Returns the full `T x hidden` sequence of hidden states.
    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let t = s.g.shape(x).0;
        let w_ih = s.param(self.w_ih);
        let b_ih = s.param(self.b_ih);
        let w_hh = s.param(self.w_hh);
        let b_hh = s.param(self.b_hh);
        let gi_all = s.g.matmul(x, w_ih);
        let gi_all = s.g.add_row(gi_all, b_ih);
        let mut h = s.g.constant(Mat::zeros((1, self.hidden)));
        let mut states = Vec::with_capacity(t);
        for step in 0..t {
            let gi = s.g.slice_rows(gi_all, step, 1);
            let gh = s.g.matmul(h, w_hh);
            let gh = s.g.add_row(gh, b_hh);
            h = s.g.gru_cell(gi, gh, h);
            states.push(h);
        }
        s.g.concat_rows(&states)
    }
}
