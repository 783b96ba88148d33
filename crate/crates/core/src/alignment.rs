//! Word-level self-aligned attention and per-modality temporal encoding.
//!
//! WSAM uses the projected text sequence as queries over a longer audio or
//! vision sequence, so every non-language stream comes out with exactly
//! `T_l` rows regardless of its input length.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Mat, Var, NEG_INF_SURROGATE};
use crate::layers::{Gru, Session};
use crate::params::{ParamId, ParamStore};

/// Additive `T_q x T_k` mask: 0 admits a key, the surrogate excludes it.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidityMask(pub Mat);

impl ValidityMask {
    pub fn all_valid(t_q: usize, t_k: usize) -> Self {
        Self(Mat::zeros((t_q, t_k)))
    }

    /// Excludes every key position whose flag is false, for all queries.
    pub fn from_key_padding(t_q: usize, valid_keys: &[bool]) -> Self {
        let mut m = Mat::zeros((t_q, valid_keys.len()));
        for (c, &ok) in valid_keys.iter().enumerate() {
            if !ok {
                m.column_mut(c).fill(NEG_INF_SURROGATE);
            }
        }
        Self(m)
    }
}

/// Query/key/value projections of one single-head alignment attention.
#[derive(Clone, Debug)]
pub struct Wsam {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub d: usize,
}

impl Wsam {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_q: store.insert_uniform(format!("{name}.w_q"), d, d, d, rng),
            w_k: store.insert_uniform(format!("{name}.w_k"), d, d, d, rng),
            w_v: store.insert_uniform(format!("{name}.w_v"), d, d, d, rng),
            d,
        }
    }

    /// `softmax(X_l W_Q (X_x W_K)^T / sqrt(d) + mask) X_x W_V`. Rows whose
    /// keys are all excluded come out as zeros.
    pub fn forward(
        &self,
        s: &mut Session,
        x_l: Var,
        x_x: Var,
        mask: Option<&ValidityMask>,
    ) -> Result<Var> {
        let (t_l, d_l) = s.g.shape(x_l);
        let (t_x, d_x) = s.g.shape(x_x);
        if d_l != self.d || d_x != self.d {
            return Err(Error::Shape(format!(
                "alignment expects width {}, got {d_l} and {d_x}",
                self.d
            )));
        }
        if let Some(m) = mask {
            if m.0.dim() != (t_l, t_x) {
                return Err(Error::Shape(format!(
                    "alignment mask is {:?}, expected ({t_l}, {t_x})",
                    m.0.dim()
                )));
            }
        }
        let wq = s.param(self.w_q);
        let wk = s.param(self.w_k);
        let wv = s.param(self.w_v);
        let q = s.g.matmul(x_l, wq);
        let k = s.g.matmul(x_x, wk);
        let v = s.g.matmul(x_x, wv);
        let kt = s.g.transpose(k);
        let logits = s.g.matmul(q, kt);
        let logits = s.g.scale(logits, 1.0 / (self.d as f64).sqrt());
        let attn = s.g.softmax_rows(logits, mask.map(|m| &m.0));
        Ok(s.g.matmul(attn, v))
    }
}

/// Runs the recurrent encoder over a `T x d` sequence.
pub fn gru_encode(s: &mut Session, seq: Var, gru: &Gru) -> Var {
    gru.forward(s, seq)
}

/// Parameter-free stand-in used when alignment is ablated: average-pools a
/// `T_x`-row sequence onto `t_l` evenly spaced windows.
pub fn average_resample(s: &mut Session, x: Var, t_l: usize) -> Var {
    let t_x = s.g.shape(x).0;
    let mut pool = Mat::zeros((t_l, t_x));
    for i in 0..t_l {
        let start = i * t_x / t_l;
        let end = (((i + 1) * t_x).div_ceil(t_l)).max(start + 1).min(t_x);
        let w = 1.0 / (end - start) as f64;
        for j in start..end {
            pool[[i, j]] = w;
        }
    }
    let p = s.g.constant(pool);
    s.g.matmul(p, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::masked_softmax;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_wsam(store: &mut ParamStore, d: usize) -> Wsam {
        let eye = Array2::eye(d);
        Wsam {
            w_q: store.insert("q", eye.clone()),
            w_k: store.insert("k", eye.clone()),
            w_v: store.insert("v", eye),
            d,
        }
    }

    #[test]
    fn hand_computed_two_key_case() {
        let mut store = ParamStore::new();
        let w = identity_wsam(&mut store, 1);
        let mut s = Session::eval(&store);
        // Query 1 against keys (1, 3): logits (1, 3), output softmax(1,3)·(1,3).
        let xl = s.g.constant(array![[1.0]]);
        let xx = s.g.constant(array![[1.0], [3.0]]);
        let out = w.forward(&mut s, xl, xx, None).unwrap();
        let e1 = 1f64.exp();
        let e3 = 3f64.exp();
        let expected = (e1 * 1.0 + e3 * 3.0) / (e1 + e3);
        assert!((s.g.scalar(out) - expected).abs() < 1e-12);
        assert!((expected - 2.762).abs() < 1e-3);
    }

    #[test]
    fn zero_query_row_gives_uniform_attention() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Wsam::new(&mut store, "w", 3, &mut rng);
        let xx_val = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let mut s = Session::eval(&store);
        let xl = s.g.constant(Mat::zeros((1, 3)));
        let xx = s.g.constant(xx_val.clone());
        let out = w.forward(&mut s, xl, xx, None).unwrap();
        let vals = xx_val.dot(store.get(w.w_v));
        let mean = vals.mean_axis(ndarray::Axis(0)).unwrap();
        for c in 0..3 {
            assert!((s.g.value(out)[[0, c]] - mean[c]).abs() < 1e-12);
        }

        let mut s = Session::eval(&store);
        let xl = s.g.constant(Mat::zeros((2, 3)));
        let single = xx_val.slice(ndarray::s![0..1, ..]).to_owned();
        let xx = s.g.constant(single.clone());
        let out = w.forward(&mut s, xl, xx, None).unwrap();
        let v = single.dot(store.get(w.w_v));
        for r in 0..2 {
            assert!((&s.g.value(out).row(r) - &v.row(0)).iter().all(|e| e.abs() < 1e-12));
        }
    }

    #[test]
    fn output_length_follows_text_and_padding_is_ignored() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Wsam::new(&mut store, "w", 4, &mut rng);
        let xl_val = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let xx_val = Array2::from_shape_fn((7, 4), |_| rng.gen_range(-1.0..1.0));
        let mask = ValidityMask::from_key_padding(3, &[true, true, true, true, true, false, false]);

        let mut s = Session::eval(&store);
        let xl = s.g.constant(xl_val.clone());
        let xx = s.g.constant(xx_val.clone());
        let masked = w.forward(&mut s, xl, xx, Some(&mask)).unwrap();
        assert_eq!(s.g.shape(masked), (3, 4));

        let mut s2 = Session::eval(&store);
        let xl = s2.g.constant(xl_val);
        let xx = s2.g.constant(xx_val.slice(ndarray::s![0..5, ..]).to_owned());
        let trimmed = w.forward(&mut s2, xl, xx, None).unwrap();
        assert!((s.g.value(masked) - s2.g.value(trimmed)).iter().all(|e| e.abs() < 1e-12));

        let mut s3 = Session::eval(&store);
        let xl = s3.g.constant(Mat::ones((2, 4)));
        let xx = s3.g.constant(Mat::ones((2, 4)));
        let none = ValidityMask::from_key_padding(2, &[false, false]);
        let out = w.forward(&mut s3, xl, xx, Some(&none)).unwrap();
        assert!(s3.g.value(out).iter().all(|&e| e == 0.0));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-5.0..5.0));
        let mask = ValidityMask::from_key_padding(4, &[true, false, true, true, false, true]);
        let p = masked_softmax(&logits, Some(&mask.0));
        for row in p.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert_eq!(row[1], 0.0);
        }
    }

    #[test]
    fn gru_base_cases() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gru = Gru::new(&mut store, "g", 3, 3, &mut rng);
        for id in [gru.w_ih, gru.w_hh, gru.b_ih, gru.b_hh] {
            store.get_mut(id).fill(0.0);
        }
        let mut s = Session::eval(&store);
        let x = s.g.constant(Array2::from_elem((4, 3), 0.7));
        let h = gru_encode(&mut s, x, &gru);
        assert!(s.g.value(h).iter().all(|&e| e == 0.0));

        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "g", 2, 3, &mut rng);
        let x_val = array![[0.5, -1.0]];
        let mut s = Session::eval(&store);
        let x = s.g.constant(x_val.clone());
        let h = gru_encode(&mut s, x, &gru);
        // One step from zero state, written out by hand.
        let gi = x_val.dot(store.get(gru.w_ih)) + store.get(gru.b_ih);
        let gh = store.get(gru.b_hh).clone();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        for j in 0..3 {
            let r = sig(gi[[0, j]] + gh[[0, j]]);
            let z = sig(gi[[0, 3 + j]] + gh[[0, 3 + j]]);
            let n = (gi[[0, 6 + j]] + r * gh[[0, 6 + j]]).tanh();
            let expected = (1.0 - z) * n;
            assert!((s.g.value(h)[[0, j]] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_is_order_sensitive() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gru = Gru::new(&mut store, "g", 2, 2, &mut rng);
        let x_val = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let mut rev = x_val.clone();
        rev.invert_axis(ndarray::Axis(0));
        let mut s = Session::eval(&store);
        let a = s.g.constant(x_val);
        let b = s.g.constant(rev);
        let ha = gru_encode(&mut s, a, &gru);
        let hb = gru_encode(&mut s, b, &gru);
        let mut hb_rev = s.g.value(hb).clone();
        hb_rev.invert_axis(ndarray::Axis(0));
        assert!((s.g.value(ha) - &hb_rev).iter().any(|e| e.abs() > 1e-6));
    }

    #[test]
    fn average_resample_shapes() {
        let store = ParamStore::new();
        let mut s = Session::eval(&store);
        let x = s.g.constant(array![[1.0], [2.0], [3.0], [4.0], [5.0], [6.0]]);
        let y = average_resample(&mut s, x, 3);
        assert_eq!(s.g.value(y), &array![[1.5], [3.5], [5.5]]);
        let y = average_resample(&mut s, x, 4);
        assert_eq!(s.g.shape(y), (4, 1));
    }
}
