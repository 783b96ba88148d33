//! Multimodal composite transformer.
//!
//! The three aligned streams are stacked into one `3T x d` sequence and a
//! single set of query/key/value projections is shared by seven attention
//! views (trimodal, three bimodal, three unimodal). Each view is the same
//! logit matrix under a different block mask, so every view is equivalent
//! to ordinary self-attention over its own subset of modalities.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Mat, Var, NEG_INF_SURROGATE};
use crate::layers::{FeedForward, LayerNorm, Linear, Session};
use crate::params::{ParamId, ParamStore};

pub const VIEW_NAMES: [&str; 7] = ["tri", "bi_la", "bi_lv", "bi_av", "uni_l", "uni_a", "uni_v"];

const TRI: usize = 0;
const BI_LA: usize = 1;
const BI_LV: usize = 2;
const BI_AV: usize = 3;
const UNI: [usize; 3] = [4, 5, 6];

/// Views feeding each modality's reduction, in concatenation order:
/// trimodal, the two bimodal views containing it, its unimodal view.
const MODALITY_VIEWS: [[usize; 4]; 3] = [
    [TRI, BI_LA, BI_LV, UNI[0]],
    [TRI, BI_LA, BI_AV, UNI[1]],
    [TRI, BI_LV, BI_AV, UNI[2]],
];

/// Additive `3T x 3T` masks for the seven views, in [`VIEW_NAMES`] order.
#[derive(Clone, Debug)]
pub struct CompositeMasks {
    pub t: usize,
    pub views: [Mat; 7],
}

/// Builds the block masks for a stacked sequence of three length-`t_l`
/// streams ordered language, audio, vision.
pub fn build_composite_masks(t_l: usize) -> CompositeMasks {
    let block = |members: &[usize]| {
        let mut m = Mat::from_elem((3 * t_l, 3 * t_l), NEG_INF_SURROGATE);
        for &r in members {
            for &c in members {
                m.slice_mut(ndarray::s![r * t_l..(r + 1) * t_l, c * t_l..(c + 1) * t_l])
                    .fill(0.0);
            }
        }
        m
    };
    CompositeMasks {
        t: t_l,
        views: [
            block(&[0, 1, 2]),
            block(&[0, 1]),
            block(&[0, 2]),
            block(&[1, 2]),
            block(&[0]),
            block(&[1]),
            block(&[2]),
        ],
    }
}

#[derive(Clone, Debug)]
pub struct Mca {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub view_proj: Vec<Linear>,
    pub reducers: Vec<Linear>,
    pub mixer: Linear,
    pub d: usize,
    pub n_heads: usize,
    pub attn_dropout: f64,
}

/// Result of one composite attention block.
pub struct McaOutput {
    pub out: Var,
    /// Pre-softmax trimodal logits, one `3T x 3T` matrix per head.
    pub attn_tri: Vec<Var>,
    /// Per-view attention outputs (heads concatenated) before projection.
    pub views: Vec<Var>,
}

impl Mca {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        n_heads: usize,
        attn_dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(n_heads > 0 && d % n_heads == 0, "d must split evenly across heads");
        Self {
            w_q: store.insert_uniform(format!("{name}.w_q"), d, d, d, rng),
            w_k: store.insert_uniform(format!("{name}.w_k"), d, d, d, rng),
            w_v: store.insert_uniform(format!("{name}.w_v"), d, d, d, rng),
            view_proj: VIEW_NAMES
                .iter()
                .map(|v| Linear::new(store, &format!("{name}.proj_{v}"), d, d, rng))
                .collect(),
            reducers: ["l", "a", "v"]
                .iter()
                .map(|m| Linear::new(store, &format!("{name}.reduce_{m}"), 4 * d, d, rng))
                .collect(),
            mixer: Linear::new(store, &format!("{name}.mixer"), d, d, rng),
            d,
            n_heads,
            attn_dropout,
        }
    }

    pub fn forward(&self, s: &mut Session, h: Var, masks: &CompositeMasks) -> Result<McaOutput> {
        let (rows, d) = s.g.shape(h);
        let t = masks.t;
        if rows != 3 * t || d != self.d {
            return Err(Error::Shape(format!(
                "composite attention expects ({}, {}), got ({rows}, {d})",
                3 * t,
                self.d
            )));
        }
        let dh = d / self.n_heads;
        let wq = s.param(self.w_q);
        let wk = s.param(self.w_k);
        let wv = s.param(self.w_v);
        let q = s.g.matmul(h, wq);
        let k = s.g.matmul(h, wk);
        let v = s.g.matmul(h, wv);

        let mut attn_tri = Vec::with_capacity(self.n_heads);
        let mut per_view: Vec<Vec<Var>> = (0..7).map(|_| Vec::with_capacity(self.n_heads)).collect();
        for head in 0..self.n_heads {
            let qh = s.g.slice_cols(q, head * dh, dh);
            let kh = s.g.slice_cols(k, head * dh, dh);
            let vh = s.g.slice_cols(v, head * dh, dh);
            let kt = s.g.transpose(kh);
            let logits = s.g.matmul(qh, kt);
            let logits = s.g.scale(logits, 1.0 / (dh as f64).sqrt());
            attn_tri.push(logits);
            for (view, mask) in masks.views.iter().enumerate() {
                let p = s.g.softmax_rows(logits, Some(mask));
                let p = s.dropout(p, self.attn_dropout);
                per_view[view].push(s.g.matmul(p, vh));
            }
        }
        let views: Vec<Var> = per_view
            .into_iter()
            .map(|heads| {
                if heads.len() == 1 {
                    heads[0]
                } else {
                    s.g.concat_cols(&heads)
                }
            })
            .collect();
        let projected: Vec<Var> = views
            .iter()
            .zip(&self.view_proj)
            .map(|(&x, lin)| lin.forward(s, x))
            .collect();

        let mut reduced = Vec::with_capacity(3);
        for (m, picks) in MODALITY_VIEWS.iter().enumerate() {
            let parts: Vec<Var> = picks
                .iter()
                .map(|&view| s.g.slice_rows(projected[view], m * t, t))
                .collect();
            let cat = s.g.concat_cols(&parts);
            reduced.push(self.reducers[m].forward(s, cat));
        }
        let stacked = s.g.concat_rows(&reduced);
        let out = self.mixer.forward(s, stacked);
        Ok(McaOutput {
            out,
            attn_tri,
            views,
        })
    }
}

/// One pre-norm composite transformer layer.
#[derive(Clone, Debug)]
pub struct MctLayer {
    pub ln_attn: LayerNorm,
    pub mca: Mca,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

pub struct MctOutput {
    pub h: Var,
    /// Trimodal logits of the last layer; empty for a zero-layer stack.
    pub attn_tri: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Mct {
    pub layers: Vec<MctLayer>,
}

impl Mct {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        n_layers: usize,
        n_heads: usize,
        attn_dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| {
                let p = format!("{name}.{i}");
                MctLayer {
                    ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), d),
                    mca: Mca::new(store, &format!("{p}.mca"), d, n_heads, attn_dropout, rng),
                    ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), d),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, attn_dropout, rng),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, s: &mut Session, h: Var, masks: &CompositeMasks) -> Result<MctOutput> {
        mct_forward(s, h, masks, self)
    }
}

/// `H' = MCA(LN(H)) + LN(H)`, then `H'' = FFN(LN(H')) + LN(H')`, per layer.
pub fn mct_forward(s: &mut Session, h: Var, masks: &CompositeMasks, mct: &Mct) -> Result<MctOutput> {
    let mut h = h;
    let mut attn_tri = Vec::new();
    for layer in &mct.layers {
        let x = layer.ln_attn.forward(s, h);
        let a = layer.mca.forward(s, x, masks)?;
        let h1 = s.g.add(a.out, x);
        let y = layer.ln_ffn.forward(s, h1);
        let f = layer.ffn.forward(s, y);
        h = s.g.add(f, y);
        attn_tri = a.attn_tri;
    }
    Ok(MctOutput { h, attn_tri })
}

/// Attention pooling: `softmax((H s)^T) H`, giving a `1 x d` summary.
#[derive(Clone, Debug)]
pub struct NaPool {
    pub score: ParamId,
}

impl NaPool {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            score: store.insert_uniform(format!("{name}.score"), d, 1, d, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, h: Var) -> Var {
        na_pool(s, h, self.score)
    }
}

pub fn na_pool(s: &mut Session, h: Var, score: ParamId) -> Var {
    let w = s.param(score);
    let e = s.g.matmul(h, w);
    let e = s.g.transpose(e);
    let p = s.g.softmax_rows(e, None);
    s.g.matmul(p, h)
}

/// Two-layer head over the concatenated pooled modalities.
#[derive(Clone, Debug)]
pub struct JointHead {
    pub l1: Linear,
    pub l2: Linear,
}

impl JointHead {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), 3 * d, 3 * d, rng),
            l2: Linear::new(store, &format!("{name}.l2"), 3 * d, 3 * d, rng),
        }
    }
}

/// `h_m = W2 ReLU(W1 [g_l; g_a; g_v] + b1) + b2`.
pub fn fuse_joint(s: &mut Session, pooled: [Var; 3], head: &JointHead) -> Var {
    let cat = s.g.concat_cols(&pooled);
    let h = head.l1.forward(s, cat);
    let h = s.g.relu(h);
    head.l2.forward(s, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{masked_softmax, MASK_EXCLUDED};
    use ndarray::{array, concatenate, s, Array2, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Plain self-attention over `x` with no masking at all.
    fn self_attention(x: &Mat, wq: &Mat, wk: &Mat, wv: &Mat) -> Mat {
        let q = x.dot(wq);
        let k = x.dot(wk);
        let logits = q.dot(&k.t()) / (wq.ncols() as f64).sqrt();
        masked_softmax(&logits, None).dot(&x.dot(wv))
    }

    #[test]
    fn mask_structure() {
        let m = build_composite_masks(2);
        assert!(m.views[TRI].iter().all(|&e| e == 0.0));
        let admitted = |view: usize, r: usize, c: usize| m.views[view][[r, c]] > MASK_EXCLUDED;
        // bi(l, a): language row 0 sees audio col 2, not vision col 4.
        assert!(admitted(BI_LA, 0, 2));
        assert!(!admitted(BI_LA, 0, 4));
        // Vision rows are fully excluded under bi(l, a).
        assert!((0..6).all(|c| !admitted(BI_LA, 4, c)));
        assert!(admitted(UNI[1], 3, 2) && !admitted(UNI[1], 3, 0));
        for view in &m.views {
            assert_eq!(view.dim(), (6, 6));
        }
    }

    #[test]
    fn views_match_standalone_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for t in 1..=3 {
            let d = 4;
            let mut store = ParamStore::new();
            let mca = Mca::new(&mut store, "m", d, 1, 0.0, &mut rng);
            let xs = [rand_mat(&mut rng, t, d), rand_mat(&mut rng, t, d), rand_mat(&mut rng, t, d)];
            let stacked = concatenate(Axis(0), &[xs[0].view(), xs[1].view(), xs[2].view()]).unwrap();
            let masks = build_composite_masks(t);
            let mut sess = Session::eval(&store);
            let h = sess.g.constant(stacked.clone());
            let out = mca.forward(&mut sess, h, &masks).unwrap();
            let (wq, wk, wv) = (store.get(mca.w_q), store.get(mca.w_k), store.get(mca.w_v));

            let close = |a: ndarray::ArrayView2<f64>, b: &Mat| {
                (&a - b).iter().all(|e| e.abs() < 1e-9)
            };
            let tri = self_attention(&stacked, wq, wk, wv);
            assert!(close(sess.g.value(out.views[TRI]).view(), &tri));

            let la = concatenate(Axis(0), &[xs[0].view(), xs[1].view()]).unwrap();
            let bi = self_attention(&la, wq, wk, wv);
            assert!(close(sess.g.value(out.views[BI_LA]).slice(s![0..2 * t, ..]), &bi));
            assert!(sess.g.value(out.views[BI_LA]).slice(s![2 * t.., ..]).iter().all(|&e| e == 0.0));

            for m in 0..3 {
                let uni = self_attention(&xs[m], wq, wk, wv);
                let got = sess.g.value(out.views[UNI[m]]);
                assert!(close(got.slice(s![m * t..(m + 1) * t, ..]), &uni));
            }
            assert_eq!(sess.g.shape(out.out), (3 * t, d));
        }
    }

    #[test]
    fn multi_head_logits_are_split_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let mca = Mca::new(&mut store, "m", 4, 2, 0.0, &mut rng);
        let x = rand_mat(&mut rng, 6, 4);
        let mut sess = Session::eval(&store);
        let h = sess.g.constant(x.clone());
        let out = mca.forward(&mut sess, h, &build_composite_masks(2)).unwrap();
        assert_eq!(out.attn_tri.len(), 2);
        let q = x.dot(store.get(mca.w_q));
        let k = x.dot(store.get(mca.w_k));
        let expected = q.slice(s![.., 2..4]).dot(&k.slice(s![.., 2..4]).t()) / 2f64.sqrt();
        assert!((sess.g.value(out.attn_tri[1]) - &expected).iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn zero_layer_stack_is_identity() {
        let mut store = ParamStore::new();
        let mct = Mct::new(&mut store, "t", 4, 0, 1, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        let mut sess = Session::eval(&store);
        let h = sess.g.constant(Mat::ones((3, 4)));
        let out = mct.forward(&mut sess, h, &build_composite_masks(1)).unwrap();
        assert_eq!(out.h, h);
        assert!(out.attn_tri.is_empty());
    }

    #[test]
    fn rejects_wrong_shapes() {
        let mut store = ParamStore::new();
        let mca = Mca::new(&mut store, "m", 4, 1, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        let mut sess = Session::eval(&store);
        let h = sess.g.constant(Mat::ones((5, 4)));
        assert!(mca.forward(&mut sess, h, &build_composite_masks(2)).is_err());
    }

    #[test]
    fn pooling_weights_are_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let pool = NaPool::new(&mut store, "p", 3, &mut rng);
        let x = rand_mat(&mut rng, 5, 3);
        let mut sess = Session::eval(&store);
        let h = sess.g.constant(x.clone());
        let g = pool.forward(&mut sess, h);
        let e = x.dot(store.get(pool.score)).t().to_owned();
        let w = masked_softmax(&e, None);
        assert!((w.sum() - 1.0).abs() < 1e-12);
        assert!((sess.g.value(g) - &w.dot(&x)).iter().all(|e| e.abs() < 1e-12));

        let same = Array2::from_shape_fn((4, 3), |(_, c)| c as f64);
        let h = sess.g.constant(same.clone());
        let g = pool.forward(&mut sess, h);
        assert!((&sess.g.value(g).row(0) - &same.row(0)).iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn two_row_pool_by_hand() {
        let mut store = ParamStore::new();
        let score = store.insert("s", array![[1.0]]);
        let mut sess = Session::eval(&store);
        let h = sess.g.constant(array![[1.0], [3.0]]);
        let g = na_pool(&mut sess, h, score);
        let (e1, e3) = (1f64.exp(), 3f64.exp());
        let expected = (e1 + 3.0 * e3) / (e1 + e3);
        assert!((sess.g.scalar(g) - expected).abs() < 1e-12);
        assert!((expected - 2.762).abs() < 1e-3);
    }

    #[test]
    fn identity_joint_head_passes_non_negative_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let head = JointHead::new(&mut store, "j", 2, &mut rng);
        for l in [&head.l1, &head.l2] {
            *store.get_mut(l.w) = Array2::eye(6);
            store.get_mut(l.b.unwrap()).fill(0.0);
        }
        let mut sess = Session::eval(&store);
        let parts = [array![[0.5, 1.0]], array![[0.0, 2.0]], array![[3.0, 0.25]]];
        let pooled = parts.clone().map(|m| sess.g.constant(m));
        let out = fuse_joint(&mut sess, pooled, &head);
        let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
        assert_eq!(sess.g.value(out), &concatenate(Axis(1), &views).unwrap());
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let mct = Mct::new(&mut store, "t", 4, 1, 2, 0.0, &mut rng);
        let pool = NaPool::new(&mut store, "p", 4, &mut rng);
        let x = rand_mat(&mut rng, 6, 4);
        let masks = build_composite_masks(2);
        fn loss_of<'a>(store: &'a ParamStore, mct: &Mct, pool: &NaPool, x: &Mat, masks: &CompositeMasks) -> (Session<'a>, Var) {
            let mut sess = Session::eval(store);
            let h = sess.g.constant(x.clone());
            let out = mct.forward(&mut sess, h, masks).unwrap();
            let g = pool.forward(&mut sess, out.h);
            let sq = sess.g.mul(g, g);
            let l = sess.g.sum(sq);
            (sess, l)
        }
        let value = |st: &ParamStore| {
            let (sess, l) = loss_of(st, &mct, &pool, &x, &masks);
            sess.g.scalar(l)
        };
        let (sess, l) = loss_of(&store, &mct, &pool, &x, &masks);
        let grads = sess.g.backward(l);
        let analytic: std::collections::HashMap<_, _> = sess.g.param_grads(&grads).into_iter().collect();
        let eps = 1e-6;
        for id in store.ids() {
            for idx in 0..store.get(id).len() {
                let mut plus = store.clone();
                plus.get_mut(id).as_slice_mut().unwrap()[idx] += eps;
                let mut minus = store.clone();
                minus.get_mut(id).as_slice_mut().unwrap()[idx] -= eps;
                let fd = (value(&plus) - value(&minus)) / (2.0 * eps);
                let an = analytic[&id].as_slice().unwrap()[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 + 1e-4 * fd.abs().max(an.abs()),
                    "{}[{idx}]: fd {fd} vs analytic {an}",
                    store.name(id)
                );
            }
        }
    }
}
