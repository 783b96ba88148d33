//! Builds the seven block masks for three stacked streams and runs one
//! composite attention layer over random features.
//!
//! cargo run --example composite_attention

use cider::fusion::{build_composite_masks, Mct, VIEW_NAMES};
use cider::graph::Mat;
use cider::layers::Session;
use cider::params::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cider::Result<()> {
    let t = 2;
    let masks = build_composite_masks(t);
    for (name, m) in VIEW_NAMES.iter().zip(&masks.views) {
        println!("{name}");
        for r in m.rows() {
            let line: String = r.iter().map(|&x| if x == 0.0 { '1' } else { '.' }).collect();
            println!("  {line}");
        }
    }

    let (d, heads) = (4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let mct = Mct::new(&mut store, "mct", d, 2, heads, 0.0, &mut rng);
    let x = Mat::from_shape_fn((3 * t, d), |_| rng.gen_range(-1.0..1.0));

    let mut s = Session::eval(&store);
    let h = s.g.constant(x);
    let out = mct.forward(&mut s, h, &masks)?;
    println!("fused stream shape {:?}", s.g.shape(out.h));
    for (i, a) in out.attn_tri.iter().enumerate() {
        let row: Vec<String> = s.g.value(*a).row(0).iter().map(|x| format!("{x:+.3}")).collect();
        println!("head {i}: tri-modal logits of the first query [{}]", row.join(", "));
    }
    Ok(())
}
