//! Builds the counterfactual vocabulary on label-biased synthetic data,
//! trains a small causal model, and compares plain and debiased predictions.
//!
//! cargo run --release --example causal_debiasing

use cider::causal::{build_counterfactual_vocab, make_counterfactual_text};
use cider::config::ModelConfig;
use cider::data::{synth_dataset_with, Split, SynthConfig};
use cider::evaluation::{metrics, Predictor};
use cider::model::{CiderModel, Dims, InferenceModel};
use cider::training::{TrainOptions, TrainState};

fn main() -> cider::Result<()> {
    let sc = SynthConfig {
        filler_vocab: 400,
        text_len: 12,
        ..SynthConfig::default()
    };
    let ds = synth_dataset_with(600, 2, 1.0, 21, &sc)?;
    let vocab = build_counterfactual_vocab(&ds, ds.cls)?;
    println!("{} tokens ranked, {} retained as label-skewed", vocab.ranked.len(), vocab.retained.len());
    for tok in vocab.ranked.iter().take(8) {
        println!("  token {tok:>3}  cv {:.3}", vocab.cv[tok]);
    }
    let s0 = &ds.samples[0];
    println!("factual        {:?}", s0.tokens);
    println!("counterfactual {:?}", make_counterfactual_text(&s0.tokens, &vocab));

    let mut cfg = ModelConfig::tiny(8);
    cfg.epochs = 15;
    cfg.batch_size = 32;
    let mut state = TrainState::new(CiderModel::new(cfg, Dims::of(&ds))?);
    state.fit(&ds, &TrainOptions::default(), |_| {})?;
    let model = &state.model;
    let table = state.table.as_ref().map(|t| t.uniform());

    let test = ds.split_vec(Split::Test);
    let labels: Vec<usize> = test.iter().map(|s| s.label(ds.cls)).collect();
    for (name, tau) in [("do(X)", 0.0), ("do(X) - cf", 1.0)] {
        let p = InferenceModel { model, table: table.clone(), vocab: Some(&vocab), tau };
        let preds = test.iter().map(|s| p.predict(s)).collect::<cider::Result<Vec<_>>>()?;
        let m = metrics(&preds, &labels, p.cls())?;
        println!("{name:<11} acc2 {:.1}  f1 {:.1}", m.acc2, m.f1);
    }
    Ok(())
}
