//! Trains a small model and sweeps the missing rate for one scenario,
//! printing the curve and its area.
//!
//! cargo run --release --example robustness_curve [scenario]

use cider::config::ModelConfig;
use cider::data::{synth_dataset_with, Split, SynthConfig};
use cider::evaluation::{parse_rates, run_robustness_eval, summarize_auilc, RobustnessSpec};
use cider::masking::Scenario;
use cider::model::{CiderModel, Dims, InferenceModel};
use cider::training::{TrainOptions, TrainState};

fn main() -> cider::Result<()> {
    let scenario: Scenario = std::env::args().nth(1).as_deref().unwrap_or("rmfm").parse()?;
    let sc = SynthConfig {
        aligned: true,
        ..SynthConfig::default()
    };
    let ds = synth_dataset_with(300, 2, 0.3, 4, &sc)?;
    let mut cfg = ModelConfig::tiny(8);
    cfg.epochs = 12;
    cfg.batch_size = 32;
    cfg.use_cf = false;
    let mut state = TrainState::new(CiderModel::new(cfg, Dims::of(&ds))?);
    state.fit(&ds, &TrainOptions::default(), |log| {
        eprintln!("epoch {:>2}  valid ce {:.4}", log.epoch, log.valid_ce.unwrap_or(f64::NAN))
    })?;

    let predictor = InferenceModel {
        model: &state.model,
        table: state.table.as_ref().map(|t| t.uniform()),
        vocab: None,
        tau: 0.0,
    };
    let spec = RobustnessSpec {
        scenario,
        rates: parse_rates("0:1:0.1")?,
        smm_keep: None,
        seed: 1,
        repeats: 3,
    };
    let rows = run_robustness_eval(&predictor, &ds.split_vec(Split::Test), &spec)?;
    println!("rate   acc2    f1");
    for r in &rows {
        println!("{:.1}   {:5.1}  {:5.1}", r.rate, r.acc2, r.f1);
    }
    let summary = summarize_auilc(&rows)?;
    println!("AUILC {}", serde_json::to_string(&summary)?);
    Ok(())
}
