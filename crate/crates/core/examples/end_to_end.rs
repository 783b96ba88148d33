//! Synthetic data to checkpoint to multi-scenario evaluation, all through
//! files, the way the command-line tool chains them.
//!
//! cargo run --release --example end_to_end

use cider::causal::build_counterfactual_vocab;
use cider::checkpoint::Checkpoint;
use cider::config::ModelConfig;
use cider::data::{synth_dataset_with, Dataset, Split, SynthConfig};
use cider::evaluation::{parse_rates, read_csv, run_robustness_eval, summarize_auilc, write_csv, RobustnessSpec};
use cider::masking::Scenario;
use cider::model::{Dims, CiderModel, InferenceModel};
use cider::training::{TrainOptions, TrainState};

fn main() -> cider::Result<()> {
    let dir = std::env::temp_dir().join("cider-end-to-end");
    std::fs::create_dir_all(&dir)?;
    let data = dir.join("data.jsonl");
    let ckpt = dir.join("model.ckpt");
    let csv = dir.join("curve.csv");

    let sc = SynthConfig {
        aligned: true,
        ..SynthConfig::default()
    };
    synth_dataset_with(300, 2, 0.5, 1, &sc)?.save(&data)?;

    let ds = Dataset::load(&data)?;
    let mut cfg = ModelConfig::tiny(8);
    cfg.epochs = 10;
    cfg.batch_size = 32;
    let vocab = build_counterfactual_vocab(&ds, ds.cls)?;
    let mut state = TrainState::new(CiderModel::new(cfg, Dims::of(&ds))?);
    let logs = state.fit(&ds, &TrainOptions::default(), |_| {})?;
    println!("trained {} epochs, best valid ce {:.4}", logs.len(), state.best_valid.unwrap_or(f64::NAN));
    Checkpoint::from_state(&state, Some(vocab)).save(&ckpt)?;

    let ck = Checkpoint::load(&ckpt)?;
    let model = ck.model()?;
    let predictor = InferenceModel {
        model: &model,
        table: ck.class_table.as_ref().map(|t| t.uniform()),
        vocab: ck.cf_vocab.as_ref(),
        tau: model.cfg.tau,
    };
    let test = ds.split_vec(Split::Test);
    let mut rows = Vec::new();
    for scenario in [Scenario::Rmfm, Scenario::Rmm, Scenario::Tmfm, Scenario::Stmfm] {
        let spec = RobustnessSpec {
            scenario,
            rates: parse_rates("0:1:0.1")?,
            smm_keep: None,
            seed: 2,
            repeats: 1,
        };
        rows.extend(run_robustness_eval(&predictor, &test, &spec)?);
    }
    write_csv(&rows, &csv)?;
    let summary = summarize_auilc(&read_csv(&csv)?)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    println!("files in {}", dir.display());
    Ok(())
}
