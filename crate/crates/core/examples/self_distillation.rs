//! Shows the teacher/student objective on one corrupted sample, then runs a
//! few two-stage training steps.
//!
//! cargo run --example self_distillation

use cider::config::ModelConfig;
use cider::data::{synth_dataset, Split};
use cider::layers::Session;
use cider::masking::{apply_masks, generate, MissingSpec, Scenario};
use cider::model::{CiderModel, Dims};
use cider::params::Adam;
use cider::training::{student_loss, teacher_pass, two_stage_step, StepOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cider::Result<()> {
    let ds = synth_dataset(96, 2, 0.3, 5)?;
    let mut cfg = ModelConfig::tiny(8);
    cfg.use_mcm = false;
    cfg.use_cf = false;
    let mut model = CiderModel::new(cfg, Dims::of(&ds))?;

    let sample = &ds.samples[0];
    for rate in [0.0, 0.3, 0.7] {
        let masks = generate(&MissingSpec::new(Scenario::Rmfm, rate, 1), sample.lengths())?;
        let corrupted = apply_masks(sample, &masks)?;
        let mut s = Session::eval(&model.store);
        let (_, teacher) = teacher_pass(&model, &mut s, sample, None)?;
        let l = student_loss(&model, &mut s, &corrupted, sample, &teacher, None)?;
        println!(
            "rate {rate:.1}: ce {:.4}  recon {:.4}  attn {:.6}  joint {:.6}",
            s.g.scalar(l.ce),
            s.g.scalar(l.recon),
            s.g.scalar(l.attn),
            s.g.scalar(l.joint)
        );
    }

    let train: Vec<_> = ds.split(Split::Train).collect();
    let mut opt = Adam::new(model.cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for step in 0..8 {
        let batch = &train[(step * 16) % train.len()..][..16];
        let r = two_stage_step(&mut model, batch, None, &mut opt, &mut rng, &StepOptions::default())?;
        println!(
            "step {step}: rate {:.2}  ce {:.4} -> ce~ {:.4}  total {:.4}",
            r.rate, r.ce_complete, r.ce_incomplete, r.total
        );
    }
    Ok(())
}
