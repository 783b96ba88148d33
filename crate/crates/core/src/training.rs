//! Self-distillation losses and the two-stage optimization loop.
//!
//! Each batch is seen twice by the same weights: once complete (the teacher
//! pass) and once corrupted at a fresh random missing rate (the student
//! pass). Teacher outputs enter the student losses as constants.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::causal::{argmax, build_class_table, ClassPriorTable, TableMode};
use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::evaluation::{metrics, MetricReport};
use crate::graph::{Mat, Var};
use crate::layers::{embed_text, Linear, Session};
use crate::masking::{apply_masks, generate, mix_seed, MissingSpec, Scenario};
use crate::model::CiderModel;
use crate::params::{Adam, GradAccumulator, ParamStore};

/// Maps fused streams back to the original feature spaces.
#[derive(Clone, Debug)]
pub struct ReconHeads {
    pub text: Linear,
    pub audio: [Linear; 2],
    pub vision: [Linear; 2],
}

impl ReconHeads {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        (d_l, d_a, d_v): (usize, usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            text: Linear::new(store, &format!("{name}.text"), d, d_l, rng),
            audio: [
                Linear::new(store, &format!("{name}.audio.0"), d, d, rng),
                Linear::new(store, &format!("{name}.audio.1"), d, d_a, rng),
            ],
            vision: [
                Linear::new(store, &format!("{name}.vision.0"), d, d, rng),
                Linear::new(store, &format!("{name}.vision.1"), d, d_v, rng),
            ],
        }
    }
}

/// Nearest-neighbour resampling of a `T x d` sequence to `target` rows.
pub fn nearest_upsample(s: &mut Session, x: Var, target: usize) -> Var {
    let t = s.g.shape(x).0;
    if t == target {
        return x;
    }
    let idx = (0..target).map(|j| Some(j * t / target)).collect();
    s.g.gather_rows(x, idx)
}

/// Reconstructs `(T_l x d_l, T_a x d_a, T_v x d_v)` from the fused streams.
pub fn reconstruct(
    s: &mut Session,
    streams: [Var; 3],
    heads: &ReconHeads,
    (t_a, t_v): (usize, usize),
) -> [Var; 3] {
    let text = heads.text.forward(s, streams[0]);
    let mut two_layer = |x: Var, t: usize, layers: &[Linear; 2]| {
        let up = nearest_upsample(s, x, t);
        let h = layers[0].forward(s, up);
        let h = s.g.relu(h);
        layers[1].forward(s, h)
    };
    let audio = two_layer(streams[1], t_a, &heads.audio);
    let vision = two_layer(streams[2], t_v, &heads.vision);
    [text, audio, vision]
}

/// Sum of the three mean smooth-L1 terms.
pub fn loss_recon(s: &mut Session, fakes: [Var; 3], originals: [&Mat; 3]) -> Var {
    let l = s.g.smooth_l1(fakes[0], originals[0]);
    let a = s.g.smooth_l1(fakes[1], originals[1]);
    let v = s.g.smooth_l1(fakes[2], originals[2]);
    let la = s.g.add(l, a);
    s.g.add(la, v)
}

/// Row-mean KL from the student's attention to the teacher's, averaged
/// over heads; zero when the fusion stack has no layers.
pub fn loss_attn(s: &mut Session, student: &[Var], teacher: &[Mat]) -> Result<Var> {
    if student.len() != teacher.len() {
        return Err(Error::Shape(format!(
            "{} student heads vs {} teacher heads",
            student.len(),
            teacher.len()
        )));
    }
    if student.is_empty() {
        return Ok(s.g.constant(Mat::zeros((1, 1))));
    }
    let mut total: Option<Var> = None;
    for (&st, te) in student.iter().zip(teacher) {
        if s.g.shape(st) != te.dim() {
            return Err(Error::Shape("attention shapes differ".into()));
        }
        let kl = s.g.kl_rows(st, te);
        total = Some(match total {
            Some(t) => s.g.add(t, kl),
            None => kl,
        });
    }
    let total = total.expect("non-empty");
    Ok(if student.len() == 1 {
        total
    } else {
        s.g.scale(total, 1.0 / student.len() as f64)
    })
}

/// `1 - cos(h_student, h_teacher)`.
pub fn loss_joint(s: &mut Session, student: Var, teacher: &Mat) -> Var {
    s.g.cosine_loss(student, teacher)
}

/// Constants captured from the complete pass.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub attn_tri: Vec<Mat>,
    pub joint: Mat,
    /// Text embedding of the complete tokens.
    pub text: Mat,
}

/// Runs the complete pass, returning its classification loss and the
/// teacher constants.
pub fn teacher_pass(
    model: &CiderModel,
    s: &mut Session,
    sample: &Sample,
    table: Option<&ClassPriorTable>,
) -> Result<(Var, Teacher)> {
    let out = model.forward(s, sample, table)?;
    let ce = s.g.cross_entropy(out.logits, sample.label(model.dims.cls));
    let teacher = Teacher {
        attn_tri: out.attn_tri.iter().map(|&a| s.g.value(a).clone()).collect(),
        joint: s.g.value(out.joint).clone(),
        text: embed_text(&sample.tokens, model.embedding_table())?,
    };
    Ok((ce, teacher))
}

/// Graph nodes of the student objective.
pub struct StudentLoss {
    pub ce: Var,
    pub recon: Var,
    pub attn: Var,
    pub joint: Var,
    pub total: Var,
}

/// `CE + alpha L_recon + beta L_attn + gamma L_joint` on a corrupted copy of
/// `original`.
pub fn student_loss(
    model: &CiderModel,
    s: &mut Session,
    corrupted: &Sample,
    original: &Sample,
    teacher: &Teacher,
    table: Option<&ClassPriorTable>,
) -> Result<StudentLoss> {
    if corrupted.lengths() != original.lengths() {
        return Err(Error::LengthMismatch("corrupted and original samples differ in length".into()));
    }
    let out = model.forward(s, corrupted, table)?;
    let ce = s.g.cross_entropy(out.logits, original.label(model.dims.cls));
    let fakes = reconstruct(
        s,
        out.streams,
        &model.recon,
        (original.audio.nrows(), original.vision.nrows()),
    );
    let recon = loss_recon(s, fakes, [&teacher.text, &original.audio, &original.vision]);
    let attn = loss_attn(s, &out.attn_tri, &teacher.attn_tri)?;
    let joint = loss_joint(s, out.joint, &teacher.joint);
    let cfg = &model.cfg;
    let wr = s.g.scale(recon, cfg.alpha);
    let wa = s.g.scale(attn, cfg.beta);
    let wj = s.g.scale(joint, cfg.gamma);
    let t = s.g.add(ce, wr);
    let t = s.g.add(t, wa);
    let total = s.g.add(t, wj);
    Ok(StudentLoss {
        ce,
        recon,
        attn,
        joint,
        total,
    })
}

/// Batch means of each loss term.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub ce_complete: f64,
    pub ce_incomplete: f64,
    pub recon: f64,
    pub attn: f64,
    pub joint: f64,
    /// `ce_incomplete + alpha recon + beta attn + gamma joint`.
    pub total: f64,
    pub rate: f64,
}

#[derive(Clone, Debug)]
pub struct StepOptions {
    pub scenario: Scenario,
    /// Overrides the per-batch random missing rate.
    pub forced_rate: Option<f64>,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            scenario: Scenario::Rmfm,
            forced_rate: None,
        }
    }
}

fn session<'a>(model: &'a CiderModel, rng: &mut ChaCha8Rng) -> Session<'a> {
    Session::train(&model.store, ChaCha8Rng::seed_from_u64(rng.gen()))
}

/// One batch: complete pass and update, then corrupted pass with
/// distillation and a second update.
pub fn two_stage_step(
    model: &mut CiderModel,
    batch: &[&Sample],
    table: Option<&ClassPriorTable>,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
    opts: &StepOptions,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut report = StepReport::default();

    let mut acc = GradAccumulator::new();
    let mut teachers = Vec::with_capacity(batch.len());
    for sample in batch {
        let mut s = session(model, rng);
        let (ce, teacher) = teacher_pass(model, &mut s, sample, table)?;
        report.ce_complete += s.g.scalar(ce) / n;
        let grads = s.g.backward(ce);
        acc.add(s.g.param_grads(&grads));
        teachers.push(teacher);
    }
    acc.scale(1.0 / n);
    opt.update(&mut model.store, &acc);

    let rate = match opts.forced_rate {
        Some(r) => r,
        None => rng.gen_range(0.0..1.0),
    };
    report.rate = rate;
    let mut acc = GradAccumulator::new();
    for (sample, teacher) in batch.iter().zip(&teachers) {
        let spec = MissingSpec::new(opts.scenario, rate, rng.gen());
        let masks = generate(&spec, sample.lengths())?;
        let corrupted = apply_masks(sample, &masks)?;
        let mut s = session(model, rng);
        let l = student_loss(model, &mut s, &corrupted, sample, teacher, table)?;
        report.ce_incomplete += s.g.scalar(l.ce) / n;
        report.recon += s.g.scalar(l.recon) / n;
        report.attn += s.g.scalar(l.attn) / n;
        report.joint += s.g.scalar(l.joint) / n;
        let grads = s.g.backward(l.total);
        acc.add(s.g.param_grads(&grads));
    }
    acc.scale(1.0 / n);
    opt.update(&mut model.store, &acc);

    let cfg = &model.cfg;
    report.total = report.ce_incomplete + cfg.alpha * report.recon + cfg.beta * report.attn + cfg.gamma * report.joint;
    Ok(report)
}

/// Eval-mode predictions and metrics over `samples`.
pub fn evaluate(model: &CiderModel, samples: &[&Sample], table: Option<&ClassPriorTable>) -> Result<MetricReport> {
    let cls = model.dims.cls;
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        preds.push(argmax(&model.logits(s, table)?));
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label(cls)).collect();
    metrics(&preds, &labels, cls)
}

/// Mean complete-input cross-entropy in eval mode.
pub fn mean_ce(model: &CiderModel, samples: &[&Sample], table: Option<&ClassPriorTable>) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for sample in samples {
        let mut s = Session::eval(&model.store);
        let out = model.forward(&mut s, sample, table)?;
        let ce = s.g.cross_entropy(out.logits, sample.label(model.dims.cls));
        total += s.g.scalar(ce);
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: StepReport,
    pub valid_ce: Option<f64>,
    pub train_acc2: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub step: StepOptions,
    /// Stop as soon as eval-mode training Acc2 reaches this percentage.
    pub stop_at_train_acc2: Option<f64>,
}

/// Training progress that survives a checkpoint round trip.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: CiderModel,
    pub opt: Adam,
    /// Epochs completed so far.
    pub epoch: usize,
    pub best_valid: Option<f64>,
    pub bad_epochs: usize,
    /// Training-mode class table matching the current parameters.
    pub table: Option<ClassPriorTable>,
}

impl TrainState {
    pub fn new(model: CiderModel) -> Self {
        let opt = Adam::new(model.cfg.learning_rate);
        Self {
            model,
            opt,
            epoch: 0,
            best_valid: None,
            bad_epochs: 0,
            table: None,
        }
    }

    fn refresh_table(&mut self, train: &[&Sample]) -> Result<()> {
        self.table = if self.model.uses_class_table() {
            Some(build_class_table(
                train,
                self.model.dims.cls,
                self.model.embedding_table(),
                TableMode::Train,
            )?)
        } else {
            None
        };
        Ok(())
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.model.cfg.epochs
            || (self.best_valid.is_some() && self.bad_epochs >= self.model.cfg.early_stop_patience)
    }

    /// Trains until the epoch budget, early stopping or the accuracy target.
    /// The best-validation parameters are restored at the end.
    pub fn fit(
        &mut self,
        data: &Dataset,
        opts: &TrainOptions,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        let train: Vec<&Sample> = data.split(Split::Train).collect();
        let valid: Vec<&Sample> = data.split(Split::Valid).collect();
        if train.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut best: Option<BTreeMap<String, Mat>> = None;
        let mut logs = Vec::new();
        while !self.finished() {
            let epoch = self.epoch + 1;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.model.cfg.seed, epoch as u64));
            self.refresh_table(&train)?;
            let mut order = train.clone();
            order.shuffle(&mut rng);
            let mut sum = StepReport::default();
            for batch in order.chunks(self.model.cfg.batch_size) {
                let r = two_stage_step(
                    &mut self.model,
                    batch,
                    self.table.as_ref(),
                    &mut self.opt,
                    &mut rng,
                    &opts.step,
                )?;
                let w = batch.len() as f64 / train.len() as f64;
                sum.ce_complete += w * r.ce_complete;
                sum.ce_incomplete += w * r.ce_incomplete;
                sum.recon += w * r.recon;
                sum.attn += w * r.attn;
                sum.joint += w * r.joint;
                sum.total += w * r.total;
                sum.rate += w * r.rate;
            }
            self.epoch = epoch;
            self.refresh_table(&train)?;
            let table = self.table.as_ref();

            let valid_ce = if valid.is_empty() {
                None
            } else {
                Some(mean_ce(&self.model, &valid, table)?)
            };
            if let Some(v) = valid_ce {
                if self.best_valid.is_none_or(|b| v < b) {
                    self.best_valid = Some(v);
                    self.bad_epochs = 0;
                    best = Some(self.model.store.to_named());
                } else {
                    self.bad_epochs += 1;
                }
            }
            let train_acc2 = match opts.stop_at_train_acc2 {
                Some(_) => Some(evaluate(&self.model, &train, table)?.acc2),
                None => None,
            };
            let log = EpochLog {
                epoch,
                train: sum,
                valid_ce,
                train_acc2,
            };
            on_epoch(&log);
            logs.push(log);
            if let (Some(target), Some(acc)) = (opts.stop_at_train_acc2, train_acc2) {
                if acc >= target {
                    break;
                }
            }
        }
        if let Some(named) = best {
            self.model.store.load_named(&named)?;
            self.refresh_table(&train)?;
        } else if self.table.is_none() {
            self.refresh_table(&train)?;
        }
        Ok(logs)
    }
}
