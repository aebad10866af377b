use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    adam_step, check_finite, clip_grad_norm, decay_flags, input_of, seeded_normal, AdamState,
    MetricsSink, StepMetrics, TrainOptions, TrainReport,
};
use crate::autodiff::{Tape, Var};
use crate::data::{MaskedBatch, MaskedSequence};
use crate::error::{Error, Result};
use crate::losses::{distill_loss, DistillSpec, LossMode, LossParts, StudentFeatures, TeacherFeatures};
use crate::model::{encode, mlm_logits, Bound, TransformerModel};
use crate::tensor::{Real, Tensor};

/// A trained student, plus the value projection when the mode used one.
#[derive(Clone, Debug)]
pub struct StageOutput<T: Real> {
    pub student: TransformerModel<T>,
    pub projection: Option<Tensor<T>>,
    pub report: TrainReport,
}

fn teacher_features<T: Real>(
    teacher: &TransformerModel<T>,
    spec: &DistillSpec,
    s: &MaskedSequence,
) -> Result<TeacherFeatures<T>> {
    let mut tape = Tape::new();
    let bound = teacher.bind_frozen(&mut tape);
    let enc = encode(&mut tape, &bound, &input_of(s), &spec.capture_request(), None)?;
    let logits = if spec.needs_logits() {
        let l = mlm_logits(&mut tape, &bound, enc.hidden)?;
        Some(tape.value(l).clone())
    } else {
        None
    };
    Ok(TeacherFeatures {
        capture: enc.capture.resolve(&tape),
        logits,
        num_layers: teacher.config().num_layers,
    })
}

/// Mean distillation loss over a batch, recorded on `tape`.
fn batch_loss<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    teacher: &TransformerModel<T>,
    student: &Bound<'_>,
    spec: &DistillSpec,
    projection: Option<Var>,
    batch: &MaskedBatch,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<LossParts<Var>> {
    let mut sum: Option<LossParts<Var>> = None;
    for s in &batch.sequences {
        let features = teacher_features(teacher, spec, s)?;
        let rng = dropout.as_deref_mut().map(|r| r as &mut dyn RngCore);
        let enc = encode(tape, student, &input_of(s), &spec.capture_request(), rng)?;
        let logits = if spec.needs_logits() {
            Some(mlm_logits(tape, student, enc.hidden)?)
        } else {
            None
        };
        let sf = StudentFeatures {
            capture: enc.capture,
            logits,
            num_layers: student.config.num_layers,
            heads: student.config.heads,
        };
        let parts = distill_loss(
            tape,
            spec,
            &features,
            &sf,
            projection,
            s.valid_len,
            &s.masked_positions,
        )?;
        sum = Some(match sum {
            None => parts,
            Some(acc) => LossParts {
                total: tape.add(acc.total, parts.total)?,
                attention: add_opt(tape, acc.attention, parts.attention)?,
                value_relation: add_opt(tape, acc.value_relation, parts.value_relation)?,
            },
        });
    }
    let sum = sum.ok_or_else(|| Error::Config("empty batch".into()))?;
    let inv = T::from_f64(1.0 / batch.len() as f64);
    Ok(LossParts {
        total: tape.scale(sum.total, inv)?,
        attention: sum.attention.map(|v| tape.scale(v, inv)).transpose()?,
        value_relation: sum.value_relation.map(|v| tape.scale(v, inv)).transpose()?,
    })
}

fn add_opt<T: Real>(tape: &mut Tape<'_, T>, a: Option<Var>, b: Option<Var>) -> Result<Option<Var>> {
    match (a, b) {
        (Some(a), Some(b)) => tape.add(a, b).map(Some),
        _ => Ok(None),
    }
}

fn read_parts<T: Real>(tape: &Tape<'_, T>, parts: &LossParts<Var>, mode: LossMode) -> LossParts<f64> {
    let val = |v: Var| tape.value(v).item().to_f64();
    LossParts {
        total: val(parts.total),
        attention: parts.attention.map(val),
        // The attention-only ablation reports its absent value term as zero.
        value_relation: parts
            .value_relation
            .map(val)
            .or((mode == LossMode::AttOnly).then_some(0.0)),
    }
}

/// Distillation loss of `student` against `teacher` on one batch, without
/// dropout or gradients.
pub fn evaluate_distill<T: Real>(
    teacher: &TransformerModel<T>,
    student: &TransformerModel<T>,
    spec: &DistillSpec,
    projection: Option<&Tensor<T>>,
    batch: &MaskedBatch,
) -> Result<LossParts<f64>> {
    spec.validate(teacher.config(), student.config())?;
    let mut tape = Tape::new();
    let bound = student.bind_frozen(&mut tape);
    let proj = projection.map(|p| tape.frozen(p));
    let parts = batch_loss(&mut tape, teacher, &bound, spec, proj, batch, None)?;
    Ok(read_parts(&tape, &parts, spec.mode))
}

/// Trains `student` to mimic the frozen `teacher` under `spec`.
pub fn distill_stage<T: Real>(
    teacher: &TransformerModel<T>,
    mut student: TransformerModel<T>,
    spec: &DistillSpec,
    sequences: &[Vec<usize>],
    opts: &TrainOptions,
    mut sink: Option<MetricsSink<'_>>,
) -> Result<StageOutput<T>> {
    spec.validate(teacher.config(), student.config())?;
    let schedule = opts.schedule()?;
    let mut stream = opts.stream(sequences, student.config())?;
    let (decay, names) = decay_flags(&student);
    let mut adam = AdamState::new(student.params(), decay, opts.adam)?.with_names(names);
    let mut projection = spec
        .projection_shape(teacher.config(), student.config())
        .map(|shape| seeded_normal::<T>(&shape, 1.0 / (shape[0] as f64).sqrt(), spec.projection_seed));
    let mut proj_adam = match &projection {
        Some(p) => Some(
            AdamState::new(std::slice::from_ref(p), vec![true], opts.adam)?
                .with_names(vec!["value_projection".into()]),
        ),
        None => None,
    };
    let mut dropout_rng = (student.config().dropout > 0.0)
        .then(|| ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2)));
    let mut report = TrainReport::default();

    for step in 1..=opts.steps {
        let batch = stream.next_batch()?;
        let lr = schedule.lr_at(step)?;
        let (parts, mut grads) = {
            let mut tape = Tape::new();
            let bound = student.bind(&mut tape);
            let proj = projection.as_ref().map(|p| tape.param(p));
            let parts = batch_loss(
                &mut tape,
                teacher,
                &bound,
                spec,
                proj,
                &batch,
                dropout_rng.as_mut(),
            )?;
            let values = read_parts(&tape, &parts, spec.mode);
            check_finite(step, values.total)?;
            tape.backward(parts.total)?;
            let mut grads = bound.grads(&mut tape);
            if let Some(p) = proj {
                grads.push(
                    tape.take_grad(p)
                        .unwrap_or_else(|| Tensor::zeros(tape.shape(p))),
                );
            }
            (values, grads)
        };
        if let Some(max) = opts.clip_norm {
            clip_grad_norm(&mut grads, max);
        }
        if let (Some(p), Some(state)) = (projection.as_mut(), proj_adam.as_mut()) {
            let g = grads.pop().expect("projection gradient");
            adam_step(std::slice::from_mut(p), &[g], state, lr)?;
        }
        adam_step(student.params_mut(), &grads, &mut adam, lr)?;
        let m = StepMetrics {
            step,
            lr,
            loss: parts.total,
            loss_at: parts.attention,
            loss_vr: parts.value_relation,
            mlm_acc: None,
        };
        if let Some(sink) = sink.as_mut() {
            sink(&m)?;
        }
        report.metrics.push(m);
    }
    Ok(StageOutput {
        student,
        projection,
        report,
    })
}
