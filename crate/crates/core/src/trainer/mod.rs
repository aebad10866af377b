//! Optimization, teacher pretraining, distillation stages and multi-stage
//! plans.

mod distill;
mod optim;
mod plan;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{BatchStream, MaskedSequence};
use crate::error::{Error, Result};
use crate::model::{
    count_correct, encode, mlm_cross_entropy, mlm_logits, CaptureRequest, EncodeInput, ModelConfig,
    TransformerModel,
};
use crate::tensor::{Real, Tensor};

pub use distill::{distill_stage, evaluate_distill, StageOutput};
pub use optim::{adam_step, clip_grad_norm, AdamConfig, AdamState, Schedule};
pub use plan::{run_plan, DistillPlan, PlanOutput, StagePlan, StageReport, StageRole, TaChoice};

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_at: Option<f64>,
    pub loss_vr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlm_acc: Option<f64>,
}

/// Callback receiving each step's metrics as it is produced.
pub type MetricsSink<'s> = &'s mut dyn FnMut(&StepMetrics) -> Result<()>;

/// Settings shared by pretraining and distillation runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Share of the budget spent warming up.
    pub warmup_fraction: f64,
    pub mask_rate: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 1000,
            batch_size: 16,
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            mask_rate: 0.15,
            clip_norm: Some(1.0),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::with_warmup_fraction(self.peak_lr, self.steps, self.warmup_fraction)
    }

    fn stream(&self, sequences: &[Vec<usize>], config: &ModelConfig) -> Result<BatchStream> {
        let words = config.max_seq_len.checked_sub(2).filter(|&w| w > 0).ok_or_else(|| {
            Error::Config("max_seq_len must leave room for [CLS] and [SEP]".into())
        })?;
        let chunks: Vec<Vec<usize>> = sequences
            .iter()
            .flat_map(|s| s.chunks(words).map(<[usize]>::to_vec).collect::<Vec<_>>())
            .collect();
        BatchStream::new(
            chunks,
            self.batch_size,
            config.vocab_size,
            config.max_seq_len,
            self.mask_rate,
            self.seed.wrapping_add(1),
        )
    }
}

/// Per-step metrics of a finished run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub metrics: Vec<StepMetrics>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.loss)
    }

    /// Mean loss over the first and last `window` steps.
    pub fn window_means(&self, window: usize) -> Option<(f64, f64)> {
        let l = self.losses();
        let w = window.min(l.len());
        if w == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&l[..w]), mean(&l[l.len() - w..])))
    }
}

pub(crate) fn input_of(s: &MaskedSequence) -> EncodeInput<'_> {
    EncodeInput {
        token_ids: &s.token_ids,
        segment_ids: &s.segment_ids,
        attn_mask: &s.attn_mask,
    }
}

pub(crate) fn decay_flags<T: Real>(model: &TransformerModel<T>) -> (Vec<bool>, Vec<String>) {
    model
        .layout()
        .specs
        .iter()
        .map(|s| (s.kind.decays(), s.name.clone()))
        .unzip()
}

pub(crate) fn check_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            what: format!("loss became {loss}"),
        })
    }
}

/// Trains a freshly initialized model with masked-LM cross-entropy on
/// masked positions only.
pub fn pretrain_teacher<T: Real>(
    config: &ModelConfig,
    sequences: &[Vec<usize>],
    opts: &TrainOptions,
    mut sink: Option<MetricsSink<'_>>,
) -> Result<(TransformerModel<T>, TrainReport)> {
    let config = config.clone().normalized();
    let mut model = TransformerModel::<T>::init(config.clone(), opts.seed)?;
    let schedule = opts.schedule()?;
    let mut stream = opts.stream(sequences, &config)?;
    let (decay, names) = decay_flags(&model);
    let mut adam = AdamState::new(model.params(), decay, opts.adam)?.with_names(names);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
    let mut report = TrainReport::default();

    for step in 1..=opts.steps {
        let batch = stream.next_batch()?;
        let lr = schedule.lr_at(step)?;
        let (loss, correct, total, mut grads) = {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let mut acc = None;
            let (mut correct, mut total) = (0, 0);
            for s in &batch.sequences {
                let rng: Option<&mut dyn RngCore> =
                    (config.dropout > 0.0).then_some(&mut dropout_rng as &mut dyn RngCore);
                let enc = encode(&mut tape, &bound, &input_of(s), &CaptureRequest::none(), rng)?;
                let masked = tape.select_rows(enc.hidden, &s.masked_positions)?;
                let logits = mlm_logits(&mut tape, &bound, masked)?;
                let rows: Vec<usize> = (0..s.labels.len()).collect();
                correct += count_correct(tape.value(logits), &rows, &s.labels);
                total += rows.len();
                let ce = mlm_cross_entropy(&mut tape, logits, &rows, &s.labels)?;
                acc = Some(match acc {
                    None => ce,
                    Some(a) => tape.add(a, ce)?,
                });
            }
            let sum = acc.ok_or(Error::EmptyMaskedSet)?;
            let loss = tape.scale(sum, T::from_f64(1.0 / batch.len() as f64))?;
            let value = tape.value(loss).item().to_f64();
            check_finite(step, value)?;
            tape.backward(loss)?;
            (value, correct, total, bound.grads(&mut tape))
        };
        if let Some(max) = opts.clip_norm {
            clip_grad_norm(&mut grads, max);
        }
        adam_step(model.params_mut(), &grads, &mut adam, lr)?;
        let m = StepMetrics {
            step,
            lr,
            loss,
            loss_at: None,
            loss_vr: None,
            mlm_acc: Some(correct as f64 / total.max(1) as f64),
        };
        if let Some(sink) = sink.as_mut() {
            sink(&m)?;
        }
        report.metrics.push(m);
    }
    Ok((model, report))
}

/// Masked-token top-1 accuracy of `model` over `batches` fixed batches.
pub fn mlm_accuracy<T: Real>(
    model: &TransformerModel<T>,
    sequences: &[Vec<usize>],
    batch_size: usize,
    batches: usize,
    seed: u64,
) -> Result<f64> {
    let opts = TrainOptions {
        batch_size,
        seed,
        ..TrainOptions::default()
    };
    let mut stream = opts.stream(sequences, model.config())?;
    let (mut correct, mut total) = (0, 0);
    for _ in 0..batches {
        let batch = stream.next_batch()?;
        for s in &batch.sequences {
            let mut tape = Tape::new();
            let bound = model.bind_frozen(&mut tape);
            let enc = encode(&mut tape, &bound, &input_of(s), &CaptureRequest::none(), None)?;
            let masked = tape.select_rows(enc.hidden, &s.masked_positions)?;
            let logits = mlm_logits(&mut tape, &bound, masked)?;
            let rows: Vec<usize> = (0..s.labels.len()).collect();
            correct += count_correct(tape.value(logits), &rows, &s.labels);
            total += rows.len();
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Seeded normal initialization for auxiliary trainable tensors.
pub(crate) fn seeded_normal<T: Real>(shape: &[usize], std: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::<f64>::randn(shape, std, &mut rng).cast()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{corpus_sequences, synth_corpus, Vocab};

    fn toy() -> (ModelConfig, Vec<Vec<usize>>) {
        let text = synth_corpus(3, 200);
        let vocab = Vocab::build(&text, 1000).unwrap();
        let seqs = corpus_sequences(&vocab, &text, 14);
        (ModelConfig::new(1, 16, 2, vocab.len(), 16), seqs)
    }

    #[test]
    fn pretraining_is_deterministic_and_streams_metrics() {
        let (cfg, seqs) = toy();
        let opts = TrainOptions {
            steps: 4,
            batch_size: 2,
            seed: 9,
            ..TrainOptions::default()
        };
        let mut seen = Vec::new();
        let mut sink = |m: &StepMetrics| {
            seen.push(m.step);
            Ok(())
        };
        let (a, ra) = pretrain_teacher::<f64>(&cfg, &seqs, &opts, Some(&mut sink)).unwrap();
        let (b, rb) = pretrain_teacher::<f64>(&cfg, &seqs, &opts, None).unwrap();
        assert_eq!(seen, vec![1, 2, 3, 4]);
        assert_eq!(ra, rb);
        assert_eq!(a.params(), b.params());
        let line = serde_json::to_string(&ra.metrics[0]).unwrap();
        assert!(line.contains("\"loss_at\":null") && line.contains("mlm_acc"), "{line}");
    }

    #[test]
    fn metrics_without_accuracy_omit_the_field() {
        let m = StepMetrics {
            step: 1,
            lr: 0.0,
            loss: 1.0,
            loss_at: Some(0.5),
            loss_vr: Some(0.5),
            mlm_acc: None,
        };
        let line = serde_json::to_string(&m).unwrap();
        assert!(!line.contains("mlm_acc"));
        assert_eq!(serde_json::from_str::<StepMetrics>(&line).unwrap(), m);
    }

    #[test]
    fn window_means() {
        let r = TrainReport {
            metrics: (0..10)
                .map(|i| StepMetrics {
                    step: i + 1,
                    lr: 0.0,
                    loss: 10.0 - i as f64,
                    loss_at: None,
                    loss_vr: None,
                    mlm_acc: None,
                })
                .collect(),
        };
        assert_eq!(r.window_means(2), Some((9.5, 1.5)));
        assert_eq!(TrainReport::default().window_means(3), None);
    }
}
