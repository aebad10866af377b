use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{distill_stage, StageOutput, StepMetrics, TrainOptions};
use crate::error::{Error, Result};
use crate::losses::{DistillSpec, LossMode};
use crate::model::{ModelConfig, TransformerModel};
use crate::tensor::Real;

/// Whether to route distillation through a teacher assistant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaChoice {
    /// Insert an assistant when the student is at most half as deep and half
    /// as wide as the teacher.
    Auto,
    Off,
    /// An assistant with the given layers and hidden size.
    Explicit { layers: usize, hidden: usize },
}

impl FromStr for TaChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(TaChoice::Auto),
            "off" | "none" => Ok(TaChoice::Off),
            other => {
                let (l, d) = other
                    .split_once(['x', '×'])
                    .ok_or_else(|| Error::Config(format!("bad assistant size {s:?}; want LxD")))?;
                let parse = |v: &str| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad assistant size {s:?}; want LxD")))
                };
                Ok(TaChoice::Explicit {
                    layers: parse(l)?,
                    hidden: parse(d)?,
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageRole {
    Assistant,
    Final,
}

impl fmt::Display for StageRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageRole::Assistant => "assistant",
            StageRole::Final => "final",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub role: StageRole,
    /// Configuration the stage's teacher must have.
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub spec: DistillSpec,
    pub options: TrainOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillPlan {
    pub stages: Vec<StagePlan>,
}

/// A student shaped like `teacher` but with `layers` × `hidden`; head count,
/// vocabulary and length limits are inherited.
fn derive_student(teacher: &ModelConfig, layers: usize, hidden: usize, dropout: f64) -> Result<ModelConfig> {
    let cfg = ModelConfig {
        num_layers: layers,
        hidden,
        ffn_dim: 4 * hidden,
        ..teacher.clone()
    }
    .with_dropout(dropout);
    cfg.validate()?;
    Ok(cfg)
}

impl DistillPlan {
    /// One or two stages ending in a `layers` × `hidden` student.
    pub fn build(
        teacher: &ModelConfig,
        layers: usize,
        hidden: usize,
        spec: &DistillSpec,
        ta: TaChoice,
        options: &TrainOptions,
        student_dropout: f64,
    ) -> Result<Self> {
        let teacher = teacher.clone().normalized();
        let student = derive_student(&teacher, layers, hidden, student_dropout)?;
        let assistant = match ta {
            TaChoice::Off => None,
            TaChoice::Auto => (2 * layers <= teacher.num_layers && 2 * hidden <= teacher.hidden)
                .then_some((teacher.num_layers, hidden)),
            TaChoice::Explicit { layers, hidden } => Some((layers, hidden)),
        };
        let mut stages = Vec::new();
        let mut prev = teacher;
        if let Some((l, d)) = assistant {
            let ta = derive_student(&prev, l, d, student_dropout)?;
            stages.push(StagePlan {
                role: StageRole::Assistant,
                teacher: prev,
                student: ta.clone(),
                spec: spec.clone(),
                options: options.clone(),
            });
            prev = ta;
        }
        stages.push(StagePlan {
            role: StageRole::Final,
            teacher: prev,
            student,
            spec: spec.clone(),
            options: TrainOptions {
                seed: options.seed.wrapping_add(stages.len() as u64 * 1000),
                ..options.clone()
            },
        });
        let plan = DistillPlan { stages };
        plan.validate()?;
        Ok(plan)
    }

    /// Chaining and per-stage loss preconditions.
    pub fn validate(&self) -> Result<()> {
        match self.stages.len() {
            1 => {}
            2 if self.stages[0].role == StageRole::Assistant => {}
            n => {
                return Err(Error::Plan(format!(
                    "a plan has one stage, or an assistant stage then a final stage (got {n})"
                )))
            }
        }
        for pair in self.stages.windows(2) {
            if pair[0].student != pair[1].teacher {
                return Err(Error::Plan(format!(
                    "assistant {} does not match the next stage's teacher {}",
                    pair[0].student.label(),
                    pair[1].teacher.label()
                )));
            }
        }
        for s in &self.stages {
            s.spec.validate(&s.teacher, &s.student)?;
        }
        Ok(())
    }

    /// `"LxD -> LxD -> LxD"`.
    pub fn describe(&self) -> String {
        let mut parts = vec![self.stages[0].teacher.label()];
        parts.extend(self.stages.iter().map(|s| s.student.label()));
        parts.join(" -> ")
    }
}

#[derive(Clone, Debug)]
pub struct StageReport<T: Real> {
    pub role: StageRole,
    pub teacher: String,
    pub student: String,
    pub mode: LossMode,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub output: StageOutput<T>,
}

#[derive(Clone, Debug)]
pub struct PlanOutput<T: Real> {
    pub stages: Vec<StageReport<T>>,
}

impl<T: Real> PlanOutput<T> {
    pub fn final_student(&self) -> &TransformerModel<T> {
        &self.stages.last().expect("non-empty plan").output.student
    }
}

/// Runs each stage in order, feeding each trained student to the next stage
/// as its teacher. Students start from random initialization. `on_step`
/// receives `(stage index, metrics)`.
pub fn run_plan<T: Real>(
    teacher: &TransformerModel<T>,
    plan: &DistillPlan,
    sequences: &[Vec<usize>],
    on_step: &mut dyn FnMut(usize, &StepMetrics) -> Result<()>,
) -> Result<PlanOutput<T>> {
    plan.validate()?;
    if &plan.stages[0].teacher != teacher.config() {
        return Err(Error::Plan(format!(
            "plan expects teacher {}, got {}",
            plan.stages[0].teacher.label(),
            teacher.config().label()
        )));
    }
    let mut reports: Vec<StageReport<T>> = Vec::new();
    for (i, stage) in plan.stages.iter().enumerate() {
        let current = match reports.last() {
            Some(r) => &r.output.student,
            None => teacher,
        };
        let student = TransformerModel::init(stage.student.clone(), stage.options.seed.wrapping_add(17))?;
        let mut sink = |m: &StepMetrics| on_step(i, m);
        let output = distill_stage(current, student, &stage.spec, sequences, &stage.options, Some(&mut sink))?;
        let window = (stage.options.steps / 20).max(1);
        let (initial_loss, _) = output.report.window_means(window).unwrap_or((f64::NAN, f64::NAN));
        reports.push(StageReport {
            role: stage.role,
            teacher: stage.teacher.label(),
            student: stage.student.label(),
            mode: stage.spec.mode,
            steps: stage.options.steps,
            initial_loss,
            final_loss: output.report.final_loss().unwrap_or(f64::NAN),
            output,
        });
    }
    Ok(PlanOutput { stages: reports })
}
