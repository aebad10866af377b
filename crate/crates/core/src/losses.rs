//! Distillation objectives.
//!
//! Teacher features arrive as plain tensors and are treated as constants;
//! student features are tape handles so gradients reach the student only.
//! All per-sequence KL terms average over heads and valid query positions:
//! `(1 / (A_h·|x|)) Σ_a Σ_t KL(teacher_{a,t} ‖ student_{a,t})`, where `|x|` is
//! the number of non-padding positions and the key axis is restricted to
//! those positions and renormalized.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{AttentionCapture, CaptureRequest, LayerCapture, LayerSelect, ModelConfig};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Last-layer attention distributions plus value relations.
    Minilm,
    /// Last-layer attention distributions only.
    AttOnly,
    /// KL between temperature-softened MLM predictions at masked positions.
    SoftLabel,
    /// Attention and value-relation KL at every uniformly mapped layer pair.
    LayerToLayer,
    /// MSE between teacher values and linearly projected student values.
    ValueMse,
    /// Relation KL over last-layer hidden states split into pseudo-heads.
    HiddenRelation,
}

impl LossMode {
    pub const ALL: [LossMode; 6] = [
        LossMode::Minilm,
        LossMode::AttOnly,
        LossMode::SoftLabel,
        LossMode::LayerToLayer,
        LossMode::ValueMse,
        LossMode::HiddenRelation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Minilm => "minilm",
            LossMode::AttOnly => "att-only",
            LossMode::SoftLabel => "soft-label",
            LossMode::LayerToLayer => "layer2layer",
            LossMode::ValueMse => "value-mse",
            LossMode::HiddenRelation => "hidden-relation",
        }
    }

    /// Modes comparing per-head relation matrices need equal head counts.
    pub fn needs_matching_heads(self) -> bool {
        !matches!(self, LossMode::SoftLabel)
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "minilm" => LossMode::Minilm,
            "att-only" => LossMode::AttOnly,
            "soft-label" => LossMode::SoftLabel,
            "layer2layer" | "layer-to-layer" => LossMode::LayerToLayer,
            "value-mse" => LossMode::ValueMse,
            "hidden-relation" => LossMode::HiddenRelation,
            other => return Err(Error::Config(format!("unknown loss mode {other:?}"))),
        })
    }
}

/// Which objective to distill with, and its settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSpec {
    pub mode: LossMode,
    pub soft_label_temperature: f64,
    pub projection_seed: u64,
}

impl DistillSpec {
    pub fn new(mode: LossMode) -> Self {
        DistillSpec {
            mode,
            soft_label_temperature: 1.0,
            projection_seed: 0,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.soft_label_temperature = t;
        self
    }

    /// Checks the teacher/student pair against the mode's preconditions.
    pub fn validate(&self, teacher: &ModelConfig, student: &ModelConfig) -> Result<()> {
        if self.mode.needs_matching_heads() && teacher.heads != student.heads {
            return Err(Error::HeadMismatch {
                teacher: teacher.heads,
                student: student.heads,
            });
        }
        match self.mode {
            LossMode::LayerToLayer => {
                uniform_layer_map(teacher.num_layers, student.num_layers)?;
            }
            LossMode::SoftLabel => {
                if !(self.soft_label_temperature > 0.0) {
                    return Err(Error::Config(format!(
                        "soft-label temperature must be positive, got {}",
                        self.soft_label_temperature
                    )));
                }
                if teacher.vocab_size != student.vocab_size {
                    return Err(Error::Config(format!(
                        "vocabularies differ: teacher {}, student {}",
                        teacher.vocab_size, student.vocab_size
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Layers each side must record for this mode.
    pub fn capture_request(&self) -> CaptureRequest {
        match self.mode {
            LossMode::Minilm | LossMode::AttOnly | LossMode::ValueMse => CaptureRequest::last(),
            LossMode::HiddenRelation => CaptureRequest::last().with_hidden(),
            LossMode::LayerToLayer => CaptureRequest::all(),
            LossMode::SoftLabel => CaptureRequest {
                layers: LayerSelect::None,
                hidden: false,
            },
        }
    }

    pub fn needs_logits(&self) -> bool {
        self.mode == LossMode::SoftLabel
    }

    /// Shape `(d_k', d_k)` of the trainable value projection, if the mode
    /// needs one for this pair.
    pub fn projection_shape(&self, teacher: &ModelConfig, student: &ModelConfig) -> Option<[usize; 2]> {
        (self.mode == LossMode::ValueMse && teacher.head_dim() != student.head_dim())
            .then(|| [student.head_dim(), teacher.head_dim()])
    }
}

/// Per-head row-stochastic |x|×|x| matrices.
#[derive(Clone, Debug)]
pub struct RelationMatrix<H> {
    pub heads: Vec<H>,
}

/// A loss value with its attention and value-relation components, when the
/// mode has them.
#[derive(Clone, Copy, Debug)]
pub struct LossParts<V> {
    pub total: V,
    pub attention: Option<V>,
    pub value_relation: Option<V>,
}

fn check_heads<A, B>(teacher: &[A], student: &[B]) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::HeadMismatch {
            teacher: teacher.len(),
            student: student.len(),
        });
    }
    if teacher.is_empty() {
        return Err(Error::MissingCapture("no heads captured".into()));
    }
    Ok(())
}

fn check_len(teacher: usize, student: usize, valid_len: usize) -> Result<()> {
    if teacher != student {
        return Err(Error::LengthMismatch { teacher, student });
    }
    if valid_len == 0 || valid_len > teacher {
        return Err(Error::OutOfRange(format!(
            "valid length {valid_len} outside 1..={teacher}"
        )));
    }
    Ok(())
}

/// Restricts a teacher distribution to the leading `valid_len` queries and
/// keys, renormalizing each row.
fn restrict_teacher<T: Real>(a: &Tensor<T>, valid_len: usize) -> Result<Tensor<T>> {
    let mut p = a.slice_rows(0, valid_len)?.slice_cols(0, valid_len)?;
    let n = valid_len;
    for i in 0..n {
        let row = &mut p.data_mut()[i * n..(i + 1) * n];
        let s: T = row.iter().copied().sum();
        if !(s > T::ZERO) {
            return Err(Error::NotNormalized {
                row: i,
                sum: s.to_f64(),
            });
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(p)
}

fn restrict_student<T: Real>(tape: &mut Tape<'_, T>, a: Var, valid_len: usize) -> Result<Var> {
    let n = tape.shape(a)[0];
    if n == valid_len {
        return tape.normalize_rows(a);
    }
    let q = tape.slice_rows(a, 0, valid_len)?;
    let q = tape.slice_cols(q, 0, valid_len)?;
    tape.normalize_rows(q)
}

/// Averages per-head KL terms; each `kl_div_rows` already averages over rows.
fn mean_over_heads<T: Real>(tape: &mut Tape<'_, T>, terms: Vec<Var>) -> Result<Var> {
    let heads = terms.len();
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, T::from_f64(1.0 / heads as f64))
}

/// KL from teacher attention distributions to student ones for one layer pair.
pub fn attention_transfer_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    teacher: &LayerCapture<Tensor<T>>,
    student: &LayerCapture<Var>,
    valid_len: usize,
) -> Result<Var> {
    check_heads(&teacher.attention, &student.attention)?;
    let mut terms = Vec::with_capacity(teacher.attention.len());
    for (ta, &sa) in teacher.attention.iter().zip(&student.attention) {
        check_len(ta.rows(), tape.shape(sa)[0], valid_len)?;
        let p = restrict_teacher(ta, valid_len)?;
        let q = restrict_student(tape, sa, valid_len)?;
        terms.push(tape.kl_div_rows(&p, q)?);
    }
    mean_over_heads(tape, terms)
}

/// `softmax(V_a V_aᵀ / sqrt(scale_dim))` per head over the leading
/// `valid_len` positions. The result is |x|×|x| whatever the value width.
pub fn value_relation<T: Real>(
    tape: &mut Tape<'_, T>,
    values: &[Var],
    scale_dim: usize,
    valid_len: usize,
) -> Result<RelationMatrix<Var>> {
    if scale_dim == 0 {
        return Err(Error::Config("relation scale dimension must be positive".into()));
    }
    if valid_len == 0 {
        return Err(Error::OutOfRange("valid length must be positive".into()));
    }
    let scale = T::from_f64(1.0 / (scale_dim as f64).sqrt());
    let mut heads = Vec::with_capacity(values.len());
    for &v in values {
        let n = tape.shape(v)[0];
        if valid_len > n {
            return Err(Error::OutOfRange(format!(
                "valid length {valid_len} exceeds sequence length {n}"
            )));
        }
        let v = if valid_len == n {
            v
        } else {
            tape.slice_rows(v, 0, valid_len)?
        };
        let s = tape.matmul_nt(v, v)?;
        let s = tape.scale(s, scale)?;
        heads.push(tape.softmax_rows(s, None)?);
    }
    Ok(RelationMatrix { heads })
}

/// Relation matrices of constant tensors, computed through the same path.
pub fn value_relation_of<T: Real>(
    values: &[Tensor<T>],
    scale_dim: usize,
    valid_len: usize,
) -> Result<RelationMatrix<Tensor<T>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
    let rel = value_relation(&mut tape, &vars, scale_dim, valid_len)?;
    Ok(RelationMatrix {
        heads: rel.heads.iter().map(|&h| tape.value(h).clone()).collect(),
    })
}

fn relation_kl<T: Real>(
    tape: &mut Tape<'_, T>,
    teacher: &[Tensor<T>],
    teacher_scale: usize,
    student: &[Var],
    student_scale: usize,
    valid_len: usize,
) -> Result<Var> {
    check_heads(teacher, student)?;
    for (t, &s) in teacher.iter().zip(student) {
        check_len(t.rows(), tape.shape(s)[0], valid_len)?;
    }
    let t_rel = value_relation_of(teacher, teacher_scale, valid_len)?;
    let s_rel = value_relation(tape, student, student_scale, valid_len)?;
    let mut terms = Vec::with_capacity(teacher.len());
    for (p, &q) in t_rel.heads.iter().zip(&s_rel.heads) {
        terms.push(tape.kl_div_rows(p, q)?);
    }
    mean_over_heads(tape, terms)
}

fn head_width<T: Real>(values: &[Tensor<T>]) -> Result<usize> {
    values
        .first()
        .map(Tensor::cols)
        .ok_or_else(|| Error::MissingCapture("no heads captured".into()))
}

/// KL between teacher and student value relations, each scaled by its own
/// head width. Introduces no parameters.
pub fn value_relation_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    teacher_values: &[Tensor<T>],
    student_values: &[Var],
    valid_len: usize,
) -> Result<Var> {
    let dk = head_width(teacher_values)?;
    let dk_student = student_values
        .first()
        .map(|&v| tape.shape(v)[1])
        .ok_or_else(|| Error::MissingCapture("no student heads captured".into()))?;
    relation_kl(tape, teacher_values, dk, student_values, dk_student, valid_len)
}

/// Attention transfer plus value-relation transfer on the last layers.
/// With `include_values == false` this is the attention-only ablation and the
/// value-relation component is absent.
pub fn minilm_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    teacher: &LayerCapture<Tensor<T>>,
    student: &LayerCapture<Var>,
    valid_len: usize,
    include_values: bool,
) -> Result<LossParts<Var>> {
    let at = attention_transfer_loss(tape, teacher, student, valid_len)?;
    if !include_values {
        return Ok(LossParts {
            total: at,
            attention: Some(at),
            value_relation: None,
        });
    }
    let vr = value_relation_loss(tape, &teacher.values, &student.values, valid_len)?;
    let total = tape.add(at, vr)?;
    Ok(LossParts {
        total,
        attention: Some(at),
        value_relation: Some(vr),
    })
}

/// `T² · mean_{masked t} KL(softmax(z^T_t / T) ‖ softmax(z^S_t / T))`.
pub fn soft_label_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    teacher_logits: &Tensor<T>,
    student_logits: Var,
    masked_positions: &[usize],
    temperature: f64,
) -> Result<Var> {
    if masked_positions.is_empty() {
        return Err(Error::EmptyMaskedSet);
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if teacher_logits.shape() != tape.shape(student_logits) {
        return Err(Error::Shape(format!(
            "teacher logits {:?} vs student logits {:?}",
            teacher_logits.shape(),
            tape.shape(student_logits)
        )));
    }
    let inv_t = T::from_f64(1.0 / temperature);
    let vocab = teacher_logits.cols();
    let mut p = Vec::with_capacity(masked_positions.len() * vocab);
    for &pos in masked_positions {
        if pos >= teacher_logits.rows() {
            return Err(Error::OutOfRange(format!("masked position {pos}")));
        }
        let mut row: Vec<T> = teacher_logits.row(pos).iter().map(|&z| z * inv_t).collect();
        crate::autodiff::softmax_in_place(&mut row);
        p.extend(row);
    }
    let p = Tensor::new(vec![masked_positions.len(), vocab], p)?;
    let z = tape.select_rows(student_logits, masked_positions)?;
    let z = tape.scale(z, inv_t)?;
    let q = tape.softmax_rows(z, None)?;
    let kl = tape.kl_div_rows(&p, q)?;
    tape.scale(kl, T::from_f64(temperature * temperature))
}

/// Uniform layer map: student layer `i` learns from teacher layer
/// `i · L / M` (both 1-based). Returns `(student, teacher)` pairs.
pub fn uniform_layer_map(teacher_layers: usize, student_layers: usize) -> Result<Vec<(usize, usize)>> {
    if student_layers == 0 || teacher_layers % student_layers != 0 {
        return Err(Error::LayersNotDivisible {
            teacher: teacher_layers,
            student: student_layers,
        });
    }
    let stride = teacher_layers / student_layers;
    Ok((1..=student_layers).map(|i| (i, i * stride)).collect())
}

/// Mean over uniformly mapped layer pairs of attention KL plus value-relation KL.
pub fn layer_to_layer_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    teacher: &AttentionCapture<Tensor<T>>,
    student: &AttentionCapture<Var>,
    teacher_layers: usize,
    student_layers: usize,
    valid_len: usize,
) -> Result<LossParts<Var>> {
    let map = uniform_layer_map(teacher_layers, student_layers)?;
    let mut at_terms = Vec::with_capacity(map.len());
    let mut vr_terms = Vec::with_capacity(map.len());
    for (s, t) in map {
        let tc = teacher.require(t)?;
        let sc = student.require(s)?;
        at_terms.push(attention_transfer_loss(tape, tc, sc, valid_len)?);
        vr_terms.push(value_relation_loss(tape, &tc.values, &sc.values, valid_len)?);
    }
    let at = mean_over_heads(tape, at_terms)?;
    let vr = mean_over_heads(tape, vr_terms)?;
    let total = tape.add(at, vr)?;
    Ok(LossParts {
        total,
        attention: Some(at),
        value_relation: Some(vr),
    })
}

/// Mean squared error between teacher values and `student_values · projection`,
/// averaged over heads, positions and dimensions.
pub fn value_mse_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    teacher_values: &[Tensor<T>],
    student_values: &[Var],
    projection: Option<Var>,
    valid_len: usize,
) -> Result<Var> {
    check_heads(teacher_values, student_values)?;
    let mut terms = Vec::with_capacity(teacher_values.len());
    for (tv, &sv) in teacher_values.iter().zip(student_values) {
        check_len(tv.rows(), tape.shape(sv)[0], valid_len)?;
        let (dk, dk_student) = (tv.cols(), tape.shape(sv)[1]);
        let sv = if valid_len == tv.rows() {
            sv
        } else {
            tape.slice_rows(sv, 0, valid_len)?
        };
        let mapped = match projection {
            Some(p) => tape.matmul(sv, p)?,
            None if dk == dk_student => sv,
            None => {
                return Err(Error::MissingProjection {
                    teacher: dk,
                    student: dk_student,
                })
            }
        };
        let target = tape.constant(tv.slice_rows(0, valid_len)?);
        terms.push(tape.mse(mapped, target)?);
    }
    mean_over_heads(tape, terms)
}

/// Relation KL over last-layer hidden states, each split column-wise into
/// `heads` pseudo-heads.
pub fn hidden_relation_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    teacher_hidden: &Tensor<T>,
    student_hidden: Var,
    heads: usize,
    valid_len: usize,
) -> Result<Var> {
    let (d_t, d_s) = (teacher_hidden.cols(), tape.shape(student_hidden)[1]);
    if heads == 0 || d_t % heads != 0 || d_s % heads != 0 {
        return Err(Error::Config(format!(
            "hidden sizes {d_t} and {d_s} cannot be split into {heads} heads"
        )));
    }
    let (w_t, w_s) = (d_t / heads, d_s / heads);
    let teacher_parts = (0..heads)
        .map(|a| teacher_hidden.slice_cols(a * w_t, (a + 1) * w_t))
        .collect::<Result<Vec<_>>>()?;
    let student_parts = (0..heads)
        .map(|a| tape.slice_cols(student_hidden, a * w_s, (a + 1) * w_s))
        .collect::<Result<Vec<_>>>()?;
    relation_kl(tape, &teacher_parts, w_t, &student_parts, w_s, valid_len)
}

/// Teacher-side features for one sequence.
#[derive(Clone, Debug)]
pub struct TeacherFeatures<T: Real> {
    pub capture: AttentionCapture<Tensor<T>>,
    pub logits: Option<Tensor<T>>,
    pub num_layers: usize,
}

/// Student-side features for one sequence.
#[derive(Clone, Debug)]
pub struct StudentFeatures {
    pub capture: AttentionCapture<Var>,
    pub logits: Option<Var>,
    pub num_layers: usize,
    pub heads: usize,
}

fn last_layer<'c, H>(cap: &'c AttentionCapture<H>, layers: usize) -> Result<&'c LayerCapture<H>> {
    cap.require(layers)
}

/// Evaluates the objective selected by `spec` for one sequence.
pub fn distill_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    spec: &DistillSpec,
    teacher: &TeacherFeatures<T>,
    student: &StudentFeatures,
    projection: Option<Var>,
    valid_len: usize,
    masked_positions: &[usize],
) -> Result<LossParts<Var>> {
    let single = |total| LossParts {
        total,
        attention: None,
        value_relation: None,
    };
    match spec.mode {
        LossMode::Minilm | LossMode::AttOnly => {
            let t = last_layer(&teacher.capture, teacher.num_layers)?;
            let s = last_layer(&student.capture, student.num_layers)?;
            minilm_loss(tape, t, s, valid_len, spec.mode == LossMode::Minilm)
        }
        LossMode::LayerToLayer => layer_to_layer_loss(
            tape,
            &teacher.capture,
            &student.capture,
            teacher.num_layers,
            student.num_layers,
            valid_len,
        ),
        LossMode::ValueMse => {
            let t = last_layer(&teacher.capture, teacher.num_layers)?;
            let s = last_layer(&student.capture, student.num_layers)?;
            value_mse_loss(tape, &t.values, &s.values, projection, valid_len).map(single)
        }
        LossMode::HiddenRelation => {
            let t = last_layer(&teacher.capture, teacher.num_layers)?;
            let s = last_layer(&student.capture, student.num_layers)?;
            let th = t
                .hidden
                .as_ref()
                .ok_or_else(|| Error::MissingCapture("teacher hidden states".into()))?;
            let sh = s
                .hidden
                .ok_or_else(|| Error::MissingCapture("student hidden states".into()))?;
            hidden_relation_loss(tape, th, sh, student.heads, valid_len).map(single)
        }
        LossMode::SoftLabel => {
            let tl = teacher
                .logits
                .as_ref()
                .ok_or_else(|| Error::MissingCapture("teacher logits".into()))?;
            let sl = student
                .logits
                .ok_or_else(|| Error::MissingCapture("student logits".into()))?;
            soft_label_loss(tape, tl, sl, masked_positions, spec.soft_label_temperature)
                .map(single)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn capture_of(tape: &mut Tape<'_, f64>, attn: Vec<Tensor<f64>>, values: Vec<Tensor<f64>>) -> LayerCapture<Var> {
        LayerCapture {
            layer: 1,
            queries: vec![],
            keys: vec![],
            values: values.into_iter().map(|v| tape.leaf(v, true)).collect(),
            attention: attn.into_iter().map(|a| tape.leaf(a, true)).collect(),
            hidden: None,
        }
    }

    fn frozen(attn: Vec<Tensor<f64>>, values: Vec<Tensor<f64>>) -> LayerCapture<Tensor<f64>> {
        LayerCapture {
            layer: 1,
            queries: vec![],
            keys: vec![],
            values,
            attention: attn,
            hidden: None,
        }
    }

    #[test]
    fn attention_transfer_closed_form() {
        let teacher = frozen(vec![t(&[2, 2], &[1., 0., 0., 1.])], vec![]);
        let mut tape = Tape::new();
        let student = capture_of(&mut tape, vec![t(&[2, 2], &[0.5; 4])], vec![]);
        let l = attention_transfer_loss(&mut tape, &teacher, &student, 2).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let student = capture_of(&mut tape, vec![t(&[2, 2], &[1., 0., 0., 1.])], vec![]);
        let l = attention_transfer_loss(&mut tape, &teacher, &student, 2).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn attention_transfer_errors() {
        let teacher = frozen(vec![t(&[2, 2], &[0.5; 4]); 2], vec![]);
        let mut tape = Tape::new();
        let one_head = capture_of(&mut tape, vec![t(&[2, 2], &[0.5; 4])], vec![]);
        assert!(matches!(
            attention_transfer_loss(&mut tape, &teacher, &one_head, 2),
            Err(Error::HeadMismatch { teacher: 2, student: 1 })
        ));
        let longer = capture_of(&mut tape, vec![Tensor::full(&[3, 3], 1.0 / 3.0); 2], vec![]);
        assert!(matches!(
            attention_transfer_loss(&mut tape, &teacher, &longer, 2),
            Err(Error::LengthMismatch { .. })
        ));
        let zero = capture_of(&mut tape, vec![t(&[2, 2], &[1., 0., 1., 0.]); 2], vec![]);
        assert!(matches!(
            attention_transfer_loss(&mut tape, &teacher, &zero, 2),
            Err(Error::SupportViolation { .. })
        ));
    }

    #[test]
    fn padded_positions_are_ignored() {
        // Rows past the valid length and mass on padded keys do not matter.
        let teacher = frozen(
            vec![t(&[3, 3], &[0.6, 0.4, 0.0, 0.3, 0.7, 0.0, 0.2, 0.2, 0.6])],
            vec![],
        );
        let mut tape = Tape::new();
        let a = capture_of(
            &mut tape,
            vec![t(&[3, 3], &[0.3, 0.2, 0.5, 0.15, 0.35, 0.5, 0.1, 0.1, 0.8])],
            vec![],
        );
        let b = capture_of(
            &mut tape,
            vec![t(&[3, 3], &[0.6, 0.4, 0.0, 0.3, 0.7, 0.0, 0.9, 0.05, 0.05])],
            vec![],
        );
        let la = attention_transfer_loss(&mut tape, &teacher, &a, 2).unwrap();
        let lb = attention_transfer_loss(&mut tape, &teacher, &b, 2).unwrap();
        assert!(tape.value(la).item().abs() < 1e-15);
        assert!(tape.value(lb).item().abs() < 1e-15);
    }

    #[test]
    fn value_relation_examples() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(t(&[1, 3], &[0.3, -1.0, 2.0]));
        let r = value_relation(&mut tape, &[v], 3, 1).unwrap();
        assert_eq!(tape.value(r.heads[0]).data(), &[1.0]);

        let v = tape.constant(Tensor::zeros(&[3, 4]));
        let r = value_relation(&mut tape, &[v], 4, 3).unwrap();
        for x in tape.value(r.heads[0]).data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }

        let v = tape.constant(Tensor::eye(2));
        let r = value_relation(&mut tape, &[v], 1, 2).unwrap();
        let got = tape.value(r.heads[0]).data();
        let e = std::f64::consts::E;
        let expected = [e / (e + 1.0), 1.0 / (e + 1.0), 1.0 / (e + 1.0), e / (e + 1.0)];
        for (g, x) in got.iter().zip(expected) {
            assert!((g - x).abs() < 1e-12);
        }
        assert!((got[0] - 0.73106).abs() < 1e-4);

        assert!(value_relation(&mut tape, &[v], 0, 2).is_err());
        assert!(value_relation(&mut tape, &[v], 1, 0).is_err());
    }

    #[test]
    fn value_relation_loss_across_widths() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
        let teacher = vec![Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng)];
        let mut tape = Tape::new();
        let student = vec![tape.leaf(Tensor::randn(&[4, 2], 1.0, &mut rng), true)];
        let l = value_relation_loss(&mut tape, &teacher, &student, 4).unwrap();
        let v = tape.value(l).item();
        assert!(v.is_finite() && v >= 0.0);

        let same = vec![tape.leaf(teacher[0].clone(), true)];
        let l = value_relation_loss(&mut tape, &teacher, &same, 4).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn minilm_is_sum_of_parts() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(8);
        let attn = |rng: &mut rand_chacha::ChaCha8Rng| {
            let mut a = Tensor::<f64>::uniform(&[3, 3], 0.1, 1.0, rng);
            for i in 0..3 {
                let s: f64 = a.row(i).iter().sum();
                for j in 0..3 {
                    a.data_mut()[i * 3 + j] /= s;
                }
            }
            a
        };
        let teacher = frozen(
            vec![attn(&mut rng), attn(&mut rng)],
            vec![Tensor::randn(&[3, 4], 1.0, &mut rng), Tensor::randn(&[3, 4], 1.0, &mut rng)],
        );
        let mut tape = Tape::new();
        let sa = vec![attn(&mut rng), attn(&mut rng)];
        let sv = vec![Tensor::randn(&[3, 2], 1.0, &mut rng), Tensor::randn(&[3, 2], 1.0, &mut rng)];
        let student = capture_of(&mut tape, sa, sv);
        let parts = minilm_loss(&mut tape, &teacher, &student, 3, true).unwrap();
        let at = attention_transfer_loss(&mut tape, &teacher, &student, 3).unwrap();
        let vr = value_relation_loss(&mut tape, &teacher.values, &student.values, 3).unwrap();
        assert_eq!(
            tape.value(parts.total).item(),
            tape.value(at).item() + tape.value(vr).item()
        );
        let only = minilm_loss(&mut tape, &teacher, &student, 3, false).unwrap();
        assert_eq!(tape.value(only.total).item(), tape.value(at).item());
        assert!(only.value_relation.is_none());
    }

    #[test]
    fn soft_label_examples() {
        let mut tape = Tape::<f64>::new();
        let teacher = t(&[1, 2], &[2f64.ln(), 0.0]);
        let student = tape.leaf(t(&[1, 2], &[0.0, 0.0]), true);
        let l = soft_label_loss(&mut tape, &teacher, student, &[0], 1.0).unwrap();
        let p = [2.0 / 3.0, 1.0 / 3.0];
        let expected: f64 = p.iter().map(|&pi: &f64| pi * (pi / 0.5).ln()).sum();
        assert!((tape.value(l).item() - expected).abs() < 1e-12);
        assert!((tape.value(l).item() - 0.0566).abs() < 1e-4);

        let same = tape.leaf(teacher.clone(), true);
        for temp in [1.0, 2.0] {
            let l = soft_label_loss(&mut tape, &teacher, same, &[0], temp).unwrap();
            assert!(tape.value(l).item().abs() < 1e-15);
        }
        assert!(matches!(
            soft_label_loss(&mut tape, &teacher, same, &[], 1.0),
            Err(Error::EmptyMaskedSet)
        ));
    }

    #[test]
    fn uniform_map() {
        assert_eq!(uniform_layer_map(12, 3).unwrap(), vec![(1, 4), (2, 8), (3, 12)]);
        assert_eq!(uniform_layer_map(4, 4).unwrap(), vec![(1, 1), (2, 2), (3, 3), (4, 4)]);
        let err = uniform_layer_map(12, 5).unwrap_err();
        assert!(err.to_string().contains("layer counts not divisible"));
    }

    #[test]
    fn value_mse_examples() {
        let mut tape = Tape::<f64>::new();
        let teacher = vec![t(&[1, 1], &[2.0])];
        let student = vec![tape.leaf(t(&[1, 1], &[1.0]), true)];
        let proj = tape.constant(t(&[1, 1], &[1.0]));
        let l = value_mse_loss(&mut tape, &teacher, &student, Some(proj), 1).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);

        let teacher = vec![t(&[2, 2], &[1., 2., 3., 4.])];
        let student = vec![tape.leaf(teacher[0].clone(), true)];
        let eye = tape.constant(Tensor::eye(2));
        let l = value_mse_loss(&mut tape, &teacher, &student, Some(eye), 2).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let narrow = vec![tape.leaf(t(&[2, 1], &[1., 2.]), true)];
        assert!(matches!(
            value_mse_loss(&mut tape, &teacher, &narrow, None, 2),
            Err(Error::MissingProjection { teacher: 2, student: 1 })
        ));
    }

    #[test]
    fn value_mse_trains_the_projection() {
        let mut tape = Tape::<f64>::new();
        let teacher = vec![t(&[2, 2], &[1., 2., 3., 4.])];
        let student = vec![tape.leaf(t(&[2, 1], &[1., -1.]), true)];
        let proj = tape.leaf(t(&[1, 2], &[0.5, 0.5]), true);
        let l = value_mse_loss(&mut tape, &teacher, &student, Some(proj), 2).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(proj).unwrap().data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn hidden_relation_examples() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2);
        let teacher = Tensor::<f64>::randn(&[3, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let same = tape.leaf(teacher.clone(), true);
        let l = hidden_relation_loss(&mut tape, &teacher, same, 2, 3).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let narrow = tape.leaf(Tensor::randn(&[3, 4], 1.0, &mut rng), true);
        let l = hidden_relation_loss(&mut tape, &teacher, narrow, 2, 3).unwrap();
        assert!(tape.value(l).item().is_finite());
        assert!(hidden_relation_loss(&mut tape, &teacher, narrow, 3, 3).is_err());
    }

    #[test]
    fn spec_validation() {
        let teacher = ModelConfig::new(4, 64, 4, 100, 16);
        let ok = ModelConfig::new(2, 32, 4, 100, 16);
        let other_heads = ModelConfig::new(2, 32, 2, 100, 16);
        let three = ModelConfig::new(3, 32, 4, 100, 16);
        for mode in LossMode::ALL {
            DistillSpec::new(mode).validate(&teacher, &ok).unwrap();
        }
        assert!(DistillSpec::new(LossMode::Minilm).validate(&teacher, &other_heads).is_err());
        assert!(DistillSpec::new(LossMode::SoftLabel).validate(&teacher, &other_heads).is_ok());
        assert!(DistillSpec::new(LossMode::LayerToLayer).validate(&teacher, &three).is_err());
        assert_eq!(
            DistillSpec::new(LossMode::ValueMse).projection_shape(&teacher, &ok),
            Some([8, 16])
        );
        assert_eq!(DistillSpec::new(LossMode::Minilm).projection_shape(&teacher, &ok), None);
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in LossMode::ALL {
            assert_eq!(mode.as_str().parse::<LossMode>().unwrap(), mode);
        }
        assert_eq!("att_only".parse::<LossMode>().unwrap(), LossMode::AttOnly);
        assert!("nope".parse::<LossMode>().is_err());
    }
}
