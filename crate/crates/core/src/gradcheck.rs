//! Central finite-difference verification of tape gradients in 64-bit.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{
    hidden_relation_loss, layer_to_layer_loss, minilm_loss, soft_label_loss, value_mse_loss,
};
use crate::model::{
    encode, mlm_cross_entropy, mlm_logits, AttentionCapture, Bound, CaptureRequest, EncodeInput,
    LayerCapture, ModelConfig, TransformerModel,
};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const STEP: f64 = 1e-5;
/// Default pass threshold on the worst relative error.
pub const THRESHOLD: f64 = 1e-4;
/// Gradient magnitudes below this are compared on an absolute scale.
const DENOM_FLOOR: f64 = 1e-3;

pub type BuildFn = dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn evaluate(build: &BuildFn, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Analytic gradients of `build` with respect to every input.
pub fn analytic_gradients(build: &BuildFn, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .map(|&v| tape.take_grad(v).expect("leaf gradient"))
        .collect())
}

/// Central differences `(f(x+h) − f(x−h)) / 2h` for every input coordinate.
pub fn numeric_gradients(
    build: &BuildFn,
    inputs: &[Tensor<f64>],
    step: f64,
) -> Result<Vec<Tensor<f64>>> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = evaluate(build, &work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = evaluate(build, &work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Worst relative error between analytic and numeric gradients.
pub fn max_relative_error(build: &BuildFn, inputs: &[Tensor<f64>], step: f64) -> Result<f64> {
    let analytic = analytic_gradients(build, inputs)?;
    let numeric = numeric_gradients(build, inputs, step)?;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            worst = worst.max(relative_error(x, y));
        }
    }
    Ok(worst)
}

/// One named gradient check.
pub struct Check {
    pub name: String,
    pub group: Group,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<BuildFn>,
}

impl Check {
    pub fn new(
        name: impl Into<String>,
        group: Group,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Check {
            name: name.into(),
            group,
            inputs,
            build: Box::new(build),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Ops,
    Losses,
    Model,
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub error: Option<String>,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl GradReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.outcomes
            .iter()
            .filter(|o| !o.passed)
            .map(|o| o.name.as_str())
            .collect()
    }

    pub fn exit_code(&self) -> i32 {
        if self.all_passed() {
            0
        } else {
            1
        }
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>14}  result", "check", "max rel err")?;
        for o in &self.outcomes {
            match &o.error {
                Some(e) => writeln!(f, "{:<28} {:>14}  FAIL ({e})", o.name, "-")?,
                None => writeln!(
                    f,
                    "{:<28} {:>14.3e}  {}",
                    o.name,
                    o.max_rel_err,
                    if o.passed { "ok" } else { "FAIL" }
                )?,
            }
        }
        Ok(())
    }
}

pub fn run(checks: &[Check], threshold: f64) -> GradReport {
    let outcomes = checks
        .iter()
        .map(|c| match max_relative_error(&*c.build, &c.inputs, STEP) {
            Ok(err) => CheckOutcome {
                name: c.name.clone(),
                max_rel_err: err,
                error: None,
                passed: err < threshold,
            },
            Err(e) => CheckOutcome {
                name: c.name.clone(),
                max_rel_err: f64::INFINITY,
                error: Some(e.to_string()),
                passed: false,
            },
        })
        .collect();
    GradReport { outcomes }
}

/// Which part of the suite to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Module {
    All,
    Ops,
    Losses,
    Model,
}

impl Module {
    fn includes(self, g: Group) -> bool {
        match self {
            Module::All => true,
            Module::Ops => g == Group::Ops,
            Module::Losses => g == Group::Losses,
            Module::Model => g == Group::Model,
        }
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(Module::All),
            "ops" => Ok(Module::Ops),
            "losses" => Ok(Module::Losses),
            "model" => Ok(Module::Model),
            other => Err(Error::Config(format!("unknown gradcheck module {other:?}"))),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Row-stochastic matrix from random logits.
fn distribution(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let mut t = uniform(rng, &[rows, cols], -2.0, 2.0);
    for i in 0..rows {
        crate::autodiff::softmax_in_place(&mut t.data_mut()[i * cols..(i + 1) * cols]);
    }
    t
}

/// Reduces a matrix to a scalar through a fixed random linear functional.
fn project(tape: &mut Tape<'_, f64>, x: Var, w: &Tensor<f64>) -> Result<Var> {
    if tape.value(x).numel() == 1 {
        return Ok(x);
    }
    let c = tape.constant(w.slice_rows(0, tape.shape(x)[1])?);
    let y = tape.matmul(x, c)?;
    tape.sum(y)
}

fn op_checks(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let w = uniform(rng, &[8, 1], -1.0, 1.0);
    let mut checks = Vec::new();
    let mut add = |name: &str, inputs: Vec<Tensor<f64>>, f: Box<BuildFn>| {
        let w = w.clone();
        checks.push(Check::new(name, Group::Ops, inputs, move |t, v| {
            let out = f(t, v)?;
            project(t, out, &w)
        }));
    };

    add("matmul", vec![uniform(rng, &[3, 4], -2.0, 2.0), uniform(rng, &[4, 5], -2.0, 2.0)],
        Box::new(|t, v| t.matmul(v[0], v[1])));
    add("matmul_nt", vec![uniform(rng, &[3, 4], -2.0, 2.0), uniform(rng, &[5, 4], -2.0, 2.0)],
        Box::new(|t, v| t.matmul_nt(v[0], v[1])));
    add("add", vec![uniform(rng, &[3, 4], -6.0, 6.0), uniform(rng, &[3, 4], -6.0, 6.0)],
        Box::new(|t, v| t.add(v[0], v[1])));
    add("add_row", vec![uniform(rng, &[3, 4], -6.0, 6.0), uniform(rng, &[4], -6.0, 6.0)],
        Box::new(|t, v| t.add_row(v[0], v[1])));
    add("scale", vec![uniform(rng, &[3, 4], -6.0, 6.0)], Box::new(|t, v| t.scale(v[0], -1.7)));
    add("transpose", vec![uniform(rng, &[3, 5], -6.0, 6.0)], Box::new(|t, v| t.transpose(v[0])));
    add("embedding_lookup", vec![uniform(rng, &[6, 4], -2.0, 2.0)],
        Box::new(|t, v| t.embedding(v[0], &[2, 0, 2, 5])));
    add("slice_rows", vec![uniform(rng, &[5, 4], -6.0, 6.0)], Box::new(|t, v| t.slice_rows(v[0], 1, 4)));
    add("slice_cols", vec![uniform(rng, &[3, 6], -6.0, 6.0)], Box::new(|t, v| t.slice_cols(v[0], 2, 5)));
    add("select_rows", vec![uniform(rng, &[5, 4], -6.0, 6.0)],
        Box::new(|t, v| t.select_rows(v[0], &[4, 1, 4])));
    add("concat_cols", vec![uniform(rng, &[3, 2], -6.0, 6.0), uniform(rng, &[3, 3], -6.0, 6.0)],
        Box::new(|t, v| t.concat_cols(&[v[0], v[1]])));
    let mask = Tensor::from_f64(&[3, 4], &[1., 1., 1., 0., 1., 1., 1., 0., 1., 1., 1., 0.]).expect("mask");
    add("softmax_rows", vec![uniform(rng, &[3, 4], -6.0, 6.0)],
        Box::new(move |t, v| t.softmax_rows(v[0], Some(&mask))));
    add("log_softmax_rows", vec![uniform(rng, &[3, 5], -6.0, 6.0)],
        Box::new(|t, v| t.log_softmax_rows(v[0])));
    add("normalize_rows", vec![uniform(rng, &[3, 4], 0.5, 3.0)], Box::new(|t, v| t.normalize_rows(v[0])));
    let mut p = distribution(rng, 3, 4);
    // A zero teacher entry exercises the 0·ln 0 convention.
    let rest = 1.0 - p.data()[1];
    p.data_mut()[1] = 0.0;
    for x in &mut p.data_mut()[..4] {
        *x /= rest;
    }
    add("kl_div_rows", vec![uniform(rng, &[3, 4], -3.0, 3.0)], Box::new(move |t, v| {
        let q = t.softmax_rows(v[0], None)?;
        t.kl_div_rows(&p, q)
    }));
    add("layernorm", vec![
        uniform(rng, &[3, 5], -6.0, 6.0),
        uniform(rng, &[5], 0.5, 2.0),
        uniform(rng, &[5], -1.0, 1.0),
    ], Box::new(|t, v| t.layernorm(v[0], v[1], v[2], 1e-12)));
    add("gelu", vec![uniform(rng, &[3, 4], -6.0, 6.0)], Box::new(|t, v| t.gelu(v[0])));
    add("mse", vec![uniform(rng, &[3, 4], -6.0, 6.0), uniform(rng, &[3, 4], -6.0, 6.0)],
        Box::new(|t, v| t.mse(v[0], v[1])));
    add("sum", vec![uniform(rng, &[3, 4], -6.0, 6.0)], Box::new(|t, v| t.sum(v[0])));
    add("mean", vec![uniform(rng, &[3, 4], -6.0, 6.0)], Box::new(|t, v| t.mean(v[0])));
    add("pick", vec![uniform(rng, &[3, 4], -6.0, 6.0)],
        Box::new(|t, v| {
            let picked = t.pick(v[0], &[(0, 1), (2, 3), (0, 1)])?;
            // Non-uniform weights on the picked entries.
            let bent = t.gelu(picked)?;
            t.sum(bent)
        }));
    add("dropout", vec![uniform(rng, &[3, 4], -6.0, 6.0)], Box::new(|t, v| {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        t.dropout(v[0], 0.3, &mut r)
    }));
    checks
}

/// Teacher capture with fixed attention/values, and a student capture whose
/// attention comes from free logits.
struct CaptureFixture {
    teacher: LayerCapture<Tensor<f64>>,
    /// Per head: logits then values.
    inputs: Vec<Tensor<f64>>,
}

fn capture_fixture(rng: &mut ChaCha8Rng, layer: usize, n: usize, heads: usize, dk_t: usize, dk_s: usize) -> CaptureFixture {
    let teacher = LayerCapture {
        layer,
        queries: vec![],
        keys: vec![],
        values: (0..heads).map(|_| uniform(rng, &[n, dk_t], -2.0, 2.0)).collect(),
        attention: (0..heads).map(|_| distribution(rng, n, n)).collect(),
        hidden: None,
    };
    let mut inputs = Vec::new();
    for _ in 0..heads {
        inputs.push(uniform(rng, &[n, n], -2.0, 2.0));
        inputs.push(uniform(rng, &[n, dk_s], -2.0, 2.0));
    }
    CaptureFixture { teacher, inputs }
}

fn student_capture(tape: &mut Tape<'_, f64>, layer: usize, vars: &[Var]) -> Result<LayerCapture<Var>> {
    let mut cap = LayerCapture {
        layer,
        queries: vec![],
        keys: vec![],
        values: vec![],
        attention: vec![],
        hidden: None,
    };
    for pair in vars.chunks(2) {
        cap.attention.push(tape.softmax_rows(pair[0], None)?);
        cap.values.push(pair[1]);
    }
    Ok(cap)
}

fn loss_checks(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let (n, valid, heads) = (4, 3, 2);
    let mut checks = Vec::new();

    for (name, with_values) in [("loss:minilm", true), ("loss:att-only", false)] {
        let f = capture_fixture(rng, 1, n, heads, 4, 3);
        let teacher = f.teacher;
        checks.push(Check::new(name, Group::Losses, f.inputs, move |t, v| {
            let s = student_capture(t, 1, v)?;
            Ok(minilm_loss(t, &teacher, &s, valid, with_values)?.total)
        }));
    }

    let teacher_logits = uniform(rng, &[n, 7], -3.0, 3.0);
    checks.push(Check::new(
        "loss:soft-label",
        Group::Losses,
        vec![uniform(rng, &[n, 7], -3.0, 3.0)],
        move |t, v| soft_label_loss(t, &teacher_logits, v[0], &[1, 2], 2.0),
    ));

    let teacher = AttentionCapture {
        layers: (1..=4).map(|l| capture_fixture(rng, l, n, heads, 4, 3).teacher).collect(),
    };
    let inputs: Vec<Tensor<f64>> = (1..=2).flat_map(|l| capture_fixture(rng, l, n, heads, 4, 3).inputs).collect();
    checks.push(Check::new("loss:layer2layer", Group::Losses, inputs, move |t, v| {
        let per_layer = 2 * heads;
        let student = AttentionCapture {
            layers: vec![
                student_capture(t, 1, &v[..per_layer])?,
                student_capture(t, 2, &v[per_layer..])?,
            ],
        };
        Ok(layer_to_layer_loss(t, &teacher, &student, 4, 2, valid)?.total)
    }));

    let teacher_values: Vec<Tensor<f64>> = (0..heads).map(|_| uniform(rng, &[n, 4], -2.0, 2.0)).collect();
    let mut inputs: Vec<Tensor<f64>> = (0..heads).map(|_| uniform(rng, &[n, 3], -2.0, 2.0)).collect();
    inputs.push(uniform(rng, &[3, 4], -1.0, 1.0));
    checks.push(Check::new("loss:value-mse", Group::Losses, inputs, move |t, v| {
        value_mse_loss(t, &teacher_values, &v[..heads], Some(v[heads]), valid)
    }));

    let teacher_hidden = uniform(rng, &[n, 8], -2.0, 2.0);
    checks.push(Check::new(
        "loss:hidden-relation",
        Group::Losses,
        vec![uniform(rng, &[n, 6], -2.0, 2.0)],
        move |t, v| hidden_relation_loss(t, &teacher_hidden, v[0], heads, valid),
    ));
    checks
}

/// Randomly initialized parameters pushed away from the tiny init scale so
/// every path carries a non-negligible gradient.
fn lively_model(config: ModelConfig, seed: u64, rng: &mut ChaCha8Rng) -> Result<TransformerModel<f64>> {
    let mut m = TransformerModel::<f64>::init(config, seed)?;
    for p in m.params_mut() {
        for x in p.data_mut() {
            *x += rng.gen_range(-0.5..0.5);
        }
    }
    Ok(m)
}

struct Sample {
    tokens: Vec<usize>,
    segments: Vec<usize>,
    mask: Vec<u8>,
}

impl Sample {
    fn input(&self) -> EncodeInput<'_> {
        EncodeInput {
            token_ids: &self.tokens,
            segment_ids: &self.segments,
            attn_mask: &self.mask,
        }
    }
}

fn model_checks(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let sample = Sample {
        tokens: vec![2, 7, 4, 9, 3, 0],
        segments: vec![0, 0, 0, 1, 1, 0],
        mask: vec![1, 1, 1, 1, 1, 0],
    };
    let mut checks = Vec::new();

    let config = ModelConfig::new(2, 8, 2, 12, 6).with_dropout(0.0);
    let model = lively_model(config.clone(), 1, rng)?;
    let layout = model.layout().clone();
    let s = Sample { ..sample };
    checks.push(Check::new(
        "model:mlm_cross_entropy",
        Group::Model,
        model.into_params(),
        move |t, v| {
            let bound = Bound::from_vars(&config, &layout, v.to_vec());
            let enc = encode(t, &bound, &s.input(), &CaptureRequest::none(), None)?;
            let logits = mlm_logits(t, &bound, enc.hidden)?;
            mlm_cross_entropy(t, logits, &[1, 2], &[7, 5])
        },
    ));

    let sample = Sample {
        tokens: vec![2, 5, 6, 8, 3, 0],
        segments: vec![0; 6],
        mask: vec![1, 1, 1, 1, 1, 0],
    };
    let t_config = ModelConfig::new(2, 8, 2, 12, 6).with_dropout(0.0);
    let teacher = lively_model(t_config, 2, rng)?;
    let teacher_cap = {
        let mut tape = Tape::new();
        let bound = teacher.bind_frozen(&mut tape);
        let enc = encode(&mut tape, &bound, &sample.input(), &CaptureRequest::last(), None)?;
        enc.capture.resolve(&tape).layers.pop().expect("last layer")
    };
    let s_config = ModelConfig::new(2, 4, 2, 12, 6).with_dropout(0.0);
    let student = lively_model(s_config.clone(), 3, rng)?;
    let s_layout = student.layout().clone();
    checks.push(Check::new(
        "model:minilm_student",
        Group::Model,
        student.into_params(),
        move |t, v| {
            let bound = Bound::from_vars(&s_config, &s_layout, v.to_vec());
            let enc = encode(t, &bound, &sample.input(), &CaptureRequest::last(), None)?;
            let cap = enc.capture.require(2)?.clone();
            Ok(minilm_loss(t, &teacher_cap, &cap, 5, true)?.total)
        },
    ));
    Ok(checks)
}

/// The finite-difference suite for `module`, with toy inputs drawn from `seed`.
pub fn suite(module: Module, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = op_checks(&mut rng);
    checks.extend(loss_checks(&mut rng));
    checks.extend(model_checks(&mut rng)?);
    checks.retain(|c| module.includes(c.group));
    Ok(checks)
}
