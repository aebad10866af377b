//! BERT-style post-LN Transformer encoder with a tied MLM head.
//!
//! Parameters live in a flat list described by [`ParamLayout`]. A forward
//! pass binds them onto a [`Tape`] (by reference) and returns tape handles,
//! so the same code path serves training, frozen-teacher inference and
//! finite-difference checks.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

fn default_segments() -> usize {
    2
}

fn default_dropout() -> f64 {
    0.1
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Feed-forward width; `0` in a config file means `4 * hidden`.
    #[serde(default)]
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_segments")]
    pub num_segments: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(
        num_layers: usize,
        hidden: usize,
        heads: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Self {
        ModelConfig {
            num_layers,
            hidden,
            heads,
            ffn_dim: 4 * hidden,
            vocab_size,
            max_seq_len,
            num_segments: 2,
            dropout: 0.1,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    /// Fills defaulted fields after deserialization.
    pub fn normalized(mut self) -> Self {
        if self.ffn_dim == 0 {
            self.ffn_dim = 4 * self.hidden;
        }
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_segments", self.num_segments),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// `LxD` shorthand used in reports.
    pub fn label(&self) -> String {
        format!("{}x{}", self.num_layers, self.hidden)
    }
}

/// Closed-form parameter counts as reported in the size table:
/// `(token embedding, transformer stack)`.
pub fn count_params(config: &ModelConfig) -> (usize, usize) {
    let c = census(config);
    (c.token_embedding, c.transformer)
}

/// Every allocated parameter, grouped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCensus {
    /// `vocab · d_h`
    pub token_embedding: usize,
    /// Position and segment tables plus the embedding layernorm.
    pub other_embedding: usize,
    /// `L · (4(d² + d) + (d·d_ff + d_ff) + (d_ff·d + d) + 4d)`
    pub transformer: usize,
    /// Transform layer, its layernorm and the decoder bias (decoder weights are tied).
    pub mlm_head: usize,
}

impl ParamCensus {
    pub fn total(&self) -> usize {
        self.token_embedding + self.other_embedding + self.transformer + self.mlm_head
    }
}

pub fn census(config: &ModelConfig) -> ParamCensus {
    let (d, f, v) = (config.hidden, config.ffn_dim, config.vocab_size);
    let per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d;
    ParamCensus {
        token_embedding: v * d,
        other_embedding: config.max_seq_len * d + config.num_segments * d + 2 * d,
        transformer: config.num_layers * per_layer,
        mlm_head: d * d + d + 2 * d + v,
    }
}

/// Forward FLOPs per token of the encoder stack, multiply-add = 2:
/// projections `8·d²`, attention scores and mixing `4·n·d`, FFN `4·d·d_ff`, per layer.
pub fn flops_per_token(config: &ModelConfig, seq_len: usize) -> u64 {
    let (d, f, n) = (
        config.hidden as u64,
        config.ffn_dim as u64,
        seq_len as u64,
    );
    config.num_layers as u64 * (8 * d * d + 4 * n * d + 4 * d * f)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Embedding,
}

impl ParamKind {
    /// Biases and layernorm parameters are exempt from weight decay.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Embedding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerIds {
    pub q_w: usize,
    pub q_b: usize,
    pub k_w: usize,
    pub k_b: usize,
    pub v_w: usize,
    pub v_b: usize,
    pub o_w: usize,
    pub o_b: usize,
    pub attn_ln_g: usize,
    pub attn_ln_b: usize,
    pub ffn_in_w: usize,
    pub ffn_in_b: usize,
    pub ffn_out_w: usize,
    pub ffn_out_b: usize,
    pub ffn_ln_g: usize,
    pub ffn_ln_b: usize,
}

/// Positions of every named parameter in the flat parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    pub specs: Vec<ParamSpec>,
    pub token: usize,
    pub position: usize,
    pub segment: usize,
    pub emb_ln_g: usize,
    pub emb_ln_b: usize,
    pub layers: Vec<LayerIds>,
    pub head_w: usize,
    pub head_b: usize,
    pub head_ln_g: usize,
    pub head_ln_b: usize,
    pub decoder_b: usize,
}

impl ParamLayout {
    pub fn new(config: &ModelConfig) -> Self {
        let (d, f) = (config.hidden, config.ffn_dim);
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, kind: ParamKind| {
            specs.push(ParamSpec { name, shape, kind });
            specs.len() - 1
        };
        let token = add("embeddings.token".into(), vec![config.vocab_size, d], ParamKind::Embedding);
        let position = add(
            "embeddings.position".into(),
            vec![config.max_seq_len, d],
            ParamKind::Embedding,
        );
        let segment = add(
            "embeddings.segment".into(),
            vec![config.num_segments, d],
            ParamKind::Embedding,
        );
        let emb_ln_g = add("embeddings.ln.gamma".into(), vec![d], ParamKind::Norm);
        let emb_ln_b = add("embeddings.ln.beta".into(), vec![d], ParamKind::Norm);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = |s: &str| format!("layer.{l}.{s}");
            layers.push(LayerIds {
                q_w: add(p("attn.query.weight"), vec![d, d], ParamKind::Weight),
                q_b: add(p("attn.query.bias"), vec![d], ParamKind::Bias),
                k_w: add(p("attn.key.weight"), vec![d, d], ParamKind::Weight),
                k_b: add(p("attn.key.bias"), vec![d], ParamKind::Bias),
                v_w: add(p("attn.value.weight"), vec![d, d], ParamKind::Weight),
                v_b: add(p("attn.value.bias"), vec![d], ParamKind::Bias),
                o_w: add(p("attn.output.weight"), vec![d, d], ParamKind::Weight),
                o_b: add(p("attn.output.bias"), vec![d], ParamKind::Bias),
                attn_ln_g: add(p("attn.ln.gamma"), vec![d], ParamKind::Norm),
                attn_ln_b: add(p("attn.ln.beta"), vec![d], ParamKind::Norm),
                ffn_in_w: add(p("ffn.in.weight"), vec![d, f], ParamKind::Weight),
                ffn_in_b: add(p("ffn.in.bias"), vec![f], ParamKind::Bias),
                ffn_out_w: add(p("ffn.out.weight"), vec![f, d], ParamKind::Weight),
                ffn_out_b: add(p("ffn.out.bias"), vec![d], ParamKind::Bias),
                ffn_ln_g: add(p("ffn.ln.gamma"), vec![d], ParamKind::Norm),
                ffn_ln_b: add(p("ffn.ln.beta"), vec![d], ParamKind::Norm),
            });
        }
        let head_w = add("mlm.transform.weight".into(), vec![d, d], ParamKind::Weight);
        let head_b = add("mlm.transform.bias".into(), vec![d], ParamKind::Bias);
        let head_ln_g = add("mlm.ln.gamma".into(), vec![d], ParamKind::Norm);
        let head_ln_b = add("mlm.ln.beta".into(), vec![d], ParamKind::Norm);
        let decoder_b = add("mlm.decoder.bias".into(), vec![config.vocab_size], ParamKind::Bias);
        ParamLayout {
            specs,
            token,
            position,
            segment,
            emb_ln_g,
            emb_ln_b,
            layers,
            head_w,
            head_b,
            head_ln_g,
            head_ln_b,
            decoder_b,
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

/// Which layers to record during [`encode`]. Layer numbers are 1-based,
/// so layer `L` is the last Transformer layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSelect {
    None,
    Last,
    All,
    Only(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptureRequest {
    pub layers: LayerSelect,
    pub hidden: bool,
}

impl CaptureRequest {
    pub fn none() -> Self {
        CaptureRequest {
            layers: LayerSelect::None,
            hidden: false,
        }
    }

    pub fn last() -> Self {
        CaptureRequest {
            layers: LayerSelect::Last,
            hidden: false,
        }
    }

    pub fn all() -> Self {
        CaptureRequest {
            layers: LayerSelect::All,
            hidden: false,
        }
    }

    pub fn with_hidden(mut self) -> Self {
        self.hidden = true;
        self
    }

    fn wants(&self, layer: usize, num_layers: usize) -> bool {
        match &self.layers {
            LayerSelect::None => false,
            LayerSelect::Last => layer == num_layers,
            LayerSelect::All => true,
            LayerSelect::Only(ls) => ls.contains(&layer),
        }
    }
}

/// Per-head self-attention quantities recorded for one layer.
#[derive(Clone, Debug)]
pub struct LayerCapture<H> {
    /// 1-based layer number.
    pub layer: usize,
    pub queries: Vec<H>,
    pub keys: Vec<H>,
    pub values: Vec<H>,
    /// Row-stochastic |x|×|x| attention distributions, before dropout.
    pub attention: Vec<H>,
    /// Layer output `H^l`, when requested.
    pub hidden: Option<H>,
}

#[derive(Clone, Debug)]
pub struct AttentionCapture<H> {
    pub layers: Vec<LayerCapture<H>>,
}

impl<H> AttentionCapture<H> {
    pub fn layer(&self, layer: usize) -> Option<&LayerCapture<H>> {
        self.layers.iter().find(|c| c.layer == layer)
    }

    pub fn last(&self) -> Option<&LayerCapture<H>> {
        self.layers.iter().max_by_key(|c| c.layer)
    }

    pub fn require(&self, layer: usize) -> Result<&LayerCapture<H>> {
        self.layer(layer)
            .ok_or_else(|| Error::MissingCapture(format!("layer {layer} was not captured")))
    }
}

impl AttentionCapture<Var> {
    /// Copies captured values off the tape.
    pub fn resolve<T: Real>(&self, tape: &Tape<'_, T>) -> AttentionCapture<Tensor<T>> {
        let get = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect();
        AttentionCapture {
            layers: self
                .layers
                .iter()
                .map(|c| LayerCapture {
                    layer: c.layer,
                    queries: get(&c.queries),
                    keys: get(&c.keys),
                    values: get(&c.values),
                    attention: get(&c.attention),
                    hidden: c.hidden.map(|h| tape.value(h).clone()),
                })
                .collect(),
        }
    }
}

/// One input sequence.
#[derive(Clone, Copy, Debug)]
pub struct EncodeInput<'x> {
    pub token_ids: &'x [usize],
    pub segment_ids: &'x [usize],
    /// 1 for real tokens, 0 for padding.
    pub attn_mask: &'x [u8],
}

pub struct Encoded {
    pub hidden: Var,
    pub capture: AttentionCapture<Var>,
}

/// A Transformer with its parameters.
#[derive(Clone, Debug)]
pub struct TransformerModel<T: Real> {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<Tensor<T>>,
}

impl<T: Real> TransformerModel<T> {
    /// Truncated-normal(0, 0.02) weights and embeddings, zero biases, unit
    /// layernorm gains. Deterministic per seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .specs
            .iter()
            .map(|spec| match spec.kind {
                ParamKind::Weight | ParamKind::Embedding => {
                    truncated_normal(&spec.shape, INIT_STD, &mut rng)
                }
                ParamKind::Bias => Tensor::zeros(&spec.shape),
                ParamKind::Norm if spec.name.ends_with("gamma") => {
                    Tensor::full(&spec.shape, T::ONE)
                }
                ParamKind::Norm => Tensor::zeros(&spec.shape),
            })
            .collect();
        Ok(TransformerModel {
            config,
            layout,
            params,
        })
    }

    /// Assembles a model from named tensors, checking them against the layout.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for (spec, p) in layout.specs.iter().zip(&params) {
            if spec.shape != p.shape() {
                return Err(Error::Shape(format!(
                    "{}: expected {:?}, got {:?}",
                    spec.name,
                    spec.shape,
                    p.shape()
                )));
            }
        }
        Ok(TransformerModel {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Tensor<T>> {
        self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.layout
            .specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.params[i])
    }

    pub fn cast<U: Real>(&self) -> TransformerModel<U> {
        TransformerModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Counts allocated values by walking the parameter list.
    pub fn census_by_traversal(&self) -> ParamCensus {
        let mut c = ParamCensus {
            token_embedding: 0,
            other_embedding: 0,
            transformer: 0,
            mlm_head: 0,
        };
        for (spec, p) in self.layout.specs.iter().zip(&self.params) {
            let n = p.numel();
            if spec.name == "embeddings.token" {
                c.token_embedding += n;
            } else if spec.name.starts_with("embeddings.") {
                c.other_embedding += n;
            } else if spec.name.starts_with("layer.") {
                c.transformer += n;
            } else {
                c.mlm_head += n;
            }
        }
        c
    }

    /// Registers every parameter on the tape by reference.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Bound<'a> {
        let vars = self.params.iter().map(|p| tape.param(p)).collect();
        Bound {
            config: &self.config,
            layout: &self.layout,
            vars,
        }
    }

    /// Registers every parameter as a constant (no gradients).
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a, T>) -> Bound<'a> {
        let vars = self.params.iter().map(|p| tape.frozen(p)).collect();
        Bound {
            config: &self.config,
            layout: &self.layout,
            vars,
        }
    }
}

fn truncated_normal<T: Real>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break T::from_f64(z * std);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Model parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct Bound<'a> {
    pub config: &'a ModelConfig,
    pub layout: &'a ParamLayout,
    pub vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    pub fn from_vars(config: &'a ModelConfig, layout: &'a ParamLayout, vars: Vec<Var>) -> Self {
        Bound {
            config,
            layout,
            vars,
        }
    }

    fn v(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    /// Gradients of every parameter after `tape.backward`.
    pub fn grads<T: Real>(&self, tape: &mut Tape<'_, T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| {
                tape.take_grad(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
            })
            .collect()
    }
}

fn validate_input(config: &ModelConfig, input: &EncodeInput<'_>) -> Result<()> {
    let n = input.token_ids.len();
    if n == 0 {
        return Err(Error::EmptySequence(0));
    }
    if n > config.max_seq_len {
        return Err(Error::OutOfRange(format!(
            "sequence of {n} tokens exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    if input.segment_ids.len() != n || input.attn_mask.len() != n {
        return Err(Error::Shape(format!(
            "token ids ({n}), segment ids ({}) and mask ({}) lengths differ",
            input.segment_ids.len(),
            input.attn_mask.len()
        )));
    }
    if let Some(&id) = input.token_ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::OutOfRange(format!(
            "token id {id} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    if let Some(&s) = input.segment_ids.iter().find(|&&s| s >= config.num_segments) {
        return Err(Error::OutOfRange(format!(
            "segment id {s} outside {} segments",
            config.num_segments
        )));
    }
    if input.attn_mask.iter().all(|&m| m == 0) {
        return Err(Error::DegenerateMask { row: 0 });
    }
    Ok(())
}

/// Runs the encoder over one sequence: embeddings, then `L` blocks of
/// `LN(x + MHA(x))` and `LN(x + FFN(x))`. Dropout is applied only when an
/// RNG is supplied.
pub fn encode<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    model: &Bound<'_>,
    input: &EncodeInput<'_>,
    request: &CaptureRequest,
    mut dropout: Option<&mut dyn RngCore>,
) -> Result<Encoded> {
    let config = model.config;
    let layout = model.layout;
    validate_input(config, input)?;
    let n = input.token_ids.len();
    let rate = config.dropout;

    let positions: Vec<usize> = (0..n).collect();
    let tok = tape.embedding(model.v(layout.token), input.token_ids)?;
    let pos = tape.embedding(model.v(layout.position), &positions)?;
    let seg = tape.embedding(model.v(layout.segment), input.segment_ids)?;
    let sum = tape.add(tok, pos)?;
    let sum = tape.add(sum, seg)?;
    let mut h = tape.layernorm(
        sum,
        model.v(layout.emb_ln_g),
        model.v(layout.emb_ln_b),
        LAYERNORM_EPS,
    )?;
    if let Some(rng) = dropout.as_deref_mut() {
        h = tape.dropout(h, rate, rng)?;
    }

    let key_mask: Vec<T> = (0..n * n)
        .map(|i| T::from_f64(f64::from(input.attn_mask[i % n])))
        .collect();
    let key_mask = Tensor::new(vec![n, n], key_mask)?;
    let dk = config.head_dim();
    let inv_sqrt_dk = T::from_f64(1.0 / (dk as f64).sqrt());

    let mut capture = AttentionCapture { layers: Vec::new() };
    for (l, ids) in layout.layers.iter().enumerate() {
        let layer_no = l + 1;
        let q = tape.matmul(h, model.v(ids.q_w))?;
        let q = tape.add_row(q, model.v(ids.q_b))?;
        let k = tape.matmul(h, model.v(ids.k_w))?;
        let k = tape.add_row(k, model.v(ids.k_b))?;
        let v = tape.matmul(h, model.v(ids.v_w))?;
        let v = tape.add_row(v, model.v(ids.v_b))?;

        let mut cap = LayerCapture {
            layer: layer_no,
            queries: Vec::with_capacity(config.heads),
            keys: Vec::with_capacity(config.heads),
            values: Vec::with_capacity(config.heads),
            attention: Vec::with_capacity(config.heads),
            hidden: None,
        };
        let mut contexts = Vec::with_capacity(config.heads);
        for a in 0..config.heads {
            let qa = tape.slice_cols(q, a * dk, (a + 1) * dk)?;
            let ka = tape.slice_cols(k, a * dk, (a + 1) * dk)?;
            let va = tape.slice_cols(v, a * dk, (a + 1) * dk)?;
            let scores = tape.matmul_nt(qa, ka)?;
            let scores = tape.scale(scores, inv_sqrt_dk)?;
            let attn = tape.softmax_rows(scores, Some(&key_mask))?;
            let mixed = match dropout.as_deref_mut() {
                Some(rng) => tape.dropout(attn, rate, rng)?,
                None => attn,
            };
            contexts.push(tape.matmul(mixed, va)?);
            cap.queries.push(qa);
            cap.keys.push(ka);
            cap.values.push(va);
            cap.attention.push(attn);
        }
        let ctx = if contexts.len() == 1 {
            contexts[0]
        } else {
            tape.concat_cols(&contexts)?
        };
        let mut o = tape.matmul(ctx, model.v(ids.o_w))?;
        o = tape.add_row(o, model.v(ids.o_b))?;
        if let Some(rng) = dropout.as_deref_mut() {
            o = tape.dropout(o, rate, rng)?;
        }
        let res = tape.add(h, o)?;
        let h1 = tape.layernorm(
            res,
            model.v(ids.attn_ln_g),
            model.v(ids.attn_ln_b),
            LAYERNORM_EPS,
        )?;

        let f = tape.matmul(h1, model.v(ids.ffn_in_w))?;
        let f = tape.add_row(f, model.v(ids.ffn_in_b))?;
        let f = tape.gelu(f)?;
        let mut f = tape.matmul(f, model.v(ids.ffn_out_w))?;
        f = tape.add_row(f, model.v(ids.ffn_out_b))?;
        if let Some(rng) = dropout.as_deref_mut() {
            f = tape.dropout(f, rate, rng)?;
        }
        let res = tape.add(h1, f)?;
        h = tape.layernorm(
            res,
            model.v(ids.ffn_ln_g),
            model.v(ids.ffn_ln_b),
            LAYERNORM_EPS,
        )?;

        if request.wants(layer_no, config.num_layers) {
            if request.hidden {
                cap.hidden = Some(h);
            }
            capture.layers.push(cap);
        }
    }
    Ok(Encoded { hidden: h, capture })
}

/// MLM logits: dense → GELU → layernorm, then the tied token-embedding
/// decoder plus a per-token bias.
pub fn mlm_logits<T: Real>(tape: &mut Tape<'_, T>, model: &Bound<'_>, hidden: Var) -> Result<Var> {
    let layout = model.layout;
    let shape = tape.shape(hidden);
    if shape.len() != 2 || shape[1] != model.config.hidden {
        return Err(Error::Shape(format!(
            "mlm head expects [n, {}], got {:?}",
            model.config.hidden, shape
        )));
    }
    let t = tape.matmul(hidden, model.v(layout.head_w))?;
    let t = tape.add_row(t, model.v(layout.head_b))?;
    let t = tape.gelu(t)?;
    let t = tape.layernorm(
        t,
        model.v(layout.head_ln_g),
        model.v(layout.head_ln_b),
        LAYERNORM_EPS,
    )?;
    let logits = tape.matmul_nt(t, model.v(layout.token))?;
    tape.add_row(logits, model.v(layout.decoder_b))
}

/// Mean negative log-likelihood of `labels` at `positions`.
pub fn mlm_cross_entropy<T: Real>(
    tape: &mut Tape<'_, T>,
    logits: Var,
    positions: &[usize],
    labels: &[usize],
) -> Result<Var> {
    if positions.is_empty() || positions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} masked positions with {} labels",
            positions.len(),
            labels.len()
        )));
    }
    let rows = tape.select_rows(logits, positions)?;
    let logp = tape.log_softmax_rows(rows)?;
    let idx: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
    let picked = tape.pick(logp, &idx)?;
    let mean = tape.mean(picked)?;
    tape.scale(mean, -T::ONE)
}

/// Number of `positions` whose arg-max logit equals the label.
pub fn count_correct<T: Real>(logits: &Tensor<T>, positions: &[usize], labels: &[usize]) -> usize {
    positions
        .iter()
        .zip(labels)
        .filter(|(&p, &label)| {
            let row = logits.row(p);
            let best = row
                .iter()
                .enumerate()
                .fold((0, row[0]), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            best.0 == label
        })
        .count()
}
