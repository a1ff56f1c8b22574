//! Attention-based encoder-decoder with optional per-task output branches.
//!
//! The encoder is a stack of bidirectional GRU layers. The decoder is a stack
//! of unidirectional GRU layers fed `concat(embedding(y_{i-1}), c_{i-1})`; the
//! output layer reads `concat(s_i, c_i)`. Attention scores are
//! `e_k = v·ReLU(W_s·s + W_h·h_k + b)`.
//!
//! Parameter names follow one scheme in every topology:
//!
//! ```text
//! encoder.l{j}.{fwd,bwd}.{w_r,b_r,w_z,b_z,w_h,b_h}
//! attention.{w_s,w_h,b,v}
//! embedding
//! decoder.b{i}.l{j}.{w_r,b_r,w_z,b_z,w_h,b_h}
//! output.b{i}.{w,b}
//! ```
//!
//! With `SharedAed` only `decoder.b0` exists and every branch reuses it; with
//! `SharedAe` each branch owns a decoder stack.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Parameterized, Precision, Tensor, Var};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
/// Number of reserved ids before the first real symbol.
pub const NUM_SPECIALS: usize = 3;

const INIT_RANGE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    #[default]
    Single,
    /// Encoder, attention and decoder shared; one output layer per branch.
    SharedAed,
    /// Encoder and attention shared; one decoder stack and output layer per branch.
    SharedAe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub encoder_layers: usize,
    /// Per direction.
    pub encoder_hidden: usize,
    pub decoder_layers: usize,
    pub decoder_hidden: usize,
    /// Includes `<pad>`, `<sos>` and `<eos>`.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub attention_dim: usize,
    pub num_branches: usize,
    pub topology: Topology,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            encoder_layers: 1,
            encoder_hidden: 32,
            decoder_layers: 1,
            decoder_hidden: 64,
            vocab_size: 12,
            embed_dim: 32,
            attention_dim: 32,
            num_branches: 1,
            topology: Topology::Single,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// A very small configuration used for gradient and oracle tests.
    pub fn tiny(feature_dim: usize, hidden: usize, vocab_size: usize) -> Self {
        ModelConfig {
            feature_dim,
            encoder_layers: 1,
            encoder_hidden: hidden,
            decoder_layers: 1,
            decoder_hidden: hidden,
            vocab_size,
            embed_dim: hidden,
            attention_dim: hidden,
            num_branches: 1,
            topology: Topology::Single,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("feature_dim", self.feature_dim),
            ("encoder_layers", self.encoder_layers),
            ("encoder_hidden", self.encoder_hidden),
            ("decoder_layers", self.decoder_layers),
            ("decoder_hidden", self.decoder_hidden),
            ("embed_dim", self.embed_dim),
            ("attention_dim", self.attention_dim),
            ("num_branches", self.num_branches),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        if self.vocab_size <= NUM_SPECIALS {
            return Err(Error::config(format!(
                "model.vocab_size must exceed the {NUM_SPECIALS} special tokens"
            )));
        }
        if (self.num_branches == 1) != (self.topology == Topology::Single) {
            return Err(Error::config(format!(
                "model.num_branches = {} is inconsistent with topology {:?}",
                self.num_branches, self.topology
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Width of one encoder output row (both directions).
    pub fn encoder_output_dim(&self) -> usize {
        2 * self.encoder_hidden
    }

    fn decoder_stacks(&self) -> usize {
        match self.topology {
            Topology::SharedAe => self.num_branches,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct GruIds {
    w_r: ParamId,
    b_r: ParamId,
    w_z: ParamId,
    b_z: ParamId,
    w_h: ParamId,
    b_h: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    encoder: Vec<(GruIds, GruIds)>,
    att_w_s: ParamId,
    att_w_h: ParamId,
    att_b: ParamId,
    att_v: ParamId,
    embedding: ParamId,
    decoders: Vec<Vec<GruIds>>,
    outputs: Vec<(ParamId, ParamId)>,
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .find(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
}

fn gru_ids(store: &ParamStore, prefix: &str) -> Result<GruIds> {
    let id = |s: &str| lookup(store, &format!("{prefix}.{s}"));
    Ok(GruIds {
        w_r: id("w_r")?,
        b_r: id("b_r")?,
        w_z: id("w_z")?,
        b_z: id("b_z")?,
        w_h: id("w_h")?,
        b_h: id("b_h")?,
    })
}

impl Layout {
    fn resolve(config: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let encoder = (0..config.encoder_layers)
            .map(|l| {
                Ok((
                    gru_ids(store, &format!("encoder.l{l}.fwd"))?,
                    gru_ids(store, &format!("encoder.l{l}.bwd"))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let decoders = (0..config.decoder_stacks())
            .map(|b| {
                (0..config.decoder_layers)
                    .map(|l| gru_ids(store, &format!("decoder.b{b}.l{l}")))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let outputs = (0..config.num_branches)
            .map(|b| {
                Ok((
                    lookup(store, &format!("output.b{b}.w"))?,
                    lookup(store, &format!("output.b{b}.b"))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Layout {
            encoder,
            att_w_s: lookup(store, "attention.w_s")?,
            att_w_h: lookup(store, "attention.w_h")?,
            att_b: lookup(store, "attention.b")?,
            att_v: lookup(store, "attention.v")?,
            embedding: lookup(store, "embedding")?,
            decoders,
            outputs,
        })
    }
}

/// Expected `(name, shape)` list for a configuration, in storage order.
fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let gru = |prefix: String, hidden: usize, input: usize, out: &mut Vec<(String, Vec<usize>)>| {
        for gate in ["r", "z", "h"] {
            out.push((format!("{prefix}.w_{gate}"), vec![hidden, hidden + input]));
            out.push((format!("{prefix}.b_{gate}"), vec![hidden]));
        }
    };
    let h = config.encoder_hidden;
    for l in 0..config.encoder_layers {
        let input = if l == 0 { config.feature_dim } else { 2 * h };
        gru(format!("encoder.l{l}.fwd"), h, input, &mut out);
        gru(format!("encoder.l{l}.bwd"), h, input, &mut out);
    }
    let (enc, a, hd) = (config.encoder_output_dim(), config.attention_dim, config.decoder_hidden);
    out.push(("attention.w_s".into(), vec![a, hd]));
    out.push(("attention.w_h".into(), vec![enc, a]));
    out.push(("attention.b".into(), vec![a]));
    out.push(("attention.v".into(), vec![a]));
    out.push(("embedding".into(), vec![config.vocab_size, config.embed_dim]));
    for b in 0..config.decoder_stacks() {
        for l in 0..config.decoder_layers {
            let input = if l == 0 { config.embed_dim + enc } else { hd };
            gru(format!("decoder.b{b}.l{l}"), hd, input, &mut out);
        }
    }
    for b in 0..config.num_branches {
        out.push((format!("output.b{b}.w"), vec![config.vocab_size, hd + enc]));
        out.push((format!("output.b{b}.b"), vec![config.vocab_size]));
    }
    out
}

/// Trainable parameters of the encoder-decoder plus its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

impl Parameterized for ModelParams {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl ModelParams {
    /// Fresh single-branch parameters drawn from U(-0.08, 0.08).
    ///
    /// The attention bias starts at zero so the ReLU energies are not all
    /// clamped at initialization.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_uniform(config, seed, INIT_RANGE)
    }

    /// Like [`ModelParams::init`] with weights drawn from U(-range, range).
    pub fn init_uniform(config: &ModelConfig, seed: u64, range: f64) -> Result<Self> {
        if !(range > 0.0) {
            return Err(Error::invalid("init range must be positive"));
        }
        let config = ModelConfig {
            num_branches: 1,
            topology: Topology::Single,
            ..config.clone()
        };
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in param_shapes(&config) {
            let n = shape.iter().product();
            let mut data: Vec<f64> = (0..n).map(|_| rng.gen_range(-range..range)).collect();
            if name == "attention.b" {
                data.fill(0.0);
            }
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        Self::from_store(config, store)
    }

    /// Rebuilds parameters from a named store, checking every expected shape.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config);
        if expected.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this configuration, found {}",
                expected.len(),
                store.len()
            )));
        }
        for (name, shape) in &expected {
            let id = lookup(&store, name)?;
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    store.get(id).shape()
                )));
            }
        }
        let layout = Layout::resolve(&config, &store)?;
        Ok(ModelParams { config, store, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_branches(&self) -> usize {
        self.config.num_branches
    }

    pub fn topology(&self) -> Topology {
        self.config.topology
    }

    pub fn numel(&self) -> usize {
        self.store.numel()
    }

    /// Storage ids backing `branch`'s decoder stack and output layer.
    pub fn branch_params(&self, branch: usize) -> Result<Vec<ParamId>> {
        self.check_branch(branch)?;
        let stack = self.decoder_stack(branch);
        let mut ids: Vec<ParamId> = self.layout.decoders[stack]
            .iter()
            .flat_map(|g| [g.w_r, g.b_r, g.w_z, g.b_z, g.w_h, g.b_h])
            .collect();
        ids.push(self.layout.outputs[branch].0);
        ids.push(self.layout.outputs[branch].1);
        Ok(ids)
    }

    /// Storage ids of the encoder (shared by every branch).
    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.layout
            .encoder
            .iter()
            .flat_map(|(f, b)| [*f, *b])
            .flat_map(|g| [g.w_r, g.b_r, g.w_z, g.b_z, g.w_h, g.b_h])
            .collect()
    }

    fn check_branch(&self, branch: usize) -> Result<()> {
        if branch >= self.config.num_branches {
            return Err(Error::invalid(format!(
                "branch {branch} out of range for {} branch(es)",
                self.config.num_branches
            )));
        }
        Ok(())
    }

    fn decoder_stack(&self, branch: usize) -> usize {
        match self.config.topology {
            Topology::SharedAe => branch,
            _ => 0,
        }
    }

    /// Adds task branches initialized as exact copies of branch 0.
    pub fn add_branches(&self, n: usize, topology: Topology) -> Result<ModelParams> {
        if self.config.topology != Topology::Single {
            return Err(Error::invalid("add_branches needs single-topology parameters"));
        }
        if n < 2 {
            return Err(Error::invalid(format!("add_branches needs n >= 2, got {n}")));
        }
        if topology == Topology::Single {
            return Err(Error::invalid("add_branches needs a multi-task topology"));
        }
        let mut store = self.store.clone();
        let copy_prefixes: Vec<&str> = match topology {
            Topology::SharedAe => vec!["decoder.b0.", "output.b0."],
            _ => vec!["output.b0."],
        };
        let originals: Vec<(String, Tensor)> = self
            .store
            .iter()
            .filter(|(_, name, _)| copy_prefixes.iter().any(|p| name.starts_with(p)))
            .map(|(_, name, t)| (name.to_string(), t.clone()))
            .collect();
        for b in 1..n {
            for (name, t) in &originals {
                let renamed = name.replacen(".b0.", &format!(".b{b}."), 1);
                store.insert(renamed, t.clone())?;
            }
        }
        let config = ModelConfig {
            num_branches: n,
            topology,
            ..self.config.clone()
        };
        // Keep the canonical ordering so checkpoints are layout-stable.
        let mut ordered = ParamStore::new();
        for (name, _) in param_shapes(&config) {
            let id = lookup(&store, &name)?;
            ordered.insert(name, store.get(id).clone())?;
        }
        ModelParams::from_store(config, ordered)
    }

    /// Drops every branch except branch 0 and returns single-topology parameters.
    pub fn strip_branches(&self) -> Result<ModelParams> {
        if self.config.topology == Topology::Single {
            return Ok(self.clone());
        }
        let mut store = self.store.clone();
        store.retain(|name| {
            let mut parts = name.split('.');
            let head = parts.next().unwrap_or_default();
            !((head == "decoder" || head == "output") && parts.next() != Some("b0"))
        });
        let config = ModelConfig {
            num_branches: 1,
            topology: Topology::Single,
            ..self.config.clone()
        };
        ModelParams::from_store(config, store)
    }

    /// Opens an inference session (no gradient recording).
    pub fn session(&self, precision: Precision) -> Session<'_> {
        Session::new(self, precision, false)
    }

    /// Opens a training session: parameters become gradient-requiring leaves.
    pub fn training_session(&self, precision: Precision) -> Session<'_> {
        Session::new(self, precision, true)
    }

    /// Encoder outputs `[K, 2·encoder_hidden]` for a `[K, D]` feature matrix.
    pub fn encode(&self, features: &Tensor) -> Result<Tensor> {
        let mut s = self.session(Precision::F64);
        let enc = s.encode(features)?;
        Ok(s.graph.value(enc.outputs).clone())
    }

    /// Attention context and weights for a decoder state over encoder outputs.
    pub fn attend(&self, decoder_state: &[f64], encoder_outputs: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut s = self.session(Precision::F64);
        let enc = s.encoded_from(encoder_outputs)?;
        let state = s.graph.constant(Tensor::vector(decoder_state.to_vec()));
        let (ctx, w) = s.attend(state, &enc)?;
        Ok((s.graph.value(ctx).data().to_vec(), s.graph.value(w).data().to_vec()))
    }
}

/// Encoder outputs held on a session graph.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[K, H]` encoder states.
    pub outputs: Var,
    /// `[K, A]` precomputed `W_h·h_k + b`.
    keys: Var,
    pub frames: usize,
}

/// Recurrent decoder state: one hidden vector per layer plus the last context.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub hidden: Vec<Var>,
    pub context: Var,
}

/// Forward computation for one model on one graph.
pub struct Session<'a> {
    pub graph: Graph,
    params: &'a ModelParams,
    bound: Bound,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'a> Session<'a> {
    fn new(params: &'a ModelParams, precision: Precision, trainable: bool) -> Self {
        let mut graph = Graph::with_precision(precision);
        let bound = if trainable {
            params.store.bind(&mut graph)
        } else {
            params.store.bind_frozen(&mut graph)
        };
        Session {
            graph,
            params,
            bound,
            dropout: None,
        }
    }

    /// Enables inverted dropout at the configured rate on encoder and decoder outputs.
    pub fn with_dropout(mut self, seed: u64) -> Self {
        let p = self.params.config.dropout;
        if p > 0.0 {
            self.dropout = Some((p, ChaCha8Rng::seed_from_u64(seed)));
        }
        self
    }

    pub fn bound(&self) -> &Bound {
        &self.bound
    }

    pub fn params(&self) -> &'a ModelParams {
        self.params
    }

    fn p(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    fn drop(&mut self, x: Var) -> Result<Var> {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let p = *p;
        let n = self.graph.value(x).len();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        self.graph.mask(x, mask)
    }

    fn gru_step(&mut self, ids: GruIds, h: Var, x: Var) -> Result<Var> {
        let g = &mut self.graph;
        let hx = g.concat(&[h, x])?;
        let r_pre = g.affine(self.bound.var(ids.w_r), hx, self.bound.var(ids.b_r))?;
        let r = g.sigmoid(r_pre);
        let z_pre = g.affine(self.bound.var(ids.w_z), hx, self.bound.var(ids.b_z))?;
        let z = g.sigmoid(z_pre);
        let rh = g.mul(r, h)?;
        let rhx = g.concat(&[rh, x])?;
        let cand_pre = g.affine(self.bound.var(ids.w_h), rhx, self.bound.var(ids.b_h))?;
        let cand = g.tanh(cand_pre);
        // h' = (1 - z)·h + z·h̃ = h + z·(h̃ - h)
        let diff = g.sub(cand, h)?;
        let step = g.mul(z, diff)?;
        g.add(h, step)
    }

    fn zeros(&mut self, n: usize) -> Var {
        self.graph.constant(Tensor::zeros(&[n]))
    }

    /// Runs the bidirectional encoder over a `[K, D]` feature matrix.
    pub fn encode(&mut self, features: &Tensor) -> Result<Encoded> {
        let cfg = &self.params.config;
        let shape = features.shape();
        if shape.len() != 2 || shape[1] != cfg.feature_dim {
            return Err(Error::Shape {
                op: "encode",
                lhs: shape.to_vec(),
                rhs: vec![cfg.feature_dim],
            });
        }
        let k = shape[0];
        let hidden = cfg.encoder_hidden;
        let mut inputs: Vec<Var> = (0..k)
            .map(|t| self.graph.constant(Tensor::vector(features.row(t).to_vec())))
            .collect();
        for layer in self.params.layout.encoder.clone() {
            let mut fwd = Vec::with_capacity(k);
            let mut h = self.zeros(hidden);
            for &x in &inputs {
                h = self.gru_step(layer.0, h, x)?;
                fwd.push(h);
            }
            let mut bwd = vec![h; k];
            let mut h = self.zeros(hidden);
            for t in (0..k).rev() {
                h = self.gru_step(layer.1, h, inputs[t])?;
                bwd[t] = h;
            }
            inputs = Vec::with_capacity(k);
            for t in 0..k {
                let cat = self.graph.concat(&[fwd[t], bwd[t]])?;
                inputs.push(self.drop(cat)?);
            }
        }
        let outputs = self.graph.stack(&inputs)?;
        self.finish_encoded(outputs)
    }

    fn finish_encoded(&mut self, outputs: Var) -> Result<Encoded> {
        let frames = self.graph.value(outputs).shape()[0];
        let w_h = self.p(self.params.layout.att_w_h);
        let b = self.p(self.params.layout.att_b);
        let proj = self.graph.matmul(outputs, w_h)?;
        let keys = self.graph.add(proj, b)?;
        Ok(Encoded { outputs, keys, frames })
    }

    /// Wraps externally supplied encoder outputs for attention.
    pub fn encoded_from(&mut self, outputs: &Tensor) -> Result<Encoded> {
        let want = self.params.config.encoder_output_dim();
        if outputs.shape().len() != 2 || outputs.shape()[1] != want {
            return Err(Error::Shape {
                op: "attend",
                lhs: outputs.shape().to_vec(),
                rhs: vec![want],
            });
        }
        let v = self.graph.constant(outputs.clone());
        self.finish_encoded(v)
    }

    /// Returns `(context [H], weights [K])`.
    pub fn attend(&mut self, state: Var, enc: &Encoded) -> Result<(Var, Var)> {
        let lay = &self.params.layout;
        let (w_s, v) = (self.p(lay.att_w_s), self.p(lay.att_v));
        let g = &mut self.graph;
        let query = g.matmul(w_s, state)?;
        let pre = g.add(enc.keys, query)?;
        let act = g.relu(pre);
        let scores = g.matmul(act, v)?;
        let weights = g.softmax(scores, 1.0)?;
        let context = g.matmul(weights, enc.outputs)?;
        Ok((context, weights))
    }

    pub fn initial_state(&mut self) -> DecoderState {
        let cfg = &self.params.config;
        let (layers, hd, enc) = (cfg.decoder_layers, cfg.decoder_hidden, cfg.encoder_output_dim());
        let hidden = (0..layers).map(|_| self.zeros(hd)).collect();
        let context = self.zeros(enc);
        DecoderState { hidden, context }
    }

    /// One decoder step through `branch`; returns `(log_probs [V], new state)`.
    pub fn decode_step(
        &mut self,
        branch: usize,
        prev_token: usize,
        state: &DecoderState,
        enc: &Encoded,
    ) -> Result<(Var, DecoderState)> {
        self.params.check_branch(branch)?;
        let cfg = &self.params.config;
        if prev_token >= cfg.vocab_size {
            return Err(Error::invalid(format!("token {prev_token} outside vocabulary")));
        }
        let stack = self.params.layout.decoders[self.params.decoder_stack(branch)].clone();
        let emb = self.p(self.params.layout.embedding);
        let e = self.graph.row(emb, prev_token)?;
        let mut x = self.graph.concat(&[e, state.context])?;
        let mut hidden = Vec::with_capacity(stack.len());
        for (ids, &h) in stack.iter().zip(&state.hidden) {
            let h_new = self.gru_step(*ids, h, x)?;
            hidden.push(h_new);
            x = self.drop(h_new)?;
        }
        let (context, _) = self.attend(*hidden.last().expect("decoder has layers"), enc)?;
        let (w_o, b_o) = self.params.layout.outputs[branch];
        let feat = self.graph.concat(&[x, context])?;
        let logits = self.graph.affine(self.p(w_o), feat, self.p(b_o))?;
        let log_probs = self.graph.log_softmax(logits);
        Ok((log_probs, DecoderState { hidden, context }))
    }
}
