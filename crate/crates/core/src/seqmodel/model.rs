use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numkernel::{seeded, Tape, Tensor, Var};
use crate::seqmodel::attention::{head_on_tape, AttentionHeadParams};
use crate::seqmodel::config::ModelConfig;
use crate::seqmodel::params::{head_param_name, ParamRole, ParamStore};
use crate::seqmodel::window::Window;

/// Floor applied to stored state standard deviations.
const MIN_STATE_STD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadRef {
    pub layer: usize,
    pub head: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Replace this head's output with zeros. The gate is not renormalized.
    pub ablate: Option<HeadRef>,
    pub capture_attention: bool,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// One row per timestep.
    pub actions: Tensor,
    /// Per layer, `tokens x n_heads` gate rows.
    pub gates: Vec<Tensor>,
    /// Per layer and head, the `tokens x tokens` attention matrix; empty
    /// unless requested.
    pub attention: Vec<Vec<Tensor>>,
}

#[derive(Debug, Clone)]
pub struct TapeForward {
    pub actions: Var,
    pub gates: Vec<Var>,
    pub attention: Vec<Vec<Tensor>>,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerSlots {
    ln1: (usize, usize),
    heads: Vec<[usize; 3]>,
    wo: usize,
    bo: usize,
    gate: usize,
    ln2: (usize, usize),
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Slots {
    rtg: (usize, usize),
    state: (usize, usize),
    action: (usize, usize),
    timestep: usize,
    embed_ln: (usize, usize),
    layers: Vec<LayerSlots>,
    final_ln: (usize, usize),
    head: (usize, usize),
    state_mean: usize,
    state_std: usize,
}

/// Decision-transformer policy with per-layer gated attention.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    config: ModelConfig,
    params: ParamStore,
    slots: Slots,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: crate::numkernel::SeedRng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, role: ParamRole, shape: &[usize], std: f64) -> usize {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape matches data");
        self.store.push(name, role, t)
    }

    fn fill(&mut self, name: String, role: ParamRole, shape: &[usize], value: f64) -> usize {
        self.store.push(name, role, Tensor::full(shape, value))
    }

    fn linear(&mut self, prefix: &str, role: ParamRole, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.normal(format!("{prefix}.w"), role, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt());
        let b = self.fill(format!("{prefix}.b"), role, &[fan_out], 0.0);
        (w, b)
    }

    fn norm(&mut self, prefix: &str, role: ParamRole, d: usize) -> (usize, usize) {
        let g = self.fill(format!("{prefix}.gamma"), role, &[d], 1.0);
        let b = self.fill(format!("{prefix}.beta"), role, &[d], 0.0);
        (g, b)
    }
}

impl PolicyModel {
    /// Fresh model. Linear weights are `N(0, 1/fan_in)`, gates start at zero
    /// (uniform mixing), norms at identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let dk = config.d_k();
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: seeded(seed),
        };
        use ParamRole::*;
        let rtg = init.linear("embed.rtg", Embedding, 1, d);
        let state = init.linear("embed.state", Embedding, config.state_dim, d);
        let action = init.linear("embed.action", Embedding, config.action_dim, d);
        let timestep = init.normal("embed.timestep".into(), Embedding, &[config.max_timestep, d], 0.1);
        let embed_ln = init.norm("embed.ln", Embedding, d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let ln1 = init.norm(&format!("layer{l}.ln1"), AttentionNorm, d);
            let std = 1.0 / (d as f64).sqrt();
            let heads = (0..config.n_heads)
                .map(|h| {
                    ["wq", "wk", "wv"].map(|w| init.normal(head_param_name(l, h, w), Attention, &[d, dk], std))
                })
                .collect();
            let wo = init.normal(format!("layer{l}.attn.wo"), Attention, &[d, d], std);
            let bo = init.fill(format!("layer{l}.attn.bo"), Attention, &[d], 0.0);
            let gate = init.fill(format!("layer{l}.gate.w"), Gate, &[d, config.n_heads], 0.0);
            let ln2 = init.norm(&format!("layer{l}.ln2"), FeedForward, d);
            let (w1, b1) = init.linear(&format!("layer{l}.ffn1"), FeedForward, d, config.d_ff);
            let (w2, b2) = init.linear(&format!("layer{l}.ffn2"), FeedForward, config.d_ff, d);
            layers.push(LayerSlots {
                ln1,
                heads,
                wo,
                bo,
                gate,
                ln2,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let final_ln = init.norm("final.ln", FinalNorm, d);
        let head = init.linear("action_head", ActionHead, d, config.action_dim);
        let state_mean = init.fill("norm.state_mean".into(), Buffer, &[config.state_dim], 0.0);
        let state_std = init.fill("norm.state_std".into(), Buffer, &[config.state_dim], 1.0);
        let slots = Slots {
            rtg,
            state,
            action,
            timestep,
            embed_ln,
            layers,
            final_ln,
            head,
            state_mean,
            state_std,
        };
        Ok(PolicyModel {
            config,
            params: store,
            slots,
        })
    }

    /// Rebuilds a model from named tensors. Every slot of the layout implied
    /// by `config` must be present with its exact shape, and nothing else.
    pub fn from_named<'a, I>(config: ModelConfig, tensors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a Tensor)>,
    {
        let mut model = PolicyModel::new(config, 0)?;
        let mut seen = vec![false; model.params.len()];
        for (name, t) in tensors {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::invalid(format!("unexpected tensor {name} for this model layout")))?;
            model.params.set(name, t.clone())?;
            seen[id] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("missing tensor {}", model.params.names()[i])));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_head(&self, layer: usize, head: usize) -> Result<()> {
        if layer >= self.config.n_layers || head >= self.config.n_heads {
            return Err(Error::invalid(format!(
                "head ({layer}, {head}) out of range for {} layers x {} heads",
                self.config.n_layers, self.config.n_heads
            )));
        }
        Ok(())
    }

    pub fn head(&self, layer: usize, head: usize) -> Result<AttentionHeadParams> {
        self.check_head(layer, head)?;
        let [q, k, v] = self.slots.layers[layer].heads[head];
        let t = self.params.tensors();
        Ok(AttentionHeadParams {
            wq: t[q].clone(),
            wk: t[k].clone(),
            wv: t[v].clone(),
        })
    }

    /// Overwrites a head's query and key projections.
    pub fn set_query_key(&mut self, layer: usize, head: usize, wq: Tensor, wk: Tensor) -> Result<()> {
        self.check_head(layer, head)?;
        self.params.set(&head_param_name(layer, head, "wq"), wq)?;
        self.params.set(&head_param_name(layer, head, "wk"), wk)
    }

    pub fn qk_product(&self, layer: usize, head: usize) -> Result<Tensor> {
        self.head(layer, head)?.qk_product()
    }

    pub fn set_state_normalization(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        let sd = self.config.state_dim;
        if mean.len() != sd || std.len() != sd {
            return Err(Error::invalid(format!(
                "normalization statistics have lengths {} and {}, state_dim is {sd}",
                mean.len(),
                std.len()
            )));
        }
        let std: Vec<f64> = std.iter().map(|s| s.max(MIN_STATE_STD)).collect();
        self.params.set("norm.state_mean", Tensor::new(vec![sd], mean.to_vec())?)?;
        self.params.set("norm.state_std", Tensor::new(vec![sd], std)?)
    }

    /// Places every parameter on `tape`. `trainable[i]` selects which get
    /// gradients; buffers never do.
    pub fn bind(&self, tape: &mut Tape, trainable: Option<&[bool]>) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .zip(self.params.roles())
            .enumerate()
            .map(|(i, (t, role))| {
                let rg = *role != ParamRole::Buffer && trainable.is_none_or(|m| m[i]);
                tape.leaf(t.clone(), rg)
            })
            .collect()
    }

    fn bind_constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect()
    }

    fn linear(tape: &mut Tape, vars: &[Var], x: Var, (w, b): (usize, usize)) -> Result<Var> {
        let y = tape.matmul(x, vars[w])?;
        tape.add_row(y, vars[b])
    }

    fn norm(tape: &mut Tape, vars: &[Var], x: Var, (g, b): (usize, usize)) -> Result<Var> {
        tape.layer_norm(x, vars[g], vars[b])
    }

    fn normalized_states(&self, states: &Tensor) -> Result<Tensor> {
        let t = self.params.tensors();
        let mean = t[self.slots.state_mean].data();
        let std = t[self.slots.state_std].data();
        let sd = self.config.state_dim;
        let data = states
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[i % sd]) / std[i % sd])
            .collect();
        Tensor::new(states.shape().to_vec(), data)
    }

    /// Token embeddings in `(R̂₀, s₀, a₀, …)` order, after the embedding norm.
    pub(crate) fn embed_on_tape(&self, tape: &mut Tape, vars: &[Var], window: &Window) -> Result<Var> {
        let cfg = &self.config;
        window.validate(cfg.state_dim, cfg.action_dim)?;
        if window.len() > cfg.context_k {
            return Err(Error::invalid(format!(
                "window of {} timesteps exceeds context_k {}",
                window.len(),
                cfg.context_k
            )));
        }
        if let Some(&ts) = window.timesteps.iter().find(|&&ts| ts >= cfg.max_timestep) {
            return Err(Error::invalid(format!(
                "timestep {ts} outside the embedding table of {}",
                cfg.max_timestep
            )));
        }
        let steps = window.len();
        let na = window.num_actions();

        let rtg = Tensor::new(vec![steps, 1], window.rtg.iter().map(|r| r / cfg.rtg_scale).collect())?;
        let rtg = tape.constant(rtg);
        let rtg = Self::linear(tape, vars, rtg, self.slots.rtg)?;
        let states = tape.constant(self.normalized_states(&window.states)?);
        let states = Self::linear(tape, vars, states, self.slots.state)?;
        let mut blocks = vec![rtg, states];
        if na > 0 {
            let actions = tape.constant(window.actions.clone());
            blocks.push(Self::linear(tape, vars, actions, self.slots.action)?);
        }
        let stacked = tape.concat_rows(&blocks)?;

        let mut order = Vec::with_capacity(window.token_count());
        let mut token_steps = Vec::with_capacity(window.token_count());
        for t in 0..steps {
            order.extend([t, steps + t]);
            token_steps.extend([window.timesteps[t]; 2]);
            if t < na {
                order.push(2 * steps + t);
                token_steps.push(window.timesteps[t]);
            }
        }
        let tokens = tape.gather_rows(stacked, &order)?;
        let time = tape.gather_rows(vars[self.slots.timestep], &token_steps)?;
        let x = tape.add(tokens, time)?;
        Self::norm(tape, vars, x, self.slots.embed_ln)
    }

    /// Gated multi-head attention for one layer on already-normalized input.
    /// Returns the projected output and the gate rows.
    pub(crate) fn moa_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        layer: usize,
        x: Var,
        opts: &ForwardOptions,
        capture: Option<&mut Vec<Tensor>>,
    ) -> Result<(Var, Var)> {
        let slots = &self.slots.layers[layer];
        let n_tokens = tape.value(x).rows();
        if n_tokens > self.config.token_capacity() {
            return Err(Error::invalid(format!(
                "sequence of {n_tokens} tokens exceeds capacity {}",
                self.config.token_capacity()
            )));
        }
        let nh = self.config.n_heads;
        let gate = if self.config.moa_enabled {
            let logits = tape.matmul(x, vars[slots.gate])?;
            tape.softmax_rows(logits)?
        } else {
            tape.constant(Tensor::full(&[n_tokens, nh], 1.0 / nh as f64))
        };
        let mut captured = Vec::new();
        let mut mixed = Vec::with_capacity(nh);
        for (h, &[q, k, v]) in slots.heads.iter().enumerate() {
            let (out, probs) = head_on_tape(tape, x, vars[q], vars[k], vars[v])?;
            if capture.is_some() {
                captured.push(tape.value(probs).clone());
            }
            let out = if opts.ablate == Some(HeadRef { layer, head: h }) {
                tape.constant(Tensor::zeros(tape.value(out).shape()))
            } else {
                out
            };
            let g = tape.column(gate, h)?;
            mixed.push(tape.mul_col(out, g)?);
        }
        if let Some(sink) = capture {
            *sink = captured;
        }
        let cat = tape.concat_cols(&mixed)?;
        let out = Self::linear(tape, vars, cat, (slots.wo, slots.bo))?;
        Ok((out, gate))
    }

    /// Full forward pass recorded on `tape` with parameters bound by [`bind`](Self::bind).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        window: &Window,
        opts: &ForwardOptions,
    ) -> Result<TapeForward> {
        if vars.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "{} bound variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        if let Some(r) = opts.ablate {
            self.check_head(r.layer, r.head)?;
        }
        let mut x = self.embed_on_tape(tape, vars, window)?;
        let mut gates = Vec::with_capacity(self.config.n_layers);
        let mut attention = Vec::new();
        for (l, slots) in self.slots.layers.iter().enumerate() {
            let h = Self::norm(tape, vars, x, slots.ln1)?;
            let mut sink = Vec::new();
            let (attn, gate) =
                self.moa_on_tape(tape, vars, l, h, opts, opts.capture_attention.then_some(&mut sink))?;
            if opts.capture_attention {
                attention.push(sink);
            }
            gates.push(gate);
            x = tape.add(x, attn)?;
            let h = Self::norm(tape, vars, x, slots.ln2)?;
            let f = Self::linear(tape, vars, h, (slots.w1, slots.b1))?;
            let f = tape.gelu(f);
            let f = Self::linear(tape, vars, f, (slots.w2, slots.b2))?;
            x = tape.add(x, f)?;
        }
        let x = Self::norm(tape, vars, x, self.slots.final_ln)?;
        let positions: Vec<usize> = (0..window.len()).map(Window::state_position).collect();
        let picked = tape.gather_rows(x, &positions)?;
        let actions = Self::linear(tape, vars, picked, self.slots.head)?;
        Ok(TapeForward {
            actions,
            gates,
            attention,
        })
    }

    pub fn forward(&self, window: &Window, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape);
        let out = self.forward_on_tape(&mut tape, &vars, window, opts)?;
        Ok(ForwardOutput {
            actions: tape.value(out.actions).clone(),
            gates: out.gates.iter().map(|&g| tape.value(g).clone()).collect(),
            attention: out.attention,
        })
    }

    /// One predicted action per timestep, read at each state token.
    pub fn predict_actions(&self, window: &Window) -> Result<Tensor> {
        Ok(self.forward(window, &ForwardOptions::default())?.actions)
    }

    /// Embedding matrix for a window, `tokens x d_model`.
    pub fn embed_trajectory(&self, window: &Window) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape);
        let x = self.embed_on_tape(&mut tape, &vars, window)?;
        Ok(tape.value(x).clone())
    }

    /// Gated attention of `layer` applied to `e` (already normalized), without
    /// the residual. Returns the projected output and the gate rows.
    pub fn moa_attention_forward(&self, layer: usize, e: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_head(layer, 0)?;
        if e.cols() != self.config.d_model {
            return Err(Error::shape(
                "moa_attention_forward",
                e.shape(),
                &[e.rows(), self.config.d_model],
            ));
        }
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape);
        let x = tape.constant(e.clone());
        let (out, gate) = self.moa_on_tape(&mut tape, &vars, layer, x, &ForwardOptions::default(), None)?;
        Ok((tape.value(out).clone(), tape.value(gate).clone()))
    }
}
