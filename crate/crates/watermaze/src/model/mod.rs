//! Decoder-only transformer Q-network, GPT-2 style.
//!
//! Observations are embedded linearly, learned positional rows are added,
//! and a stack of pre-LN decoder blocks with causally masked multi-head
//! self-attention feeds a linear head that emits one Q-value per action at
//! every sequence position. Training evaluates many windows at once by
//! stacking them as row blocks of a single tensor; attention never crosses
//! window boundaries.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{AutogradError, Scalar, Tape, Tensor, Var};
use crate::env::Action;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_actions: usize,
    /// Context capacity; the positional table has this many rows.
    pub max_seq_len: usize,
    pub dropout_p: f64,
    pub obs_dim: usize,
    /// Distance features are multiplied by this before embedding
    /// (1 / maze diameter puts them in [0, 1]); color features pass through.
    pub distance_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            num_layers: 2,
            num_heads: 8,
            ffn_dim: 512,
            num_actions: 4,
            max_seq_len: 45,
            dropout_p: 0.4,
            obs_dim: 24,
            distance_scale: 1.0 / 20.0,
        }
    }
}

impl ModelConfig {
    pub fn with_max_seq_len(max_seq_len: usize) -> Self {
        Self {
            max_seq_len,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: &str| Err(ModelError::InvalidConfig(msg.to_string()));
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail("embed_dim must be divisible by num_heads");
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be at least 1");
        }
        if self.num_actions == 0 {
            return fail("num_actions must be positive");
        }
        if self.obs_dim == 0 || !self.obs_dim.is_multiple_of(2) {
            return fail("obs_dim must be a positive even number (distance, color pairs)");
        }
        if self.num_layers == 0 || self.ffn_dim == 0 {
            return fail("num_layers and ffn_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail("dropout_p must lie in [0, 1)");
        }
        Ok(())
    }

    /// Total learnable scalars, in closed form.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let dk = self.head_dim();
        let h = self.num_heads;
        let f = self.ffn_dim;
        let per_layer = 3 * h * d * dk   // per-head q, k, v projections
            + h * dk * d                 // output projection
            + 4 * d                      // two layer-norm gain/bias pairs
            + d * f + f + f * d + d; // feed-forward weights and biases
        self.obs_dim * d + d             // observation embedding
            + self.max_seq_len * d       // positional table
            + self.num_layers * per_layer
            + 2 * d                      // final layer norm
            + d * self.num_actions + self.num_actions // q head
    }
}

#[derive(Debug)]
pub enum ModelError {
    InvalidConfig(String),
    EmptySequence,
    SequenceTooLong { len: usize, max: usize },
    BadInput(String),
    Autograd(AutogradError),
}

impl std::fmt::Display for ModelError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelError::InvalidConfig(msg) => write!(f, "invalid model config: {msg}"),
            ModelError::EmptySequence => write!(f, "observation sequence is empty"),
            ModelError::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds context capacity {max}")
            }
            ModelError::BadInput(msg) => write!(f, "bad input: {msg}"),
            ModelError::Autograd(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<AutogradError> for ModelError {
    fn from(e: AutogradError) -> Self {
        ModelError::Autograd(e)
    }
}

/// Per-layer weights. Attention projections are stored per head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S> {
    pub wq: Vec<Tensor<S>>,
    pub wk: Vec<Tensor<S>>,
    pub wv: Vec<Tensor<S>>,
    pub wo: Tensor<S>,
    pub ln1_gain: Tensor<S>,
    pub ln1_bias: Tensor<S>,
    pub ln2_gain: Tensor<S>,
    pub ln2_bias: Tensor<S>,
    pub ffn_w1: Tensor<S>,
    pub ffn_b1: Tensor<S>,
    pub ffn_w2: Tensor<S>,
    pub ffn_b2: Tensor<S>,
}

/// All learnable weights of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    pub obs_w: Tensor<S>,
    pub obs_b: Tensor<S>,
    pub pos: Tensor<S>,
    pub layers: Vec<LayerParams<S>>,
    pub final_gain: Tensor<S>,
    pub final_bias: Tensor<S>,
    pub q_w: Tensor<S>,
    pub q_b: Tensor<S>,
}

const INIT_STD: f64 = 0.02;

impl<S: Scalar> ModelParams<S> {
    /// GPT-2 style initialization: normal(0, 0.02) matrices, zero biases,
    /// unit layer-norm gains. The draw order is fixed, so a seed pins every
    /// weight.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let dk = cfg.head_dim();
        let ones = |n: usize| Tensor::from_vec(1, n, vec![S::ONE; n]);

        let obs_w = Tensor::randn(cfg.obs_dim, d, INIT_STD, &mut rng);
        let pos = Tensor::randn(cfg.max_seq_len, d, INIT_STD, &mut rng);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for _ in 0..cfg.num_layers {
            let mut wq = Vec::with_capacity(cfg.num_heads);
            let mut wk = Vec::with_capacity(cfg.num_heads);
            let mut wv = Vec::with_capacity(cfg.num_heads);
            for _ in 0..cfg.num_heads {
                wq.push(Tensor::randn(d, dk, INIT_STD, &mut rng));
                wk.push(Tensor::randn(d, dk, INIT_STD, &mut rng));
                wv.push(Tensor::randn(d, dk, INIT_STD, &mut rng));
            }
            layers.push(LayerParams {
                wq,
                wk,
                wv,
                wo: Tensor::randn(cfg.num_heads * dk, d, INIT_STD, &mut rng),
                ln1_gain: ones(d),
                ln1_bias: Tensor::zeros(1, d),
                ln2_gain: ones(d),
                ln2_bias: Tensor::zeros(1, d),
                ffn_w1: Tensor::randn(d, cfg.ffn_dim, INIT_STD, &mut rng),
                ffn_b1: Tensor::zeros(1, cfg.ffn_dim),
                ffn_w2: Tensor::randn(cfg.ffn_dim, d, INIT_STD, &mut rng),
                ffn_b2: Tensor::zeros(1, d),
            });
        }
        Ok(Self {
            obs_w,
            obs_b: Tensor::zeros(1, d),
            pos,
            layers,
            final_gain: ones(d),
            final_bias: Tensor::zeros(1, d),
            q_w: Tensor::randn(d, cfg.num_actions, INIT_STD, &mut rng),
            q_b: Tensor::zeros(1, cfg.num_actions),
        })
    }

    /// All-zero weights with unit layer-norm gains; a blank slate for tests
    /// and fixtures.
    pub fn zeroed(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut params = Self::init(cfg, 0)?;
        for t in params.tensors_mut() {
            t.fill(S::ZERO);
        }
        let d = cfg.embed_dim;
        params.final_gain = Tensor::from_vec(1, d, vec![S::ONE; d]);
        for layer in &mut params.layers {
            layer.ln1_gain = Tensor::from_vec(1, d, vec![S::ONE; d]);
            layer.ln2_gain = Tensor::from_vec(1, d, vec![S::ONE; d]);
        }
        Ok(params)
    }

    /// Stable (name, tensor) listing; the checkpoint format and the flat
    /// optimizer ordering are both derived from it.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![
            ("obs_embed.w".to_string(), &self.obs_w),
            ("obs_embed.b".to_string(), &self.obs_b),
            ("pos_table".to_string(), &self.pos),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (h, t) in layer.wq.iter().enumerate() {
                out.push((format!("layer{i}.wq{h}"), t));
            }
            for (h, t) in layer.wk.iter().enumerate() {
                out.push((format!("layer{i}.wk{h}"), t));
            }
            for (h, t) in layer.wv.iter().enumerate() {
                out.push((format!("layer{i}.wv{h}"), t));
            }
            out.push((format!("layer{i}.wo"), &layer.wo));
            out.push((format!("layer{i}.ln1.g"), &layer.ln1_gain));
            out.push((format!("layer{i}.ln1.b"), &layer.ln1_bias));
            out.push((format!("layer{i}.ln2.g"), &layer.ln2_gain));
            out.push((format!("layer{i}.ln2.b"), &layer.ln2_bias));
            out.push((format!("layer{i}.ffn.w1"), &layer.ffn_w1));
            out.push((format!("layer{i}.ffn.b1"), &layer.ffn_b1));
            out.push((format!("layer{i}.ffn.w2"), &layer.ffn_w2));
            out.push((format!("layer{i}.ffn.b2"), &layer.ffn_b2));
        }
        out.push(("final_ln.g".to_string(), &self.final_gain));
        out.push(("final_ln.b".to_string(), &self.final_bias));
        out.push(("q_head.w".to_string(), &self.q_w));
        out.push(("q_head.b".to_string(), &self.q_b));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.obs_w, &mut self.obs_b, &mut self.pos];
        for layer in &mut self.layers {
            out.extend(layer.wq.iter_mut());
            out.extend(layer.wk.iter_mut());
            out.extend(layer.wv.iter_mut());
            out.push(&mut layer.wo);
            out.push(&mut layer.ln1_gain);
            out.push(&mut layer.ln1_bias);
            out.push(&mut layer.ln2_gain);
            out.push(&mut layer.ln2_bias);
            out.push(&mut layer.ffn_w1);
            out.push(&mut layer.ffn_b1);
            out.push(&mut layer.ffn_w2);
            out.push(&mut layer.ffn_b2);
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out.push(&mut self.q_w);
        out.push(&mut self.q_b);
        out
    }

    /// Overwrite every tensor from `other` (target-network sync).
    pub fn copy_from(&mut self, other: &Self) {
        let src = other.tensors();
        let mut dst = self.tensors_mut();
        assert_eq!(src.len(), dst.len(), "parameter structure mismatch");
        for (d, s) in dst.iter_mut().zip(src) {
            assert_eq!((d.rows(), d.cols()), (s.rows(), s.cols()));
            d.data_mut().copy_from_slice(s.data());
        }
    }

    /// Bind every tensor onto a tape; the flat var order mirrors `tensors()`.
    pub fn bind<'a>(&'a self, tape: &Tape<'a, S>, trainable: bool) -> BoundParams {
        let bind = |t: &'a Tensor<S>| tape.leaf(t, trainable);
        BoundParams {
            obs_w: bind(&self.obs_w),
            obs_b: bind(&self.obs_b),
            pos: bind(&self.pos),
            layers: self
                .layers
                .iter()
                .map(|l| BoundLayer {
                    wq: l.wq.iter().map(&bind).collect(),
                    wk: l.wk.iter().map(&bind).collect(),
                    wv: l.wv.iter().map(&bind).collect(),
                    wo: bind(&l.wo),
                    ln1_gain: bind(&l.ln1_gain),
                    ln1_bias: bind(&l.ln1_bias),
                    ln2_gain: bind(&l.ln2_gain),
                    ln2_bias: bind(&l.ln2_bias),
                    ffn_w1: bind(&l.ffn_w1),
                    ffn_b1: bind(&l.ffn_b1),
                    ffn_w2: bind(&l.ffn_w2),
                    ffn_b2: bind(&l.ffn_b2),
                })
                .collect(),
            final_gain: bind(&self.final_gain),
            final_bias: bind(&self.final_bias),
            q_w: bind(&self.q_w),
            q_b: bind(&self.q_b),
        }
    }
}

/// Tape handles for one layer's weights.
pub struct BoundLayer {
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

/// Tape handles for the whole parameter set.
pub struct BoundParams {
    pub obs_w: Var,
    pub obs_b: Var,
    pub pos: Var,
    pub layers: Vec<BoundLayer>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub q_w: Var,
    pub q_b: Var,
}

impl BoundParams {
    /// Flat var list in the same order as `ModelParams::tensors()`.
    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.obs_w, self.obs_b, self.pos];
        for layer in &self.layers {
            out.extend_from_slice(&layer.wq);
            out.extend_from_slice(&layer.wk);
            out.extend_from_slice(&layer.wv);
            out.push(layer.wo);
            out.push(layer.ln1_gain);
            out.push(layer.ln1_bias);
            out.push(layer.ln2_gain);
            out.push(layer.ln2_bias);
            out.push(layer.ffn_w1);
            out.push(layer.ffn_b1);
            out.push(layer.ffn_w2);
            out.push(layer.ffn_b2);
        }
        out.push(self.final_gain);
        out.push(self.final_bias);
        out.push(self.q_w);
        out.push(self.q_b);
        out
    }

    /// Inverse of `flat`: reassemble the structure from vars already on a
    /// tape. Lets external tooling (the gradient checker) own the leaves.
    pub fn from_flat(cfg: &ModelConfig, vars: &[Var]) -> Self {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("flat var list too short");
        let obs_w = next();
        let obs_b = next();
        let pos = next();
        let layers = (0..cfg.num_layers)
            .map(|_| BoundLayer {
                wq: (0..cfg.num_heads).map(|_| next()).collect(),
                wk: (0..cfg.num_heads).map(|_| next()).collect(),
                wv: (0..cfg.num_heads).map(|_| next()).collect(),
                wo: next(),
                ln1_gain: next(),
                ln1_bias: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                ffn_w1: next(),
                ffn_b1: next(),
                ffn_w2: next(),
                ffn_b2: next(),
            })
            .collect();
        let out = Self {
            obs_w,
            obs_b,
            pos,
            layers,
            final_gain: next(),
            final_bias: next(),
            q_w: next(),
            q_b: next(),
        };
        assert!(it.next().is_none(), "flat var list too long");
        out
    }
}

/// Scale raw observation rows into model inputs: distance entries (even
/// indices) are multiplied by `distance_scale`, color entries pass through.
pub fn scale_observations<S: Scalar>(cfg: &ModelConfig, obs_flat: &[f64]) -> Tensor<S> {
    assert_eq!(obs_flat.len() % cfg.obs_dim, 0, "ragged observation input");
    let rows = obs_flat.len() / cfg.obs_dim;
    let data = obs_flat
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if i % 2 == 0 {
                S::from_f64(v * cfg.distance_scale)
            } else {
                S::from_f64(v)
            }
        })
        .collect();
    Tensor::from_vec(rows, cfg.obs_dim, data)
}

/// Embed observation rows: scale, apply the learned linear map, and add the
/// positional row for each within-window position.
pub fn embed_observations<'a, S: Scalar>(
    tape: &Tape<'a, S>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    obs_flat: &[f64],
    windows: usize,
) -> Result<Var, ModelError> {
    if obs_flat.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if !obs_flat.len().is_multiple_of(cfg.obs_dim) {
        return Err(ModelError::BadInput(format!(
            "observation length {} is not a multiple of obs_dim {}",
            obs_flat.len(),
            cfg.obs_dim
        )));
    }
    let rows = obs_flat.len() / cfg.obs_dim;
    if windows == 0 || !rows.is_multiple_of(windows) {
        return Err(ModelError::BadInput(format!(
            "{rows} observation rows cannot split into {windows} windows"
        )));
    }
    let seq_len = rows / windows;
    if seq_len > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: seq_len,
            max: cfg.max_seq_len,
        });
    }
    let scaled = tape.leaf_owned(scale_observations::<S>(cfg, obs_flat), false);
    let projected = tape.matmul(scaled, bound.obs_w)?;
    let biased = tape.add_row(projected, bound.obs_b)?;
    Ok(tape.add_positional(biased, bound.pos, seq_len)?)
}

/// Masked multi-head self-attention: per-head projections, fused causal
/// attention over all windows, concatenated heads through the output
/// projection.
pub fn multi_head<'a, S: Scalar>(
    tape: &Tape<'a, S>,
    layer: &BoundLayer,
    x: Var,
    windows: usize,
) -> Result<Var, ModelError> {
    let heads = layer.wq.len();
    let wq = tape.concat_cols(&layer.wq)?;
    let wk = tape.concat_cols(&layer.wk)?;
    let wv = tape.concat_cols(&layer.wv)?;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let attended = tape.attention(q, k, v, windows, heads, true)?;
    Ok(tape.matmul(attended, layer.wo)?)
}

/// One pre-LN decoder block:
/// `x1 = x + dropout(mha(ln(x)))`, `x2 = x1 + dropout(ffn(ln(x1)))`.
pub fn decoder_block<'a, S: Scalar>(
    tape: &Tape<'a, S>,
    layer: &BoundLayer,
    x: Var,
    windows: usize,
    cfg: &ModelConfig,
    dropout_rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var, ModelError> {
    let normed = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias)?;
    let mut attended = multi_head(tape, layer, normed, windows)?;
    if let Some(rng) = dropout_rng {
        attended = tape.dropout(attended, cfg.dropout_p, true, rng)?;
    }
    let x1 = tape.add(x, attended)?;

    let normed2 = tape.layer_norm(x1, layer.ln2_gain, layer.ln2_bias)?;
    let hidden = tape.matmul(normed2, layer.ffn_w1)?;
    let hidden = tape.add_row(hidden, layer.ffn_b1)?;
    let hidden = tape.gelu(hidden);
    let mut ff = tape.matmul(hidden, layer.ffn_w2)?;
    ff = tape.add_row(ff, layer.ffn_b2)?;
    if let Some(rng) = dropout_rng {
        ff = tape.dropout(ff, cfg.dropout_p, true, rng)?;
    }
    Ok(tape.add(x1, ff)?)
}

/// Forward pass over `windows` stacked observation sequences; returns the
/// `[windows * seq_len, num_actions]` Q-value matrix. Pass a dropout RNG for
/// training mode; `None` evaluates deterministically.
pub fn forward_windows<'a, S: Scalar>(
    tape: &Tape<'a, S>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    obs_flat: &[f64],
    windows: usize,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var, ModelError> {
    let mut x = embed_observations(tape, bound, cfg, obs_flat, windows)?;
    for layer in &bound.layers {
        x = decoder_block(tape, layer, x, windows, cfg, &mut dropout_rng)?;
    }
    let x = tape.layer_norm(x, bound.final_gain, bound.final_bias)?;
    let q = tape.matmul(x, bound.q_w)?;
    Ok(tape.add_row(q, bound.q_b)?)
}

/// Single-sequence forward pass (`[seq_len, num_actions]` output).
pub fn forward<'a, S: Scalar>(
    tape: &Tape<'a, S>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    obs_flat: &[f64],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var, ModelError> {
    forward_windows(tape, bound, cfg, obs_flat, 1, dropout_rng)
}

/// Evaluation-mode Q-values for one observation sequence.
pub fn q_values<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    obs_flat: &[f64],
) -> Result<Tensor<S>, ModelError> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let q = forward(&tape, &bound, cfg, obs_flat, None)?;
    Ok(tape.value(q))
}

/// Argmax with ties broken toward the lowest action code.
pub fn greedy_action<S: Scalar>(q_row: &[S]) -> Action {
    let mut best = 0usize;
    for (i, &v) in q_row.iter().enumerate().skip(1) {
        if v > q_row[best] {
            best = i;
        }
    }
    Action::from_code(best as u8).expect("q head emits one value per action")
}

/// Greedy action from the most recent time step of a context of up to
/// `max_seq_len` observations.
pub fn act_greedy<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    context_flat: &[f64],
) -> Result<Action, ModelError> {
    let q = q_values(params, cfg, context_flat)?;
    Ok(greedy_action(q.row(q.rows() - 1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 16,
            num_actions: 4,
            max_seq_len: 5,
            dropout_p: 0.0,
            obs_dim: 6,
            distance_scale: 0.05,
        }
    }

    fn random_obs(rows: usize, obs_dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..rows * obs_dim).map(|_| rng.gen::<f64>() * 10.0).collect()
    }

    #[test]
    fn scaling_touches_distances_only() {
        let cfg = tiny_cfg();
        let obs = vec![10.0, 1.0, 4.0, 0.0, 2.0, 1.0];
        let scaled: Tensor<f64> = scale_observations(&cfg, &obs);
        assert_eq!(
            scaled.data(),
            &[0.5, 1.0, 0.2, 0.0, 0.1, 1.0],
            "even entries scale by 0.05, odd pass through"
        );
        // Halving the scale (doubling the maze) halves distance features.
        let mut wide = cfg.clone();
        wide.distance_scale = 0.025;
        let rescaled: Tensor<f64> = scale_observations(&wide, &obs);
        for k in 0..3 {
            assert_eq!(rescaled.data()[2 * k], scaled.data()[2 * k] / 2.0);
            assert_eq!(rescaled.data()[2 * k + 1], scaled.data()[2 * k + 1]);
        }
    }

    #[test]
    fn embedding_of_zero_observation_is_bias_row() {
        let cfg = tiny_cfg();
        let mut params = ModelParams::<f64>::zeroed(&cfg).unwrap();
        params.obs_b = Tensor::from_vec(1, 8, (1..=8).map(|x| x as f64).collect());
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let embedded = embed_observations(&tape, &bound, &cfg, &[0.0; 6], 1).unwrap();
        let v = tape.value(embedded);
        assert_eq!((v.rows(), v.cols()), (1, 8));
        assert_eq!(v.data(), params.obs_b.data());
    }

    #[test]
    fn forward_output_shape_and_errors() {
        let cfg = tiny_cfg();
        let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let q = forward(&tape, &bound, &cfg, &random_obs(4, 6, 0), None).unwrap();
        assert_eq!(tape.shape(q), (4, 4));

        assert!(matches!(
            forward(&tape, &bound, &cfg, &[], None),
            Err(ModelError::EmptySequence)
        ));
        assert!(matches!(
            forward(&tape, &bound, &cfg, &random_obs(6, 6, 1), None),
            Err(ModelError::SequenceTooLong { len: 6, max: 5 })
        ));
    }

    #[test]
    fn single_head_multi_head_is_attention_plus_projection() {
        let mut cfg = tiny_cfg();
        cfg.num_heads = 1;
        let params = ModelParams::<f64>::init(&cfg, 7).unwrap();
        let obs = random_obs(3, 6, 2);

        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let x = embed_observations(&tape, &bound, &cfg, &obs, 1).unwrap();
        let via_multi_head = multi_head(&tape, &bound.layers[0], x, 1).unwrap();

        let q = tape.matmul(x, bound.layers[0].wq[0]).unwrap();
        let k = tape.matmul(x, bound.layers[0].wk[0]).unwrap();
        let v = tape.matmul(x, bound.layers[0].wv[0]).unwrap();
        let att = tape.attention(q, k, v, 1, 1, true).unwrap();
        let manual = tape.matmul(att, bound.layers[0].wo).unwrap();

        assert_eq!(tape.value(via_multi_head), tape.value(manual));
    }

    #[test]
    fn head_order_permutation_cancels_out() {
        // Swapping head blocks and the matching rows of the output
        // projection leaves multi-head attention unchanged.
        let cfg = tiny_cfg();
        let params = ModelParams::<f64>::init(&cfg, 11).unwrap();
        let mut permuted = params.clone();
        let dk = cfg.head_dim();
        for layer in &mut permuted.layers {
            layer.wq.swap(0, 1);
            layer.wk.swap(0, 1);
            layer.wv.swap(0, 1);
            let mut wo = layer.wo.clone();
            for r in 0..dk {
                for c in 0..cfg.embed_dim {
                    wo.set(r, c, layer.wo.get(r + dk, c));
                    wo.set(r + dk, c, layer.wo.get(r, c));
                }
            }
            layer.wo = wo;
        }
        let obs = random_obs(4, 6, 3);
        let q1 = q_values(&params, &cfg, &obs).unwrap();
        let q2 = q_values(&permuted, &cfg, &obs).unwrap();
        for (a, b) in q1.data().iter().zip(q2.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zeroed_output_projections_make_blocks_identity() {
        let cfg = tiny_cfg();
        let mut params = ModelParams::<f64>::init(&cfg, 5).unwrap();
        for layer in &mut params.layers {
            layer.wo.fill(0.0);
            layer.ffn_w2.fill(0.0);
            layer.ffn_b2.fill(0.0);
        }
        let obs = random_obs(3, 6, 4);
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let x = embed_observations(&tape, &bound, &cfg, &obs, 1).unwrap();
        let mut rng_slot = None;
        let y = decoder_block(&tape, &bound.layers[0], x, 1, &cfg, &mut rng_slot).unwrap();
        assert_eq!(tape.value(x), tape.value(y));
    }

    #[test]
    fn evaluation_forward_is_a_pure_function() {
        let cfg = tiny_cfg();
        let params = ModelParams::<f64>::init(&cfg, 9).unwrap();
        let obs = random_obs(5, 6, 5);
        let a = q_values(&params, &cfg, &obs).unwrap();
        let b = q_values(&params, &cfg, &obs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn causal_mask_blocks_future_observations() {
        let cfg = tiny_cfg();
        let params = ModelParams::<f64>::init(&cfg, 13).unwrap();
        let obs = random_obs(5, 6, 6);
        let base = q_values(&params, &cfg, &obs).unwrap();
        for j in 1..5 {
            let mut perturbed = obs.clone();
            for v in &mut perturbed[j * 6..(j + 1) * 6] {
                *v += 3.21;
            }
            let q = q_values(&params, &cfg, &perturbed).unwrap();
            for t in 0..j {
                for a in 0..4 {
                    assert!(
                        (q.get(t, a) - base.get(t, a)).abs() < 1e-6,
                        "row {t} changed after perturbing row {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn truncated_forward_matches_full_prefix_rows() {
        let cfg = tiny_cfg();
        let params = ModelParams::<f64>::init(&cfg, 17).unwrap();
        let obs = random_obs(5, 6, 7);
        let full = q_values(&params, &cfg, &obs).unwrap();
        for t in 1..=5 {
            let partial = q_values(&params, &cfg, &obs[..t * 6]).unwrap();
            for i in 0..t {
                for a in 0..4 {
                    assert!(
                        (partial.get(i, a) - full.get(i, a)).abs() < 1e-6,
                        "prefix {t}, row {i}"
                    );
                }
            }
        }
    }

    #[test]
    fn stacked_windows_match_separate_forwards() {
        let cfg = tiny_cfg();
        let params = ModelParams::<f64>::init(&cfg, 19).unwrap();
        let w0 = random_obs(4, 6, 8);
        let w1 = random_obs(4, 6, 9);
        let stacked: Vec<f64> = w0.iter().chain(&w1).copied().collect();

        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let q = forward_windows(&tape, &bound, &cfg, &stacked, 2, None).unwrap();
        let batched = tape.value(q);

        let sep0 = q_values(&params, &cfg, &w0).unwrap();
        let sep1 = q_values(&params, &cfg, &w1).unwrap();
        for i in 0..4 {
            for a in 0..4 {
                assert!((batched.get(i, a) - sep0.get(i, a)).abs() < 1e-9);
                assert!((batched.get(4 + i, a) - sep1.get(i, a)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn greedy_action_argmax_and_ties() {
        assert_eq!(greedy_action(&[0.1, 0.9, 0.2, 0.0]), Action::Forward);
        assert_eq!(greedy_action(&[0.5, 0.0, 0.5, 0.0]), Action::NoOp);
        assert_eq!(greedy_action(&[0.0, 0.0, 0.0, 0.0]), Action::NoOp);
    }

    #[test]
    fn act_greedy_reads_last_row_and_ignores_q_shifts() {
        let cfg = tiny_cfg();
        let mut params = ModelParams::<f64>::zeroed(&cfg).unwrap();
        params.q_b = Tensor::from_vec(1, 4, vec![0.1, 0.9, 0.2, 0.0]);
        let obs = random_obs(3, 6, 10);
        assert_eq!(act_greedy(&params, &cfg, &obs).unwrap(), Action::Forward);

        // Adding a constant to every Q-value must not change the choice.
        let mut shifted = params.clone();
        shifted.q_b = Tensor::from_vec(1, 4, vec![5.1, 5.9, 5.2, 5.0]);
        assert_eq!(act_greedy(&shifted, &cfg, &obs).unwrap(), Action::Forward);
    }

    #[test]
    fn params_are_shareable_across_threads_for_evaluation() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<ModelParams<f32>>();
        assert_send_sync::<ModelConfig>();
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let tiny = tiny_cfg();
        let params = ModelParams::<f64>::init(&tiny, 1).unwrap();
        let total: usize = params.tensors().iter().map(|t| t.len()).sum();
        assert_eq!(total, tiny.param_count());

        let default = ModelConfig::default();
        let params = ModelParams::<f32>::init(&default, 1).unwrap();
        let total: usize = params.tensors().iter().map(|t| t.len()).sum();
        assert_eq!(total, default.param_count());
        assert_eq!(default.param_count(), 399_492 + 45 * 128);
    }

    #[test]
    fn full_tiny_transformer_passes_grad_check() {
        use crate::autograd::grad_check;
        let mut cfg = tiny_cfg();
        cfg.max_seq_len = 3;
        let params = ModelParams::<f64>::init(&cfg, 23).unwrap();
        let obs = random_obs(3, 6, 11);
        let inputs: Vec<Tensor<f64>> = params.tensors().into_iter().cloned().collect();

        // Evaluation mode.
        let report = grad_check(&inputs, |tape, vars| {
            let bound = BoundParams::from_flat(&cfg, vars);
            let q = forward(tape, &bound, &cfg, &obs, None).map_err(flatten)?;
            let sq = tape.mul(q, q)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(
            report.passes(1e-4),
            "eval-mode grad check: max rel err {}",
            report.max_rel_err
        );

        // Training mode with a fixed dropout mask.
        let mut drop_cfg = cfg.clone();
        drop_cfg.dropout_p = 0.4;
        let report = grad_check(&inputs, |tape, vars| {
            let bound = BoundParams::from_flat(&drop_cfg, vars);
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let q = forward(tape, &bound, &drop_cfg, &obs, Some(&mut rng)).map_err(flatten)?;
            let sq = tape.mul(q, q)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(
            report.passes(1e-4),
            "train-mode grad check: max rel err {}",
            report.max_rel_err
        );
    }

    fn flatten(e: ModelError) -> AutogradError {
        match e {
            ModelError::Autograd(inner) => inner,
            other => AutogradError::InvalidArgument(other.to_string()),
        }
    }
}
