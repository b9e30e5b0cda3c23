//! Actor-critic network: per-frame encoder, temporal transformer over the
//! frame stack with a classification token, and two linear heads.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Graph, NeuralError, ParamStore, Result, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const ACTOR_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of one state frame.
    pub d_raw: usize,
    /// Frames per state stack.
    pub stack_len: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub d_out: usize,
    pub n_actions: usize,
    /// Embed each frame with a ReLU layer; otherwise raw frames (zero-padded
    /// to a multiple of `heads`) are the tokens.
    pub use_msce: bool,
    /// Encode the stack with the transformer; otherwise the token matrix is
    /// flattened into a single linear layer.
    pub use_stin: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_raw: 30,
            stack_len: 6,
            d_model: 64,
            layers: 2,
            heads: 4,
            d_ff: 128,
            d_out: 64,
            n_actions: 2,
            use_msce: true,
            use_stin: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(NeuralError::Config(m.to_string()));
        if self.d_raw == 0 || self.stack_len == 0 || self.d_out == 0 || self.n_actions == 0 {
            return err("d_raw, stack_len, d_out and n_actions must be positive");
        }
        if self.use_msce && self.d_model == 0 {
            return err("d_model must be positive");
        }
        if self.use_stin {
            if self.heads == 0 || self.d_ff == 0 {
                return err("heads and d_ff must be positive");
            }
            if self.use_msce && !self.d_model.is_multiple_of(self.heads) {
                return err("d_model must be divisible by heads");
            }
        }
        Ok(())
    }

    /// Width of the tokens entering the temporal encoder.
    pub fn token_width(&self) -> usize {
        if self.use_msce {
            self.d_model
        } else if self.use_stin {
            self.d_raw.div_ceil(self.heads) * self.heads
        } else {
            self.d_raw
        }
    }

    /// Flattened input width of one sample.
    pub fn input_width(&self) -> usize {
        self.stack_len * self.d_raw
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerNorm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderLayer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
struct Stin {
    cls: usize,
    pos: usize,
    layers: Vec<EncoderLayer>,
    ln_f: LayerNorm,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Outputs {
    /// Per-frame embeddings, `(B*K) x D`.
    pub embedded: Var,
    /// Pooled features, `B x D_out`.
    pub features: Var,
    /// Action log-probabilities, `B x A`.
    pub logp: Var,
    /// State values, `B x 1`.
    pub value: Var,
    /// Attention nodes, one per encoder layer.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    cfg: ModelConfig,
    params: ParamStore,
    msce: Option<Linear>,
    stin: Option<Stin>,
    fc: Linear,
    actor: Linear,
    critic: Linear,
}

fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..=a)).collect();
    Tensor::from_vec(fan_in, fan_out, data).expect("sized")
}

fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

impl ActorCritic {
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamStore::new();
        let linear = |p: &mut ParamStore, rng: &mut R, name: &str, i: usize, o: usize| Linear {
            w: p.add(format!("{name}.w"), xavier(rng, i, o)),
            b: p.add(format!("{name}.b"), Tensor::zeros(1, o)),
        };
        let layer_norm = |p: &mut ParamStore, name: &str, d: usize| LayerNorm {
            g: p.add(format!("{name}.g"), Tensor::full(1, d, 1.0)),
            b: p.add(format!("{name}.b"), Tensor::zeros(1, d)),
        };
        let d = cfg.token_width();
        let msce = cfg.use_msce.then(|| linear(&mut p, rng, "msce", cfg.d_raw, d));
        let stin = if cfg.use_stin {
            let cls = p.add("stin.cls", normal(rng, 1, d, 0.02));
            let pos = p.add("stin.pos", normal(rng, cfg.stack_len + 1, d, 0.02));
            let layers = (0..cfg.layers)
                .map(|l| {
                    let n = format!("stin.layer{l}");
                    EncoderLayer {
                        ln1: layer_norm(&mut p, &format!("{n}.ln1"), d),
                        q: linear(&mut p, rng, &format!("{n}.q"), d, d),
                        k: linear(&mut p, rng, &format!("{n}.k"), d, d),
                        v: linear(&mut p, rng, &format!("{n}.v"), d, d),
                        o: linear(&mut p, rng, &format!("{n}.o"), d, d),
                        ln2: layer_norm(&mut p, &format!("{n}.ln2"), d),
                        ff1: linear(&mut p, rng, &format!("{n}.ff1"), d, cfg.d_ff),
                        ff2: linear(&mut p, rng, &format!("{n}.ff2"), cfg.d_ff, d),
                    }
                })
                .collect();
            let ln_f = layer_norm(&mut p, "stin.ln_f", d);
            Some(Stin { cls, pos, layers, ln_f })
        } else {
            None
        };
        let fc_in = if cfg.use_stin { d } else { cfg.stack_len * d };
        let fc = linear(&mut p, rng, "fc", fc_in, cfg.d_out);
        let actor = linear(&mut p, rng, "actor", cfg.d_out, cfg.n_actions);
        // Start the policy close to uniform.
        p.get_mut(actor.w).data_mut().iter_mut().for_each(|w| *w *= ACTOR_INIT_SCALE);
        let critic = linear(&mut p, rng, "critic", cfg.d_out, 1);
        Ok(Self { cfg, params: p, msce, stin, fc, actor, critic })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameter ids belonging to the value head.
    pub fn critic_param_ids(&self) -> [usize; 2] {
        [self.critic.w, self.critic.b]
    }

    /// Replaces all parameter values; names and shapes must match.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        if other.names() != self.params.names() {
            return Err(NeuralError::Checkpoint("parameter names do not match the model".into()));
        }
        for (id, t) in other.values().iter().enumerate() {
            if t.shape() != self.params.get(id).shape() {
                return Err(NeuralError::Checkpoint(format!(
                    "{} has shape {:?}, model expects {:?}",
                    other.name(id),
                    t.shape(),
                    self.params.get(id).shape()
                )));
            }
        }
        self.params = other.clone();
        Ok(())
    }

    fn lin(&self, g: &mut Graph, x: Var, l: &Linear) -> Result<Var> {
        let w = g.param(&self.params, l.w);
        let b = g.param(&self.params, l.b);
        g.linear(x, w, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, l: &LayerNorm) -> Result<Var> {
        let gm = g.param(&self.params, l.g);
        let bt = g.param(&self.params, l.b);
        g.layer_norm(x, gm, bt, LN_EPS)
    }

    /// Per-frame tokens, `(B*K) x token_width`, oldest frame first.
    pub fn embed(&self, g: &mut Graph, frames: Var) -> Result<Var> {
        let (rows, cols) = g.value(frames).shape();
        if cols != self.cfg.d_raw {
            return Err(NeuralError::Shape(format!("frame width {cols}, model expects {}", self.cfg.d_raw)));
        }
        if rows % self.cfg.stack_len != 0 {
            return Err(NeuralError::Shape(format!("{rows} frames do not form stacks of {}", self.cfg.stack_len)));
        }
        match &self.msce {
            Some(l) => {
                let h = self.lin(g, frames, l)?;
                Ok(g.relu(h))
            }
            None if self.cfg.token_width() != cols => g.pad_cols(frames, self.cfg.token_width()),
            None => Ok(frames),
        }
    }

    /// Temporal encoder over `(B*K) x D` tokens; returns the final CLS rows
    /// (`B x D`, layer-normed) and the attention nodes.
    fn encode(&self, g: &mut Graph, tokens: Var, stin: &Stin) -> Result<(Var, Vec<Var>)> {
        let k = self.cfg.stack_len;
        let t = k + 1;
        let heads = self.cfg.heads;
        let cls = g.param(&self.params, stin.cls);
        let mut x = g.prepend_row(tokens, cls, k)?;
        let pos = g.param(&self.params, stin.pos);
        x = g.add_tiled(x, pos)?;
        let mut attention = Vec::with_capacity(stin.layers.len());
        let mut pooled = None;
        for (i, layer) in stin.layers.iter().enumerate() {
            let last = i + 1 == stin.layers.len();
            let h = self.norm(g, x, &layer.ln1)?;
            let kk = self.lin(g, h, &layer.k)?;
            let vv = self.lin(g, h, &layer.v)?;
            // Only the CLS row of the last layer is read downstream.
            let (residual, query_src, tq) = if last {
                (g.select_rows(x, t, 0)?, g.select_rows(h, t, 0)?, 1)
            } else {
                (x, h, t)
            };
            let q = self.lin(g, query_src, &layer.q)?;
            let a = g.attention(q, kk, vv, tq, t, heads)?;
            attention.push(a);
            let a = self.lin(g, a, &layer.o)?;
            let y = g.add(residual, a)?;
            let h2 = self.norm(g, y, &layer.ln2)?;
            let f = self.lin(g, h2, &layer.ff1)?;
            let f = g.relu(f);
            let f = self.lin(g, f, &layer.ff2)?;
            let y = g.add(y, f)?;
            if last {
                pooled = Some(y);
            } else {
                x = y;
            }
        }
        let pooled = match pooled {
            Some(p) => p,
            None => g.select_rows(x, t, 0)?,
        };
        Ok((self.norm(g, pooled, &stin.ln_f)?, attention))
    }

    /// Full forward pass over a `B x (K * d_raw)` batch of flattened stacks.
    pub fn forward(&self, g: &mut Graph, states: &Tensor) -> Result<Outputs> {
        if states.cols() != self.cfg.input_width() {
            return Err(NeuralError::Shape(format!(
                "state width {}, model expects {}",
                states.cols(),
                self.cfg.input_width()
            )));
        }
        let b = states.rows();
        let frames = states.clone().reshaped(b * self.cfg.stack_len, self.cfg.d_raw)?;
        let frames = g.input(frames);
        let embedded = self.embed(g, frames)?;
        let (pooled, attention) = match &self.stin {
            Some(stin) => self.encode(g, embedded, stin)?,
            None => {
                let w = self.cfg.stack_len * self.cfg.token_width();
                (g.reshape(embedded, b, w)?, Vec::new())
            }
        };
        let features = self.lin(g, pooled, &self.fc)?;
        let logits = self.lin(g, features, &self.actor)?;
        let logp = g.log_softmax(logits);
        let value = self.lin(g, features, &self.critic)?;
        Ok(Outputs { embedded, features, logp, value, attention })
    }

    /// Action probabilities and state values without keeping the tape.
    pub fn evaluate(&self, states: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, states)?;
        let lp = g.value(out.logp);
        let probs = (0..lp.rows()).map(|r| lp.row(r).iter().map(|l| l.exp()).collect()).collect();
        Ok((probs, g.value(out.value).data().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(use_msce: bool, use_stin: bool) -> ModelConfig {
        ModelConfig {
            d_raw: 5,
            stack_len: 3,
            d_model: 8,
            layers: 1,
            heads: 2,
            d_ff: 12,
            d_out: 6,
            n_actions: 2,
            use_msce,
            use_stin,
        }
    }

    fn states(rng: &mut ChaCha8Rng, b: usize, cfg: &ModelConfig) -> Tensor {
        let n = b * cfg.input_width();
        Tensor::from_vec(b, cfg.input_width(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shapes_for_every_ablation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (m, s) in [(true, true), (true, false), (false, true), (false, false)] {
            let cfg = small(m, s);
            let net = ActorCritic::new(cfg.clone(), &mut rng).unwrap();
            let x = states(&mut rng, 4, &cfg);
            let mut g = Graph::new();
            let out = net.forward(&mut g, &x).unwrap();
            assert_eq!(g.value(out.embedded).shape(), (12, cfg.token_width()));
            assert_eq!(g.value(out.features).shape(), (4, 6));
            assert_eq!(g.value(out.logp).shape(), (4, 2));
            assert_eq!(g.value(out.value).shape(), (4, 1));
            assert!(g.value(out.logp).is_finite() && g.value(out.value).is_finite());
            assert_eq!(out.attention.len(), usize::from(s));
        }
        assert_eq!(small(false, true).token_width(), 6);
    }

    #[test]
    fn output_width_does_not_depend_on_stack_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3, 6] {
            let cfg = ModelConfig { stack_len: k, ..small(true, true) };
            let net = ActorCritic::new(cfg.clone(), &mut rng).unwrap();
            let mut g = Graph::new();
            let out = net.forward(&mut g, &states(&mut rng, 2, &cfg)).unwrap();
            assert_eq!(g.value(out.features).shape(), (2, 6));
        }
    }

    #[test]
    fn default_stack_embedding_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ModelConfig { d_model: 32, ..ModelConfig::default() };
        let net = ActorCritic::new(cfg.clone(), &mut rng).unwrap();
        let mut g = Graph::new();
        let out = net.forward(&mut g, &states(&mut rng, 1, &cfg)).unwrap();
        assert_eq!(g.value(out.embedded).shape(), (6, 32));
    }

    #[test]
    fn identical_frames_embed_identically_and_permute_with_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small(true, true);
        let net = ActorCritic::new(cfg.clone(), &mut rng).unwrap();
        let frame: Vec<f64> = (0..5).map(|i| i as f64 * 0.3 - 0.5).collect();
        let other: Vec<f64> = (0..5).map(|i| 0.2 - i as f64 * 0.1).collect();
        let run = |frames: Vec<&Vec<f64>>| {
            let mut g = Graph::new();
            let data: Vec<f64> = frames.into_iter().flatten().cloned().collect();
            let out = net.forward(&mut g, &Tensor::from_vec(1, 15, data).unwrap()).unwrap();
            g.value(out.embedded).clone()
        };
        let e = run(vec![&frame, &frame, &other]);
        assert_eq!(e.row(0), e.row(1));
        let p = run(vec![&other, &frame, &frame]);
        assert_eq!(p.row(0), e.row(2));
        assert_eq!(p.row(1), e.row(0));
    }

    #[test]
    fn msce_zero_weights_and_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = small(true, true);
        let mut net = ActorCritic::new(cfg.clone(), &mut rng).unwrap();
        let w = net.params.id_of("msce.w").unwrap();
        let b = net.params.id_of("msce.b").unwrap();
        net.params.get_mut(w).data_mut().fill(0.0);
        let mut g = Graph::new();
        let out = net.forward(&mut g, &states(&mut rng, 2, &cfg)).unwrap();
        assert!(g.value(out.embedded).data().iter().all(|v| *v == 0.0));
        net.params.get_mut(b).data_mut().copy_from_slice(&[-1.0, 2.0, -0.5, 0.0, 3.0, -2.0, 1.0, 0.5]);
        let mut g = Graph::new();
        let out = net.forward(&mut g, &states(&mut rng, 1, &cfg)).unwrap();
        assert_eq!(g.value(out.embedded).row(0), &[0.0, 2.0, 0.0, 0.0, 3.0, 0.0, 1.0, 0.5]);
    }

    #[test]
    fn degenerate_encoder_reduces_to_normalised_cls() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = small(true, true);
        let mut net = ActorCritic::new(cfg.clone(), &mut rng).unwrap();
        for id in 0..net.params.len() {
            let name = net.params.name(id).to_string();
            let inner = [".q.", ".k.", ".v.", ".o.", ".ff1.", ".ff2."];
            if inner.iter().any(|s| name.contains(s)) {
                net.params.get_mut(id).data_mut().fill(0.0);
            }
        }
        let mut g = Graph::new();
        let out = net.forward(&mut g, &states(&mut rng, 2, &cfg)).unwrap();

        // Hand computation: LN(cls + pos_0) with unit scale, then fc.
        let cls = net.params.get(net.params.id_of("stin.cls").unwrap()).data();
        let pos = net.params.get(net.params.id_of("stin.pos").unwrap()).row(0);
        let x: Vec<f64> = cls.iter().zip(pos).map(|(a, b)| a + b).collect();
        let mean = x.iter().sum::<f64>() / 8.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        let xn: Vec<f64> = x.iter().map(|v| (v - mean) / (var + LN_EPS).sqrt()).collect();
        let w = net.params.get(net.params.id_of("fc.w").unwrap());
        let b = net.params.get(net.params.id_of("fc.b").unwrap());
        for r in 0..2 {
            for c in 0..6 {
                let want: f64 = (0..8).map(|i| xn[i] * w.get(i, c)).sum::<f64>() + b.data()[c];
                assert!((g.value(out.features).get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = ModelConfig { layers: 2, ..small(true, true) };
        let net = ActorCritic::new(cfg.clone(), &mut rng).unwrap();
        let mut g = Graph::new();
        let out = net.forward(&mut g, &states(&mut rng, 3, &cfg)).unwrap();
        for a in out.attention {
            for row in g.attention_probs(a).unwrap().chunks(cfg.stack_len + 1) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn policy_head_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = small(true, true);
        let mut net = ActorCritic::new(cfg.clone(), &mut rng).unwrap();
        let x = states(&mut rng, 3, &cfg);
        let (probs, _) = net.evaluate(&x).unwrap();
        for p in &probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // Shift invariance: a shared bias offset leaves the distribution alone.
        let b = net.params.id_of("actor.b").unwrap();
        net.params.get_mut(b).data_mut().iter_mut().for_each(|v| *v += 3.7);
        let (shifted, _) = net.evaluate(&x).unwrap();
        for (p, q) in probs.iter().zip(&shifted) {
            assert!((p[0] - q[0]).abs() < 1e-12);
        }
        // Zero actor weights and bias: uniform.
        let w = net.params.id_of("actor.w").unwrap();
        net.params.get_mut(w).data_mut().fill(0.0);
        net.params.get_mut(b).data_mut().fill(0.0);
        let (uniform, _) = net.evaluate(&x).unwrap();
        assert!(uniform.iter().all(|p| p == &vec![0.5, 0.5]));
    }

    #[test]
    fn critic_zero_weights_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = small(true, true);
        let mut net = ActorCritic::new(cfg.clone(), &mut rng).unwrap();
        let [w, b] = net.critic_param_ids();
        net.params.get_mut(w).data_mut().fill(0.0);
        net.params.get_mut(b).data_mut()[0] = -4.25;
        let (_, v) = net.evaluate(&states(&mut rng, 3, &cfg)).unwrap();
        assert_eq!(v, vec![-4.25; 3]);
    }

    #[test]
    fn wrong_widths_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = small(true, true);
        let net = ActorCritic::new(cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        assert!(net.forward(&mut g, &Tensor::zeros(1, 14)).is_err());
        let bad = ModelConfig { d_model: 9, ..small(true, true) };
        assert!(ActorCritic::new(bad, &mut rng).is_err());
    }
}
