//! Contrastive autoencoder over observations.
//!
//! The encoder maps an observation to a latent vector; the decoder maps it
//! back. The training objective over a batch `b` is
//!
//! ```text
//! ω1 · Σ_{o ∈ b} ‖o − dec(enc(o))‖² + ω2 · Σ_{pairs in b} L_c
//! ```
//!
//! where pairs are unordered and distinct, and `L_c` is the squared latent
//! distance for same-label pairs and `max(0, α − distance²)` otherwise.
//! With [`ReconReduction::Mean`] (the default) each reconstruction term is
//! divided by the observation length, i.e. a per-entry mean squared error.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gridworld::{AgentState, GridSpec, Observation, SafetyLabel, OBS_CHANNELS};
use crate::nn::{Adam, Network};

/// How the reconstruction term is reduced over observation entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconReduction {
    Sum,
    Mean,
}

impl ReconReduction {
    pub fn name(self) -> &'static str {
        match self {
            ReconReduction::Sum => "sum",
            ReconReduction::Mean => "mean",
        }
    }
}

impl std::str::FromStr for ReconReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sum" => Ok(ReconReduction::Sum),
            "mean" => Ok(ReconReduction::Mean),
            other => Err(Error::parse("recon reduction", format!("unknown reduction `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub margin: f64,
    pub recon_weight: f64,
    pub recon_reduction: ReconReduction,
    pub contrast_weight: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub replay_capacity: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            margin: 10.0,
            recon_weight: 100.0,
            recon_reduction: ReconReduction::Mean,
            contrast_weight: 0.01,
            learning_rate: 2.5e-4,
            batch_size: 64,
            latent_dim: 50,
            hidden_dim: 256,
            replay_capacity: 10_000,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if self.recon_weight < 0.0 || self.contrast_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.batch_size == 0 || self.latent_dim == 0 || self.hidden_dim == 0 || self.replay_capacity == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledObservation {
    pub obs: Observation,
    pub safe: bool,
}

/// Safe iff the state is neither a violation nor undesirable.
pub fn label_observation(spec: &GridSpec, state: &AgentState) -> LabeledObservation {
    LabeledObservation {
        obs: spec.observe(state),
        safe: spec.classify_state(state) == SafetyLabel::Safe,
    }
}

/// Oracle-labelled observations of every reachable live state.
pub fn enumerate_labeled(spec: &GridSpec) -> Vec<LabeledObservation> {
    spec.reachable_states().iter().map(|s| label_observation(spec, s)).collect()
}

/// Labels from experience: uniformly random rollouts, marking a state unsafe
/// once a violation has been observed from it. Returns one entry per distinct
/// visited state in first-visit order.
pub fn experiential_labels(spec: &GridSpec, episodes: usize, seed: u64) -> Vec<LabeledObservation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::new();
    let mut unsafe_seen = vec![false; spec.state_count()];
    let mut visited = vec![false; spec.state_count()];
    for _ in 0..episodes {
        let mut state = spec.start_state();
        loop {
            let idx = spec.index_of(&state);
            if !visited[idx] {
                visited[idx] = true;
                order.push(state);
            }
            let action = crate::gridworld::Action::ALL[rng.random_range(0..3)];
            let t = spec.step(&state, action).expect("live state");
            if t.violated {
                unsafe_seen[idx] = true;
            }
            if t.done() {
                break;
            }
            state = t.next_state;
        }
    }
    order
        .into_iter()
        .map(|s| LabeledObservation {
            obs: spec.observe(&s),
            safe: !unsafe_seen[spec.index_of(&s)],
        })
        .collect()
}

/// Bounded FIFO store of labelled observations.
#[derive(Debug, Clone)]
pub struct LabeledReplayBuffer {
    items: VecDeque<LabeledObservation>,
    capacity: usize,
}

impl LabeledReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        }
    }

    pub fn push(&mut self, item: LabeledObservation) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn extend(&mut self, items: impl IntoIterator<Item = LabeledObservation>) {
        for item in items {
            self.push(item);
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &LabeledObservation {
        &self.items[i]
    }

    /// Uniform sample without replacement.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<&LabeledObservation> {
        sample(rng, self.items.len(), n.min(self.items.len()))
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

/// Encoder `obs → hidden (ReLU) → latent` and mirrored decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub obs_shape: (usize, usize, usize),
    pub encoder: Network,
    pub decoder: Network,
    pub seed: u64,
}

impl EncoderModel {
    pub fn new(height: usize, width: usize, cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs_len = OBS_CHANNELS * height * width;
        let encoder = Network::new(&[obs_len, cfg.hidden_dim, cfg.latent_dim], &mut rng);
        let decoder = Network::new(&[cfg.latent_dim, cfg.hidden_dim, obs_len], &mut rng);
        Self {
            obs_shape: (OBS_CHANNELS, height, width),
            encoder,
            decoder,
            seed,
        }
    }

    pub fn for_grid(spec: &GridSpec, cfg: &EncoderConfig, seed: u64) -> Self {
        Self::new(spec.height, spec.width, cfg, seed)
    }

    pub fn obs_len(&self) -> usize {
        self.obs_shape.0 * self.obs_shape.1 * self.obs_shape.2
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.sizes()[1]
    }

    fn check_obs(&self, obs: &Observation) -> Result<()> {
        if obs.len() != self.obs_len() {
            return Err(Error::Shape {
                expected: self.obs_len(),
                actual: obs.len(),
            });
        }
        Ok(())
    }

    pub fn encode(&self, obs: &Observation) -> Result<Vec<f64>> {
        self.check_obs(obs)?;
        Ok(self.encoder.forward_one(&obs.data))
    }

    pub fn encode_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.encoder.forward(x)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Observation> {
        if z.len() != self.latent_dim() {
            return Err(Error::Shape {
                expected: self.latent_dim(),
                actual: z.len(),
            });
        }
        let (channels, height, width) = self.obs_shape;
        Ok(Observation {
            channels,
            height,
            width,
            data: self.decoder.forward_one(z),
        })
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    /// Parameter `i` of the concatenation encoder ++ decoder.
    pub fn param(&self, i: usize) -> f64 {
        let n = self.encoder.param_count();
        if i < n {
            self.encoder.params[i]
        } else {
            self.decoder.params[i - n]
        }
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        let n = self.encoder.param_count();
        if i < n {
            self.encoder.params[i] = v;
        } else {
            self.decoder.params[i - n] = v;
        }
    }

    /// Binary checkpoint: a text header of `key = value` lines closed by
    /// `end`, then every parameter (encoder then decoder) as little-endian f64.
    pub fn to_checkpoint(&self, cfg: &EncoderConfig, provenance: &[(String, String)]) -> Vec<u8> {
        let (c, h, w) = self.obs_shape;
        let mut header = String::from("# encoder checkpoint\n");
        let mut kv = |k: &str, v: String| header.push_str(&format!("{k} = {v}\n"));
        kv("obs_shape", format!("{c} {h} {w}"));
        kv("hidden_dim", self.hidden_dim().to_string());
        kv("latent_dim", self.latent_dim().to_string());
        kv("seed", self.seed.to_string());
        kv("margin", cfg.margin.to_string());
        kv("recon_weight", cfg.recon_weight.to_string());
        kv("recon_reduction", cfg.recon_reduction.name().to_string());
        kv("contrast_weight", cfg.contrast_weight.to_string());
        kv("learning_rate", cfg.learning_rate.to_string());
        kv("batch_size", cfg.batch_size.to_string());
        kv("params", self.param_count().to_string());
        for (k, v) in provenance {
            kv(k, v.clone());
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for p in self.encoder.params.iter().chain(&self.decoder.params) {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<EncoderModel> {
        let ctx = "encoder checkpoint";
        let marker = b"end\n";
        let split = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| Error::parse(ctx, "missing end of header"))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::parse(ctx, "header is not utf-8"))?;
        let payload = &bytes[split + marker.len()..];
        let mut shape = None;
        let mut hidden = None;
        let mut latent = None;
        let mut seed = 0;
        for line in header.lines().filter(|l| !l.starts_with('#')) {
            let Some((k, v)) = line.split_once('=') else { continue };
            let v = v.trim();
            let num = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(ctx, format!("bad number `{s}`")));
            match k.trim() {
                "obs_shape" => {
                    let dims: Vec<usize> = v.split_whitespace().map(num).collect::<Result<_>>()?;
                    if dims.len() != 3 {
                        return Err(Error::parse(ctx, "obs_shape needs 3 dims"));
                    }
                    shape = Some((dims[0], dims[1], dims[2]));
                }
                "hidden_dim" => hidden = Some(num(v)?),
                "latent_dim" => latent = Some(num(v)?),
                "seed" => seed = v.parse().map_err(|_| Error::parse(ctx, "bad seed"))?,
                _ => {}
            }
        }
        let (c, h, w) = shape.ok_or_else(|| Error::parse(ctx, "missing obs_shape"))?;
        let hidden = hidden.ok_or_else(|| Error::parse(ctx, "missing hidden_dim"))?;
        let latent = latent.ok_or_else(|| Error::parse(ctx, "missing latent_dim"))?;
        let obs_len = c * h * w;
        let values: Vec<f64> = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let enc_sizes = [obs_len, hidden, latent];
        let dec_sizes = [latent, hidden, obs_len];
        let enc_len = Network::zeros(&enc_sizes).param_count();
        let dec_len = Network::zeros(&dec_sizes).param_count();
        if !payload.len().is_multiple_of(8) || values.len() != enc_len + dec_len {
            return Err(Error::parse(ctx, format!("expected {} parameters, found {}", enc_len + dec_len, values.len())));
        }
        Ok(EncoderModel {
            obs_shape: (c, h, w),
            encoder: Network::from_params(&enc_sizes, values[..enc_len].to_vec()).unwrap(),
            decoder: Network::from_params(&dec_sizes, values[enc_len..].to_vec()).unwrap(),
            seed,
        })
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Contrastive term on two latent vectors.
pub fn contrastive_from_latents(z_s: &[f64], z_t: &[f64], same_class: bool, margin: f64) -> f64 {
    let d2 = squared_distance(z_s, z_t);
    if same_class {
        d2
    } else {
        (margin - d2).max(0.0)
    }
}

pub fn contrastive_loss(model: &EncoderModel, o_s: &Observation, o_t: &Observation, same_class: bool, margin: f64) -> Result<f64> {
    Ok(contrastive_from_latents(&model.encode(o_s)?, &model.encode(o_t)?, same_class, margin))
}

pub fn reconstruction_loss(model: &EncoderModel, o: &Observation) -> Result<f64> {
    let recon = model.decode(&model.encode(o)?)?;
    Ok(squared_distance(&o.data, &recon.data))
}

fn stack(batch: &[&LabeledObservation], width: usize) -> Array2<f64> {
    let mut x = Array2::zeros((batch.len(), width));
    for (i, item) in batch.iter().enumerate() {
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&item.obs.data));
    }
    x
}

/// Loss of a batch together with gradients w.r.t. encoder and decoder
/// parameters.
#[derive(Debug, Clone)]
pub struct LossAndGrad {
    pub loss: f64,
    pub recon: f64,
    pub contrast: f64,
    pub encoder_grad: Vec<f64>,
    pub decoder_grad: Vec<f64>,
}

pub fn batch_loss(model: &EncoderModel, batch: &[&LabeledObservation], cfg: &EncoderConfig) -> Result<f64> {
    Ok(batch_loss_and_grad(model, batch, cfg)?.loss)
}

pub fn batch_loss_and_grad(model: &EncoderModel, batch: &[&LabeledObservation], cfg: &EncoderConfig) -> Result<LossAndGrad> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    for item in batch {
        model.check_obs(&item.obs)?;
    }
    let x = stack(batch, model.obs_len());
    let enc_trace = model.encoder.forward_trace(x.view());
    let z = enc_trace.output();
    let dec_trace = model.decoder.forward_trace(z.view());
    let diff = dec_trace.output() - &x;
    let scale = match cfg.recon_reduction {
        ReconReduction::Sum => 1.0,
        ReconReduction::Mean => 1.0 / model.obs_len() as f64,
    };
    let recon: f64 = scale * diff.iter().map(|v| v * v).sum::<f64>();
    let grad_recon = diff.mapv(|v| 2.0 * cfg.recon_weight * scale * v);

    let n = batch.len();
    let mut grad_z = Array2::zeros(z.raw_dim());
    let mut contrast = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let zi = z.row(i);
            let zj = z.row(j);
            let d2: f64 = zi.iter().zip(zj.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            // d L_c / d z_i = coef * (z_i - z_j)
            let coef = if batch[i].safe == batch[j].safe {
                contrast += d2;
                2.0
            } else if d2 < cfg.margin {
                contrast += cfg.margin - d2;
                -2.0
            } else {
                continue;
            };
            let scale = cfg.contrast_weight * coef;
            for k in 0..z.ncols() {
                let g = scale * (z[[i, k]] - z[[j, k]]);
                grad_z[[i, k]] += g;
                grad_z[[j, k]] -= g;
            }
        }
    }

    let (decoder_grad, grad_z_recon) = model.decoder.backward(&dec_trace, grad_recon.view());
    grad_z += &grad_z_recon;
    let (encoder_grad, _) = model.encoder.backward(&enc_trace, grad_z.view());
    Ok(LossAndGrad {
        loss: cfg.recon_weight * recon + cfg.contrast_weight * contrast,
        recon,
        contrast,
        encoder_grad,
        decoder_grad,
    })
}

/// Model plus optimiser state.
#[derive(Debug, Clone)]
pub struct EncoderTrainer {
    pub model: EncoderModel,
    pub cfg: EncoderConfig,
    enc_opt: Adam,
    dec_opt: Adam,
    rng: ChaCha8Rng,
}

impl EncoderTrainer {
    pub fn new(model: EncoderModel, cfg: EncoderConfig, seed: u64) -> Self {
        let enc_opt = Adam::new(model.encoder.param_count(), cfg.learning_rate);
        let dec_opt = Adam::new(model.decoder.param_count(), cfg.learning_rate);
        Self {
            model,
            cfg,
            enc_opt,
            dec_opt,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// One Adam step on a uniformly sampled batch. Returns the batch loss
    /// before the update.
    pub fn train_step(&mut self, buffer: &LabeledReplayBuffer) -> Result<f64> {
        if buffer.len() < self.cfg.batch_size {
            return Err(Error::Config(format!("buffer holds {} items, batch needs {}", buffer.len(), self.cfg.batch_size)));
        }
        let batch = buffer.sample(self.cfg.batch_size, &mut self.rng);
        let lg = batch_loss_and_grad(&self.model, &batch, &self.cfg)?;
        if !lg.loss.is_finite() {
            return Err(Error::NonFinite(format!("encoder loss {} (recon {}, contrast {})", lg.loss, lg.recon, lg.contrast)));
        }
        if lg.encoder_grad.iter().chain(&lg.decoder_grad).any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("encoder gradient".into()));
        }
        self.enc_opt.step(&mut self.model.encoder.params, &lg.encoder_grad);
        self.dec_opt.step(&mut self.model.decoder.params, &lg.decoder_grad);
        Ok(lg.loss)
    }
}

/// Mean pairwise latent distances within and across the safe/unsafe classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Separation {
    pub intra: f64,
    pub inter: f64,
}

impl Separation {
    pub fn ratio(&self) -> f64 {
        self.inter / self.intra
    }
}

pub fn class_separation(z: &[Vec<f64>], safe: &[bool]) -> Separation {
    assert_eq!(z.len(), safe.len());
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..z.len() {
        for j in i + 1..z.len() {
            let d = z[i].iter().zip(&z[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if safe[i] == safe[j] {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    Separation {
        intra: intra / n_intra.max(1) as f64,
        inter: inter / n_inter.max(1) as f64,
    }
}
