//! Mixture-of-autoencoders clustering.
//!
//! K convolutional autoencoders each reconstruct every image. Their latent
//! codes are concatenated and fed to a small assignment network whose
//! softmax output `p` is the per-sample cluster confidence. Training
//! minimises `θ·r + α·s + γ·b` where
//!
//! * `r = (1/B) Σ_b Σ_k p_bk · MSE(x̂_bk, x_b)` rewards the confident
//!   autoencoder for reconstructing well,
//! * `s = (1/B) Σ_b Σ_k −p_bk ln(p_bk + ε)` pushes rows towards one-hot,
//! * `b = Σ_k p̄_k ln(p̄_k + ε)` with `p̄` the batch-mean confidence keeps
//!   cluster usage balanced.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats;
use crate::metrics::{self, ClusterReport};
use crate::neuralcore::{self, AdamConfig, AdamState, ForwardCache, LayerSpec, Network, Tensor};
use crate::par;
use crate::pipeline::ImageGrid;
use crate::seed;

/// Stabiliser inside the entropy logarithms.
pub const ENTROPY_EPS: f64 = 1e-12;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ATM1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub resolution: usize,
    /// Encoder filter counts; the decoder mirrors them.
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub latent_dim: usize,
    pub lrelu_slope: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            resolution: 128,
            filters: vec![64, 32, 16, 8],
            kernel: 3,
            stride: 2,
            latent_dim: 20,
            lrelu_slope: 0.01,
        }
    }
}

impl AutoencoderConfig {
    /// 32×32 inputs with two stride-2 layers, still ending on an 8×8 grid.
    pub fn desk() -> Self {
        AutoencoderConfig { resolution: 32, filters: vec![16, 8], ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() || self.filters.contains(&0) {
            return Err(Error::contract("autoencoder needs at least one conv layer with >= 1 filter"));
        }
        if self.kernel == 0 || self.stride == 0 || self.latent_dim == 0 {
            return Err(Error::contract("kernel, stride and latent_dim must be >= 1"));
        }
        let scale = self.stride.pow(self.filters.len() as u32);
        if self.resolution == 0 || self.resolution % scale != 0 {
            return Err(Error::contract(format!(
                "resolution {} must be a positive multiple of stride^layers = {scale}",
                self.resolution
            )));
        }
        if !(self.lrelu_slope.is_finite() && self.lrelu_slope >= 0.0) {
            return Err(Error::contract("lrelu_slope must be finite and >= 0"));
        }
        Ok(())
    }

    fn bottleneck(&self) -> (usize, usize) {
        let side = self.resolution / self.stride.pow(self.filters.len() as u32);
        (*self.filters.last().unwrap(), side)
    }

    pub fn encoder_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for f in &self.filters {
            specs.push(LayerSpec::Conv { filters: *f, kernel: self.kernel, stride: self.stride });
            specs.push(LayerSpec::Lrelu { slope: self.lrelu_slope });
        }
        specs.push(LayerSpec::Flatten);
        specs.push(LayerSpec::Dense { units: self.latent_dim });
        specs
    }

    pub fn decoder_specs(&self) -> Vec<LayerSpec> {
        let (c, side) = self.bottleneck();
        let mut specs = vec![
            LayerSpec::Dense { units: c * side * side },
            LayerSpec::Lrelu { slope: self.lrelu_slope },
            LayerSpec::Reshape { shape: vec![c, side, side] },
        ];
        let n = self.filters.len();
        for i in (0..n).rev() {
            let filters = if i == 0 { 1 } else { self.filters[i - 1] };
            specs.push(LayerSpec::Deconv { filters, kernel: self.kernel, stride: self.stride });
            specs.push(if i == 0 { LayerSpec::Sigmoid } else { LayerSpec::Lrelu { slope: self.lrelu_slope } });
        }
        specs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixaeConfig {
    pub k: usize,
    pub autoencoder: AutoencoderConfig,
    /// Hidden width of the assignment network; `None` means `4·k`.
    #[serde(default)]
    pub assign_hidden: Option<usize>,
}

impl MixaeConfig {
    pub fn new(k: usize, autoencoder: AutoencoderConfig) -> Self {
        MixaeConfig { k, autoencoder, assign_hidden: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::contract(format!("k must be >= 2, got {}", self.k)));
        }
        if self.assign_hidden == Some(0) {
            return Err(Error::contract("assign_hidden must be >= 1"));
        }
        self.autoencoder.validate()
    }

    pub fn hidden(&self) -> usize {
        self.assign_hidden.unwrap_or(4 * self.k)
    }

    pub fn assigner_specs(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Dense { units: self.hidden() },
            LayerSpec::Lrelu { slope: self.autoencoder.lrelu_slope },
            LayerSpec::Dense { units: self.k },
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixaeWeights {
    pub theta: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl MixaeWeights {
    /// Optimum reported for clean simulated events.
    pub const SIMULATED_OPTIMUM: MixaeWeights = MixaeWeights { theta: 1e-1, alpha: 1e-2, gamma: 1e5 };
    /// Optimum reported for filtered and full experimental events.
    pub const EXPERIMENTAL_OPTIMUM: MixaeWeights = MixaeWeights { theta: 1e1, alpha: 1e-1, gamma: 3.162e3 };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("theta", self.theta), ("alpha", self.alpha), ("gamma", self.gamma)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::contract(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub sample_entropy: f64,
    pub batch_entropy: f64,
}

impl LossBreakdown {
    pub fn assemble(weights: &MixaeWeights, reconstruction: f64, sample_entropy: f64, batch_entropy: f64) -> Self {
        LossBreakdown {
            total: weights.theta * reconstruction + weights.alpha * sample_entropy + weights.gamma * batch_entropy,
            reconstruction,
            sample_entropy,
            batch_entropy,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixaeModel {
    pub config: MixaeConfig,
    pub encoders: Vec<Network>,
    pub decoders: Vec<Network>,
    pub assigner: Network,
}

impl MixaeModel {
    pub fn new(config: MixaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let ae = &config.autoencoder;
        let input = vec![1, ae.resolution, ae.resolution];
        let mut encoders = Vec::with_capacity(config.k);
        let mut decoders = Vec::with_capacity(config.k);
        for k in 0..config.k as u64 {
            encoders.push(Network::new(
                input.clone(),
                &ae.encoder_specs(),
                seed::derive_seed(seed, "mixae/encoder", &[k]),
            )?);
            decoders.push(Network::new(
                vec![ae.latent_dim],
                &ae.decoder_specs(),
                seed::derive_seed(seed, "mixae/decoder", &[k]),
            )?);
        }
        let assigner = Network::new(
            vec![config.k * ae.latent_dim],
            &config.assigner_specs(),
            seed::derive_seed(seed, "mixae/assigner", &[]),
        )?;
        Ok(MixaeModel { config, encoders, decoders, assigner })
    }

    /// Networks in parameter declaration order: encoder, decoder per
    /// autoencoder, then the assignment network.
    pub fn networks(&self) -> Vec<&Network> {
        let mut nets = Vec::with_capacity(2 * self.config.k + 1);
        for (e, d) in self.encoders.iter().zip(&self.decoders) {
            nets.push(e);
            nets.push(d);
        }
        nets.push(&self.assigner);
        nets
    }

    pub fn networks_mut(&mut self) -> Vec<&mut Network> {
        let mut nets = Vec::with_capacity(2 * self.config.k + 1);
        for (e, d) in self.encoders.iter_mut().zip(self.decoders.iter_mut()) {
            nets.push(e);
            nets.push(d);
        }
        nets.push(&mut self.assigner);
        nets
    }

    pub fn param_count(&self) -> usize {
        self.networks().iter().map(|n| n.param_count()).sum()
    }
}

/// Everything a forward pass produces, including caches for backprop.
#[derive(Clone, Debug)]
pub struct MixaeForward {
    pub reconstructions: Vec<Tensor>,
    pub latents: Vec<Tensor>,
    /// Row-major `batch × k` confidences.
    pub p: Vec<f64>,
    pub k: usize,
    encoder_caches: Vec<ForwardCache>,
    decoder_caches: Vec<ForwardCache>,
    assigner_cache: ForwardCache,
}

impl MixaeForward {
    pub fn batch(&self) -> usize {
        self.p.len() / self.k
    }

    pub fn row(&self, b: usize) -> &[f64] {
        &self.p[b * self.k..(b + 1) * self.k]
    }
}

pub fn images_to_tensor(images: &[ImageGrid]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::contract("image set is empty"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for (i, img) in images.iter().enumerate() {
        if (img.height, img.width) != (h, w) {
            return Err(Error::contract(format!("image {i} is {}x{}, expected {h}x{w}", img.height, img.width)));
        }
        data.extend_from_slice(&img.values);
    }
    Tensor::new(vec![images.len(), 1, h, w], data)
}

pub fn mixae_forward(model: &MixaeModel, batch: &Tensor) -> Result<MixaeForward> {
    if batch.batch() == 0 {
        return Err(Error::contract("mixae batch is empty"));
    }
    let k = model.config.k;
    let b = batch.batch();
    let dim = model.config.autoencoder.latent_dim;
    let mut encoder_caches = Vec::with_capacity(k);
    let mut decoder_caches = Vec::with_capacity(k);
    let mut latents = Vec::with_capacity(k);
    let mut reconstructions = Vec::with_capacity(k);
    for (enc, dec) in model.encoders.iter().zip(&model.decoders) {
        let ec = enc.forward(batch)?;
        let z = ec.output().clone();
        let dc = dec.forward(&z)?;
        reconstructions.push(dc.output().clone());
        latents.push(z);
        encoder_caches.push(ec);
        decoder_caches.push(dc);
    }
    let mut concat = Vec::with_capacity(b * k * dim);
    for s in 0..b {
        for z in &latents {
            concat.extend_from_slice(z.sample(s));
        }
    }
    let assigner_cache = model.assigner.forward(&Tensor::new(vec![b, k * dim], concat)?)?;
    let p = neuralcore::softmax_rows(&assigner_cache.output().data, k);
    Ok(MixaeForward { reconstructions, latents, p, k, encoder_caches, decoder_caches, assigner_cache })
}

fn check_probabilities(p: &[f64], k: usize) -> Result<usize> {
    if k == 0 || p.is_empty() || p.len() % k != 0 {
        return Err(Error::contract(format!("confidence matrix of {} values is not B×{k}", p.len())));
    }
    if let Some(i) = p.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::contract(format!("confidence {i} is negative or not finite")));
    }
    Ok(p.len() / k)
}

/// Mean per-sample entropy of the rows of `p` (`B × k`).
pub fn sample_entropy(p: &[f64], k: usize) -> Result<f64> {
    let b = check_probabilities(p, k)?;
    let sum: f64 = p.iter().map(|v| -v * (v + ENTROPY_EPS).ln()).sum();
    Ok(sum / b as f64)
}

/// Negative entropy of the batch-mean confidence vector.
pub fn batch_entropy(p: &[f64], k: usize) -> Result<f64> {
    let b = check_probabilities(p, k)?;
    Ok(column_means(p, k, b).iter().map(|m| m * (m + ENTROPY_EPS).ln()).sum())
}

fn column_means(p: &[f64], k: usize, b: usize) -> Vec<f64> {
    let mut means = vec![0.0; k];
    for row in p.chunks_exact(k) {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= b as f64);
    means
}

/// Per-sample, per-autoencoder mean squared reconstruction error (`B × k`).
fn reconstruction_errors(fwd: &MixaeForward, batch: &Tensor) -> Result<Vec<f64>> {
    let b = fwd.batch();
    let mut errors = vec![0.0; b * fwd.k];
    for (k, recon) in fwd.reconstructions.iter().enumerate() {
        if recon.shape != batch.shape {
            return Err(Error::contract(format!(
                "reconstruction shape {:?} does not match batch {:?}",
                recon.shape, batch.shape
            )));
        }
        let n = batch.sample_len() as f64;
        for s in 0..b {
            let sq: f64 = recon.sample(s).iter().zip(batch.sample(s)).map(|(a, x)| (a - x) * (a - x)).sum();
            errors[s * fwd.k + k] = sq / n;
        }
    }
    Ok(errors)
}

pub fn mixae_loss(fwd: &MixaeForward, batch: &Tensor, weights: &MixaeWeights) -> Result<LossBreakdown> {
    let errors = reconstruction_errors(fwd, batch)?;
    let b = fwd.batch() as f64;
    let r = errors.iter().zip(&fwd.p).map(|(e, p)| e * p).sum::<f64>() / b;
    let s = sample_entropy(&fwd.p, fwd.k)?;
    let be = batch_entropy(&fwd.p, fwd.k)?;
    Ok(LossBreakdown::assemble(weights, r, s, be))
}

/// Loss and its gradient with respect to every parameter, one flat vector
/// per network in [`MixaeModel::networks`] order.
pub fn mixae_loss_and_grads(
    model: &MixaeModel,
    batch: &Tensor,
    weights: &MixaeWeights,
) -> Result<(LossBreakdown, Vec<Vec<f64>>, MixaeForward)> {
    let fwd = mixae_forward(model, batch)?;
    let loss = mixae_loss(&fwd, batch, weights)?;
    let k = fwd.k;
    let b = fwd.batch();
    let bf = b as f64;
    let errors = reconstruction_errors(&fwd, batch)?;
    let means = column_means(&fwd.p, k, b);

    let mut grad_p = vec![0.0; b * k];
    for s in 0..b {
        for j in 0..k {
            let i = s * k + j;
            let p = fwd.p[i];
            let m = means[j];
            grad_p[i] = (weights.theta * errors[i] - weights.alpha * ((p + ENTROPY_EPS).ln() + p / (p + ENTROPY_EPS))
                + weights.gamma * ((m + ENTROPY_EPS).ln() + m / (m + ENTROPY_EPS)))
                / bf;
        }
    }
    let grad_logits = neuralcore::softmax_backward(&fwd.p, &grad_p, k);
    let assigner_out = fwd.assigner_cache.output().shape.clone();
    let (assigner_grads, grad_concat) =
        model.assigner.backward(&fwd.assigner_cache, &Tensor::new(assigner_out, grad_logits)?)?;

    let dim = model.config.autoencoder.latent_dim;
    let pixels = batch.sample_len() as f64;
    let mut grads = Vec::with_capacity(2 * k + 1);
    for j in 0..k {
        let recon = &fwd.reconstructions[j];
        let mut grad_recon = Tensor::zeros(recon.shape.clone());
        for s in 0..b {
            let scale = weights.theta * fwd.p[s * k + j] * 2.0 / (bf * pixels);
            for ((g, a), x) in grad_recon.sample_mut(s).iter_mut().zip(recon.sample(s)).zip(batch.sample(s)) {
                *g = scale * (a - x);
            }
        }
        let (dec_grads, mut grad_z) = model.decoders[j].backward(&fwd.decoder_caches[j], &grad_recon)?;
        for s in 0..b {
            let from_assigner = &grad_concat.sample(s)[j * dim..(j + 1) * dim];
            for (g, a) in grad_z.sample_mut(s).iter_mut().zip(from_assigner) {
                *g += a;
            }
        }
        let (enc_grads, _) = model.encoders[j].backward(&fwd.encoder_caches[j], &grad_z)?;
        grads.push(enc_grads);
        grads.push(dec_grads);
    }
    grads.push(assigner_grads);
    Ok((loss, grads, fwd))
}

/// Arg-max cluster per row; ties go to the lowest index.
pub fn argmax_rows(p: &[f64], k: usize) -> Vec<usize> {
    p.chunks_exact(k)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best }))
        .collect()
}

const EVAL_CHUNK: usize = 256;

/// Confidences for every image, evaluated in fixed-size chunks.
pub fn confidences(model: &MixaeModel, images: &Tensor) -> Result<Vec<f64>> {
    let n = images.batch();
    let mut p = Vec::with_capacity(n * model.config.k);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        p.extend(mixae_forward(model, &images.gather(&idx))?.p);
    }
    Ok(p)
}

pub fn assign_clusters(model: &MixaeModel, images: &[ImageGrid]) -> Result<Vec<usize>> {
    let tensor = images_to_tensor(images)?;
    Ok(argmax_rows(&confidences(model, &tensor)?, model.config.k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Share of events held out from training and used for monitoring.
    pub holdout_fraction: f64,
    pub collapse_share: f64,
    pub collapse_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 100,
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            holdout_fraction: 0.25,
            collapse_share: 0.99,
            collapse_epochs: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::contract("holdout_fraction must lie in [0, 1)"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::contract("clip_norm must be > 0"));
            }
        }
        self.adam.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Diverged,
    Collapsed,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Ok => "ok",
            RunStatus::Diverged => "diverged",
            RunStatus::Collapsed => "collapsed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub r: f64,
    pub s: f64,
    pub b: f64,
    pub total: f64,
    pub ari: Option<f64>,
    pub acc: Option<f64>,
    /// Share of monitored events in the most populated cluster.
    #[serde(skip)]
    pub largest_share: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Last model whose epoch finished with a finite loss.
    pub model: MixaeModel,
    pub history: Vec<EpochRecord>,
    pub status: RunStatus,
    pub seed: u64,
    pub steps: u64,
    /// Optimiser steps whose gradient norm exceeded the clip.
    pub clipped_steps: u64,
    pub train_ids: Vec<usize>,
    pub holdout_ids: Vec<usize>,
    /// Evaluation of the final model on every labelled event.
    pub report: Option<ClusterReport>,
    pub message: Option<String>,
}

/// Seeded split into (train, holdout) index lists, each sorted.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng_for(seed, "mixae/split", &[]));
    let n_hold = ((fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    let mut hold = idx[..n_hold].to_vec();
    let mut train = idx[n_hold..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    (train, hold)
}

fn evaluate_labelled(pred: &[usize], ids: &[usize], labels: &[Option<usize>]) -> Result<Option<ClusterReport>> {
    let pairs: Vec<(usize, usize)> = ids.iter().zip(pred).filter_map(|(i, p)| labels[*i].map(|t| (t, *p))).collect();
    if pairs.len() < 2 {
        return Ok(None);
    }
    let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
    metrics::evaluate(&truth, &pred).map(Some)
}

fn is_numeric_failure(e: &Error) -> bool {
    matches!(e.root(), Error::NumericDomain(_))
}

/// Trains a fresh model. Labels, when given, are used only to score the
/// held-out events after each epoch and the final model; they never enter
/// the loss.
pub fn train_mixae(
    images: &[ImageGrid],
    labels: Option<&[Option<usize>]>,
    config: &MixaeConfig,
    weights: &MixaeWeights,
    train: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    weights.validate()?;
    train.validate()?;
    let res = config.autoencoder.resolution;
    if let Some(img) = images.iter().find(|i| (i.height, i.width) != (res, res)) {
        return Err(Error::contract(format!("model expects {res}x{res} images, got {}x{}", img.height, img.width)));
    }
    if let Some(l) = labels {
        if l.len() != images.len() {
            return Err(Error::contract(format!("{} labels for {} images", l.len(), images.len())));
        }
    }
    let data = images_to_tensor(images)?;
    let (train_ids, holdout_ids) = holdout_split(images.len(), train.holdout_fraction, seed);
    let monitor_ids = if holdout_ids.is_empty() { &train_ids } else { &holdout_ids };
    let monitor = data.gather(monitor_ids);

    let mut model = MixaeModel::new(config.clone(), seed)?;
    let mut states: Vec<AdamState> = model.networks().iter().map(|n| AdamState::new(n.param_count())).collect();
    let mut history = Vec::with_capacity(train.epochs);
    let mut status = RunStatus::Ok;
    let mut message = None;
    let mut collapsed_streak = 0;
    let mut steps = 0u64;
    let mut clipped_steps = 0u64;

    'epochs: for epoch in 0..train.epochs {
        let snapshot = model.clone();
        let mut order = train_ids.clone();
        order.shuffle(&mut seed::rng_for(seed, "mixae/epoch", &[epoch as u64]));
        let (mut r, mut s, mut b, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(train.batch_size) {
            let batch = data.gather(chunk);
            let step = mixae_loss_and_grads(&model, &batch, weights);
            let (loss, mut grads) = match step {
                Ok((loss, grads, _)) if loss.total.is_finite() && grads.iter().flatten().all(|g| g.is_finite()) => {
                    (loss, grads)
                }
                Ok(_) => {
                    message = Some(format!("non-finite loss or gradient in epoch {epoch}"));
                    model = snapshot;
                    status = RunStatus::Diverged;
                    break 'epochs;
                }
                Err(e) if is_numeric_failure(&e) => {
                    message = Some(format!("epoch {epoch}: {e}"));
                    model = snapshot;
                    status = RunStatus::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if let Some(max) = train.clip_norm {
                let mut blocks: Vec<&mut Vec<f64>> = grads.iter_mut().collect();
                if neuralcore::clip_global_norm(&mut blocks, max) > max {
                    clipped_steps += 1;
                }
            }
            for ((net, g), st) in model.networks_mut().into_iter().zip(&grads).zip(states.iter_mut()) {
                neuralcore::adam_update(net.params_mut(), g, st, &train.adam)?;
            }
            steps += 1;
            r += loss.reconstruction;
            s += loss.sample_entropy;
            b += loss.batch_entropy;
            batches += 1;
        }
        let n = batches as f64;
        let epoch_loss = LossBreakdown::assemble(weights, r / n, s / n, b / n);

        let pred = match confidences(&model, &monitor) {
            Ok(p) => argmax_rows(&p, config.k),
            Err(e) if is_numeric_failure(&e) => {
                message = Some(format!("epoch {epoch}: {e}"));
                model = snapshot;
                status = RunStatus::Diverged;
                break 'epochs;
            }
            Err(e) => return Err(e),
        };
        let mut counts = vec![0usize; config.k];
        pred.iter().for_each(|c| counts[*c] += 1);
        let largest_share = *counts.iter().max().unwrap() as f64 / pred.len() as f64;
        let scored = match labels {
            Some(l) => evaluate_labelled(&pred, monitor_ids, l)?,
            None => None,
        };
        history.push(EpochRecord {
            epoch,
            r: epoch_loss.reconstruction,
            s: epoch_loss.sample_entropy,
            b: epoch_loss.batch_entropy,
            total: epoch_loss.total,
            ari: scored.as_ref().map(|rep| rep.ari),
            acc: scored.as_ref().map(|rep| rep.accuracy),
            largest_share,
        });
        if largest_share > train.collapse_share {
            collapsed_streak += 1;
            if collapsed_streak >= train.collapse_epochs && status == RunStatus::Ok {
                status = RunStatus::Collapsed;
                message = Some(format!(
                    "one cluster held more than {} of assignments for {} consecutive epochs (through epoch {epoch})",
                    train.collapse_share, train.collapse_epochs
                ));
            }
        } else {
            collapsed_streak = 0;
        }
    }

    let report = match labels {
        Some(l) => {
            let all: Vec<usize> = (0..images.len()).collect();
            let pred = argmax_rows(&confidences(&model, &data)?, config.k);
            evaluate_labelled(&pred, &all, l)?
        }
        None => None,
    };
    Ok(TrainOutcome { model, history, status, seed, steps, clipped_steps, train_ids, holdout_ids, report, message })
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: MixaeConfig,
    seed: u64,
    steps: u64,
    param_counts: Vec<usize>,
}

/// `ATM1`, a u32 little-endian header length, the JSON header, then every
/// parameter as little-endian f32 in declaration order.
pub fn encode_checkpoint(model: &MixaeModel, seed: u64, steps: u64) -> Result<Vec<u8>> {
    let nets = model.networks();
    let header = CheckpointHeader {
        config: model.config.clone(),
        seed,
        steps,
        param_counts: nets.iter().map(|n| n.param_count()).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::contract(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * model.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for net in nets {
        for v in net.params() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Inverse of [`encode_checkpoint`]; returns the model, seed and step count.
pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<(MixaeModel, u64, u64)> {
    if bytes.len() < 8 {
        return Err(Error::Truncated { path: path.to_path_buf(), expected: 8, actual: bytes.len() as u64 });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_end = 8 + len;
    if bytes.len() < header_end {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header_end as u64,
            actual: bytes.len() as u64,
        });
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| Error::parse(path, e.to_string()))?;
    let mut model = MixaeModel::new(header.config, 0).map_err(|e| Error::parse(path, e.to_string()))?;
    let counts: Vec<usize> = model.networks().iter().map(|n| n.param_count()).collect();
    if counts != header.param_counts {
        return Err(Error::parse(path, "parameter counts do not match the architecture"));
    }
    let expected = header_end + 4 * counts.iter().sum::<usize>();
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    let mut offset = header_end;
    let mut index = 0;
    for net in model.networks_mut() {
        for p in net.params_mut() {
            let v = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFinite { path: path.to_path_buf(), index });
            }
            *p = v as f64;
            offset += 4;
            index += 1;
        }
    }
    Ok((model, header.seed, header.steps))
}

pub fn load_checkpoint(path: &Path) -> Result<(MixaeModel, u64, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunInfo {
    pub status: RunStatus,
    pub seed: u64,
    pub config: MixaeConfig,
    pub weights: MixaeWeights,
    pub train: TrainConfig,
    pub steps: u64,
    pub clipped_steps: u64,
    pub epochs_completed: usize,
    pub n_train: usize,
    pub n_holdout: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<ClusterReport>,
}

pub fn run_info(outcome: &TrainOutcome, weights: &MixaeWeights, train: &TrainConfig) -> RunInfo {
    RunInfo {
        status: outcome.status,
        seed: outcome.seed,
        config: outcome.model.config.clone(),
        weights: *weights,
        train: train.clone(),
        steps: outcome.steps,
        clipped_steps: outcome.clipped_steps,
        epochs_completed: outcome.history.len(),
        n_train: outcome.train_ids.len(),
        n_holdout: outcome.holdout_ids.len(),
        message: outcome.message.clone(),
        report: outcome.report.clone(),
    }
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    for rec in history {
        w.serialize(rec).map_err(|e| Error::parse(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| Error::parse(path, e.to_string()))).collect()
}

/// Writes `checkpoint.atm`, `history.csv` and `run.json` into `dir`.
pub fn write_run_dir(dir: &Path, outcome: &TrainOutcome, weights: &MixaeWeights, train: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ckpt = dir.join("checkpoint.atm");
    let bytes = encode_checkpoint(&outcome.model, outcome.seed, outcome.steps)?;
    fs::write(&ckpt, bytes).map_err(|e| Error::io(&ckpt, e))?;
    write_history(&dir.join("history.csv"), &outcome.history)?;
    formats::write_json(&dir.join("run.json"), &run_info(outcome, weights, train))
}

/// Base-10 exponents `lower, …, upper` in `steps` evenly spaced values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentRange {
    pub lower: f64,
    pub upper: f64,
    pub steps: usize,
}

impl ExponentRange {
    pub fn new(lower: f64, upper: f64, steps: usize) -> Self {
        ExponentRange { lower, upper, steps }
    }

    pub fn single(exponent: f64) -> Self {
        ExponentRange::new(exponent, exponent, 1)
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite()) || self.lower > self.upper {
            return Err(Error::contract(format!("{name}: need finite lower <= upper")));
        }
        if self.steps == 0 || (self.steps == 1 && self.lower != self.upper) {
            return Err(Error::contract(format!("{name}: steps must be >= 1, and 1 only when lower == upper")));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![10f64.powf(self.lower)];
        }
        let step = (self.upper - self.lower) / (self.steps - 1) as f64;
        (0..self.steps).map(|i| 10f64.powf(self.lower + step * i as f64)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchSpec {
    pub theta: ExponentRange,
    pub alpha: ExponentRange,
    pub gamma: ExponentRange,
}

impl GridSearchSpec {
    /// Whole decades: θ ∈ 10^{-1..5}, α ∈ 10^{-5..-1}, γ ∈ 10^{3..5}.
    pub fn decades() -> Self {
        GridSearchSpec {
            theta: ExponentRange::new(-1.0, 5.0, 7),
            alpha: ExponentRange::new(-5.0, -1.0, 5),
            gamma: ExponentRange::new(3.0, 5.0, 3),
        }
    }

    pub fn single(weights: &MixaeWeights) -> Self {
        GridSearchSpec {
            theta: ExponentRange::single(weights.theta.log10()),
            alpha: ExponentRange::single(weights.alpha.log10()),
            gamma: ExponentRange::single(weights.gamma.log10()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.theta.validate("theta")?;
        self.alpha.validate("alpha")?;
        self.gamma.validate("gamma")
    }

    /// Cells in θ-major, then α, then γ order.
    pub fn cells(&self) -> Vec<MixaeWeights> {
        let mut cells = Vec::new();
        for theta in self.theta.values() {
            for alpha in self.alpha.values() {
                for gamma in self.gamma.values() {
                    cells.push(MixaeWeights { theta, alpha, gamma });
                }
            }
        }
        cells
    }
}

pub fn grid_run_seed(base: u64, cell: usize, run: usize) -> u64 {
    seed::derive_seed(base, "mixae/grid", &[cell as u64, run as u64])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub run: usize,
    pub seed: u64,
    pub status: RunStatus,
    pub final_total: Option<f64>,
    pub ari: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub cell: usize,
    pub weights: MixaeWeights,
    pub runs: Vec<GridRun>,
    pub diverged: usize,
    pub top1_ari: Option<f64>,
    pub mean_ari: Option<f64>,
    pub std_ari: Option<f64>,
    pub mean_final_total: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub best_cell: Option<usize>,
    /// "top1_ari" or "lowest_stable_total".
    pub best_by: String,
}

fn summarise_cell(cell: usize, weights: MixaeWeights, runs: Vec<GridRun>) -> GridCell {
    let aris: Vec<f64> = runs.iter().filter(|r| r.status != RunStatus::Diverged).filter_map(|r| r.ari).collect();
    let totals: Vec<f64> = runs.iter().filter_map(|r| r.final_total).collect();
    let (mean_ari, std_ari) = if aris.is_empty() {
        (None, None)
    } else {
        let (m, s) = crate::latent::mean_std(&aris);
        (Some(m), Some(s))
    };
    GridCell {
        cell,
        weights,
        diverged: runs.iter().filter(|r| r.status == RunStatus::Diverged).count(),
        top1_ari: aris.iter().cloned().fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))),
        mean_ari,
        std_ari,
        mean_final_total: (!totals.is_empty()).then(|| crate::latent::mean_std(&totals).0),
        runs,
    }
}

/// Trains `runs_per_cell` models per weight cell, in parallel across jobs.
/// Divergence is recorded per run and never aborts the search.
pub fn grid_search(
    images: &[ImageGrid],
    labels: Option<&[Option<usize>]>,
    config: &MixaeConfig,
    train: &TrainConfig,
    spec: &GridSearchSpec,
    runs_per_cell: usize,
    seed: u64,
) -> Result<GridResult> {
    spec.validate()?;
    if runs_per_cell == 0 {
        return Err(Error::contract("runs_per_cell must be >= 1"));
    }
    let cells = spec.cells();
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..runs_per_cell).map(move |r| (c, r))).collect();
    let results = par::map(jobs, |(c, r)| -> Result<GridRun> {
        let run_seed = grid_run_seed(seed, c, r);
        let out = train_mixae(images, labels, config, &cells[c], train, run_seed)?;
        Ok(GridRun {
            run: r,
            seed: run_seed,
            status: out.status,
            final_total: out.history.last().map(|h| h.total),
            ari: out.report.as_ref().map(|rep| rep.ari),
            accuracy: out.report.as_ref().map(|rep| rep.accuracy),
        })
    });
    let mut per_cell: Vec<Vec<GridRun>> = vec![Vec::new(); cells.len()];
    for (i, r) in results.into_iter().enumerate() {
        per_cell[i / runs_per_cell].push(r?);
    }
    let summaries: Vec<GridCell> =
        per_cell.into_iter().enumerate().map(|(c, runs)| summarise_cell(c, cells[c], runs)).collect();

    let labelled = labels.is_some_and(|l| l.iter().any(Option::is_some));
    let (best_cell, best_by) = if labelled {
        let best = summaries.iter().filter_map(|c| c.top1_ari.map(|a| (c.cell, a))).fold(
            None,
            |best: Option<(usize, f64)>, (c, a)| match best {
                Some((_, b)) if b >= a => best,
                _ => Some((c, a)),
            },
        );
        (best.map(|b| b.0), "top1_ari")
    } else {
        let best = summaries
            .iter()
            .filter(|c| c.diverged == 0)
            .filter_map(|c| c.mean_final_total.map(|t| (c.cell, t)))
            .fold(None, |best: Option<(usize, f64)>, (c, t)| match best {
                Some((_, b)) if b <= t => best,
                _ => Some((c, t)),
            });
        (best.map(|b| b.0), "lowest_stable_total")
    };
    Ok(GridResult { cells: summaries, best_cell, best_by: best_by.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn entropy_examples() {
        let ln2 = 2f64.ln();
        assert!(close(sample_entropy(&[1.0, 0.0, 0.0, 1.0], 2).unwrap(), 0.0, 1e-9));
        assert!(close(sample_entropy(&[0.5, 0.5], 2).unwrap(), ln2, 1e-9));
        assert!(close(sample_entropy(&[0.9, 0.1], 2).unwrap(), 0.3251, 1e-4));
        assert!(close(batch_entropy(&[1.0, 0.0, 0.0, 1.0], 2).unwrap(), -ln2, 1e-9));
        assert!(close(batch_entropy(&[0.5, 0.5, 0.5, 0.5], 2).unwrap(), -ln2, 1e-9));
        assert!(close(batch_entropy(&[1.0, 0.0, 1.0, 0.0], 2).unwrap(), 0.0, 1e-9));
        assert!(sample_entropy(&[1.2, -0.2], 2).is_err());
    }

    #[test]
    fn scalar_assembly() {
        let w = MixaeWeights::SIMULATED_OPTIMUM;
        let l = LossBreakdown::assemble(&w, 2.0, 0.69, -0.69);
        // 0.2 + 0.0069 - 69000
        assert!(close(l.total, -68999.7931, 1e-6));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_rows(&[0.1, 0.7, 0.2], 3), vec![1]);
        assert_eq!(argmax_rows(&[0.5, 0.5], 2), vec![0]);
    }

    #[test]
    fn decoder_mirrors_encoder() {
        for ae in [AutoencoderConfig::default(), AutoencoderConfig::desk()] {
            let cfg = MixaeConfig::new(2, ae.clone());
            let model = MixaeModel::new(cfg, 1).unwrap();
            assert_eq!(model.encoders[0].output_shape(), &[20]);
            assert_eq!(model.decoders[0].output_shape(), &[1, ae.resolution, ae.resolution]);
            assert_eq!(model.assigner.output_shape(), &[2]);
        }
    }

    #[test]
    fn decade_grid_has_105_cells() {
        let spec = GridSearchSpec::decades();
        let cells = spec.cells();
        assert_eq!(cells.len(), 7 * 5 * 3);
        assert!(close(cells[0].theta, 0.1, 1e-15));
        assert!(close(cells[0].alpha, 1e-5, 1e-20));
        assert!(close(cells[0].gamma, 1e3, 1e-9));
        let half = ExponentRange::new(3.0, 4.0, 3).values();
        assert!(close(half[1], 3162.2776601683795, 1e-9));
    }

    #[test]
    fn config_validation() {
        assert!(MixaeConfig::new(1, AutoencoderConfig::desk()).validate().is_err());
        let mut ae = AutoencoderConfig::desk();
        ae.resolution = 30;
        assert!(MixaeConfig::new(2, ae).validate().is_err());
        assert!(MixaeWeights { theta: 0.0, alpha: 1.0, gamma: 1.0 }.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = MixaeModel::new(MixaeConfig::new(2, AutoencoderConfig::desk()), 3).unwrap();
        let bytes = encode_checkpoint(&model, 3, 17).unwrap();
        let (back, seed, steps) = decode_checkpoint(Path::new("x"), &bytes).unwrap();
        assert_eq!((seed, steps), (3, 17));
        for (a, b) in model.networks().iter().zip(back.networks()) {
            for (x, y) in a.params().iter().zip(b.params()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(Path::new("x"), &bad), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_checkpoint(Path::new("x"), &bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn split_is_disjoint_and_sized() {
        let (t, h) = holdout_split(2000, 0.25, 9);
        assert_eq!(h.len(), 500);
        assert_eq!(t.len(), 1500);
        let mut all = [t, h].concat();
        all.sort_unstable();
        assert_eq!(all, (0..2000).collect::<Vec<_>>());
    }
}
