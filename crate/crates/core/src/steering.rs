//! Prompt-driven instance normalisation and the style-statistics optimiser.
//!
//! A source feature map is re-normalised per channel toward target
//! statistics `(mu, sigma)`. Those statistics are optimised so the embedding
//! of the transformed map aligns with a text embedding under cosine distance.

use crate::encoder::{tail_backward, tail_forward, Embedding, EncoderWeights};
use crate::error::{Error, Result};
use crate::tensor::{channel_stats, ChannelStats, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Denominator guard added to the source standard deviation.
pub const PIN_EPS: f64 = 1e-5;
pub const SIGMA_MIN: f64 = 1e-4;

/// Optimisable per-channel target statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl StyleStats {
    pub fn channels(&self) -> usize {
        self.mu.len()
    }
}

impl From<ChannelStats> for StyleStats {
    fn from(s: ChannelStats) -> Self {
        Self {
            mu: s.mu,
            sigma: s.sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringConfig {
    pub steps: usize,
    pub lr: f64,
    /// Classical momentum; 0 gives plain gradient descent.
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_sigma_min() -> f64 {
    SIGMA_MIN
}

fn default_eps() -> f64 {
    PIN_EPS
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 0.05,
            momentum: 0.0,
            sigma_min: SIGMA_MIN,
            eps: PIN_EPS,
        }
    }
}

impl SteeringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.sigma_min > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("sigma_min and eps must be positive".into()));
        }
        Ok(())
    }
}

/// Optimised statistics for one source feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleEntry {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub loss_init: f64,
    pub loss_final: f64,
}

impl StyleEntry {
    pub fn stats(&self) -> StyleStats {
        StyleStats {
            mu: self.mu.clone(),
            sigma: self.sigma.clone(),
        }
    }
}

/// One entry per source feature map, in input order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSet {
    pub config: SteeringConfig,
    pub entries: Vec<StyleEntry>,
}

impl StyleSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn check_style(f: &Tensor, s: &StyleStats) -> Result<usize> {
    let (c, _, _) = f.dims3()?;
    if s.mu.len() != c || s.sigma.len() != c {
        return Err(Error::shape(format!(
            "style has {}/{} channels, feature map has {c}",
            s.mu.len(),
            s.sigma.len()
        )));
    }
    Ok(c)
}

fn normalized(f: &Tensor, src: &ChannelStats, eps: f64) -> Tensor {
    let mut out = f.clone();
    for k in 0..src.channels() {
        let (m, d) = (src.mu[k], src.sigma[k] + eps);
        for v in out.channel_mut(k) {
            *v = (*v - m) / d;
        }
    }
    out
}

/// `sigma * (f - mean(f)) / (std(f) + eps) + mu`, channel by channel.
pub fn pin(f: &Tensor, s: &StyleStats) -> Result<Tensor> {
    pin_with_eps(f, s, PIN_EPS)
}

pub fn pin_with_eps(f: &Tensor, s: &StyleStats, eps: f64) -> Result<Tensor> {
    check_style(f, s)?;
    let src = channel_stats(f)?;
    let mut out = normalized(f, &src, eps);
    for k in 0..s.channels() {
        let (sig, mu) = (s.sigma[k], s.mu[k]);
        for v in out.channel_mut(k) {
            *v = sig * *v + mu;
        }
    }
    if out.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pin"));
    }
    Ok(out)
}

/// Cosine distance `1 - a.b / (|a||b|)` between raw (not necessarily unit)
/// vectors.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine of vectors with different lengths"));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok(1.0 - cos.clamp(-1.0, 1.0))
}

pub fn cosine_loss(a: &Embedding, b: &Embedding) -> Result<f64> {
    cosine_distance(a.as_slice(), b.as_slice())
}

/// Loss and gradients produced by [`style_grad`].
#[derive(Clone, Debug, PartialEq)]
pub struct StyleGrad {
    pub loss: f64,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Steering loss for feature map `f` under style `s`.
pub fn style_loss(
    f: &Tensor,
    s: &StyleStats,
    trg: &Embedding,
    w: &EncoderWeights,
) -> Result<f64> {
    let steered = pin(f, s)?;
    let pass = tail_forward(&steered, w)?;
    cosine_loss(pass.embedding(), trg)
}

/// Exact gradient of [`style_loss`] with respect to `s.mu` and `s.sigma`.
pub fn style_grad(
    f: &Tensor,
    s: &StyleStats,
    trg: &Embedding,
    w: &EncoderWeights,
) -> Result<StyleGrad> {
    check_style(f, s)?;
    let src = channel_stats(f)?;
    style_grad_with(&normalized(f, &src, PIN_EPS), s, trg, w)
}

fn style_grad_with(
    norm: &Tensor,
    s: &StyleStats,
    trg: &Embedding,
    w: &EncoderWeights,
) -> Result<StyleGrad> {
    let mut steered = norm.clone();
    for k in 0..s.channels() {
        for v in steered.channel_mut(k) {
            *v = s.sigma[k] * *v + s.mu[k];
        }
    }
    if steered.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("style_grad"));
    }
    let pass = tail_forward(&steered, w)?;
    let raw = pass.raw();
    let e = pass.embedding().as_slice();
    let t = trg.as_slice();
    let norm_raw = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cos: f64 = e.iter().zip(t).map(|(a, b)| a * b).sum();
    // d(1 - cos)/d raw = -(t - cos * e) / |raw|  (t is unit-norm)
    let grad_raw: Vec<f64> = e
        .iter()
        .zip(t)
        .map(|(ei, ti)| -(ti - cos * ei) / norm_raw)
        .collect();
    let grad_feat = tail_backward(&pass, &steered, w, &grad_raw)?;
    let mut grad_mu = Vec::with_capacity(s.channels());
    let mut grad_sigma = Vec::with_capacity(s.channels());
    for k in 0..s.channels() {
        let g = grad_feat.channel(k);
        grad_mu.push(g.iter().sum());
        grad_sigma.push(g.iter().zip(norm.channel(k)).map(|(a, b)| a * b).sum());
    }
    Ok(StyleGrad {
        loss: 1.0 - cos.clamp(-1.0, 1.0),
        mu: grad_mu,
        sigma: grad_sigma,
    })
}

/// Runs the per-feature optimisation: start from the map's own channel
/// statistics, take `steps` momentum-SGD steps on the steering loss, clamp
/// sigma to `sigma_min` after every step.
pub fn steer_one(
    f: &Tensor,
    trg: &Embedding,
    cfg: &SteeringConfig,
    w: &EncoderWeights,
) -> Result<StyleEntry> {
    cfg.validate()?;
    let src = channel_stats(f)?;
    let norm = normalized(f, &src, cfg.eps);
    let mut style = StyleStats::from(src.clone());
    let c = style.channels();
    let mut vel_mu = vec![0.0; c];
    let mut vel_sigma = vec![0.0; c];
    let loss_at = |s: &StyleStats| -> Result<f64> {
        let mut steered = norm.clone();
        for k in 0..c {
            for v in steered.channel_mut(k) {
                *v = s.sigma[k] * *v + s.mu[k];
            }
        }
        cosine_loss(tail_forward(&steered, w)?.embedding(), trg)
    };
    let loss_init = loss_at(&style)?;
    for _ in 0..cfg.steps {
        let g = style_grad_with(&norm, &style, trg, w)?;
        for k in 0..c {
            vel_mu[k] = cfg.momentum * vel_mu[k] - cfg.lr * g.mu[k];
            vel_sigma[k] = cfg.momentum * vel_sigma[k] - cfg.lr * g.sigma[k];
            style.mu[k] += vel_mu[k];
            // a channel already below the floor (constant input) is not lifted
            let floor = cfg.sigma_min.min(style.sigma[k]);
            style.sigma[k] = (style.sigma[k] + vel_sigma[k]).max(floor);
        }
    }
    let loss_final = loss_at(&style)?;
    Ok(StyleEntry {
        mu: style.mu,
        sigma: style.sigma,
        loss_init,
        loss_final,
    })
}

/// Optimises one style per source feature map, in parallel; the result keeps
/// input order.
pub fn steer(
    features: &[Tensor],
    trg: &Embedding,
    cfg: &SteeringConfig,
    w: &EncoderWeights,
) -> Result<StyleSet> {
    if features.is_empty() {
        return Err(Error::EmptyInput("steer needs at least one feature map".into()));
    }
    let c = features[0].dims3()?.0;
    if let Some(bad) = features.iter().find(|f| f.shape()[0] != c) {
        return Err(Error::shape(format!(
            "feature maps disagree on channel count: {c} vs {:?}",
            bad.shape()
        )));
    }
    cfg.validate()?;
    let entries = features
        .par_iter()
        .map(|f| steer_one(f, trg, cfg, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(StyleSet {
        config: cfg.clone(),
        entries,
    })
}
