//! Toy single-talker CTC recognizer: strided convolutional feature
//! extractor, post-norm transformer encoder split at an insertion point, and
//! a linear letter decoder.
//!
//! Embeddings cross the public API as `(B, C, T)`; internally the encoder
//! works on `(B, T, C)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{kaiming_uniform, Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorLayer {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub sample_rate: usize,
    pub frame_ms: usize,
    pub extractor: Vec<ExtractorLayer>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Output symbols; index 0 is the CTC blank.
    pub vocab: Vec<String>,
    /// The Sidecar sits between encoder layers `insertion_layer` and
    /// `insertion_layer + 1` (1-based).
    pub insertion_layer: usize,
    /// Per-head linear distance penalty on attention scores instead of
    /// sinusoidal absolute positions.
    pub distance_bias: bool,
}

pub const BLANK: usize = 0;

fn default_vocab(letters: &str) -> Vec<String> {
    std::iter::once("<blank>".to_string())
        .chain(letters.chars().map(String::from))
        .collect()
}

impl BackboneConfig {
    /// Minutes-scale CPU configuration.
    pub fn toy() -> Self {
        Self {
            sample_rate: 8000,
            frame_ms: 20,
            extractor: vec![
                ExtractorLayer {
                    kernel: 10,
                    stride: 5,
                    channels: 16,
                },
                ExtractorLayer {
                    kernel: 32,
                    stride: 32,
                    channels: 64,
                },
            ],
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_dim: 128,
            vocab: default_vocab("abcdefgh"),
            insertion_layer: 2,
            distance_bias: true,
        }
    }

    /// Base-size encoder (768 channels, 12 layers) used for parameter accounting.
    pub fn paper_scale() -> Self {
        let mut extractor = vec![ExtractorLayer {
            kernel: 10,
            stride: 5,
            channels: 512,
        }];
        extractor.extend(std::iter::repeat(ExtractorLayer {
            kernel: 3,
            stride: 2,
            channels: 512,
        })
        .take(4));
        extractor.extend(std::iter::repeat(ExtractorLayer {
            kernel: 2,
            stride: 2,
            channels: 512,
        })
        .take(2));
        Self {
            sample_rate: 16000,
            frame_ms: 20,
            extractor,
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            ffn_dim: 3072,
            vocab: default_vocab("|ETAONIHSRDLUMWCFGYPBVK'XJQZ"),
            insertion_layer: 2,
            distance_bias: false,
        }
    }

    pub fn total_stride(&self) -> usize {
        self.extractor.iter().map(|l| l.stride).product()
    }

    pub fn samples_per_frame(&self) -> usize {
        self.sample_rate * self.frame_ms / 1000
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn feature_channels(&self) -> usize {
        self.extractor.last().map_or(1, |l| l.channels)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Frames produced for `samples` input samples.
    pub fn frames_for(&self, samples: usize) -> usize {
        samples / self.total_stride()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.extractor.is_empty() {
            return bad("extractor needs at least one layer".into());
        }
        if self.sample_rate * self.frame_ms % 1000 != 0 || self.total_stride() != self.samples_per_frame() {
            return bad(format!(
                "extractor stride product {} must equal frame_ms * sample_rate / 1000 = {}",
                self.total_stride(),
                self.sample_rate as f64 * self.frame_ms as f64 / 1000.0
            ));
        }
        if self.extractor.iter().any(|l| l.kernel == 0 || l.stride == 0 || l.channels == 0) {
            return bad("extractor kernel, stride and channels must be positive".into());
        }
        if self.n_layers < 2 || self.insertion_layer < 1 || self.insertion_layer >= self.n_layers {
            return bad(format!(
                "insertion_layer {} must lie in [1, {}]",
                self.insertion_layer,
                self.n_layers.saturating_sub(1)
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab.len() < 2 {
            return bad("vocab needs the blank plus at least one token".into());
        }
        Ok(())
    }
}

/// Per-head distance slopes `2^(-8 (h + 1) / n_heads)`.
pub fn alibi_slopes(n_heads: usize) -> Vec<f64> {
    (0..n_heads)
        .map(|h| 2f64.powf(-8.0 * (h as f64 + 1.0) / n_heads as f64))
        .collect()
}

/// Constant `(H, T, T)` penalty `-slope_h * |i - j|`.
pub fn distance_penalty(n_heads: usize, frames: usize) -> Tensor {
    let slopes = alibi_slopes(n_heads);
    let mut data = Vec::with_capacity(n_heads * frames * frames);
    for s in &slopes {
        for i in 0..frames {
            for j in 0..frames {
                data.push(-s * (i as f64 - j as f64).abs());
            }
        }
    }
    Tensor::new(vec![n_heads, frames, frames], data).expect("sized by construction")
}

/// Sinusoidal absolute positions, `(T, d)`.
pub fn sinusoidal_positions(frames: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; frames * d];
    for t in 0..frames {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = t as f64 / rate;
            data[t * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(vec![frames, d], data).expect("sized by construction")
}

/// Scaled dot-product scores for `(B, H, T, dh)` queries and keys, with the
/// optional distance penalty.
pub fn attention_scores<'t>(queries: Var<'t>, keys: Var<'t>, distance_bias: bool) -> Result<Var<'t>> {
    let shape = queries.shape();
    if shape.len() != 4 {
        return Err(Error::Input(format!("attention expects (B, H, T, dh), got {shape:?}")));
    }
    let (heads, frames, dh) = (shape[1], shape[2], shape[3]);
    let kt = keys.transpose(&[0, 1, 3, 2])?;
    let scores = queries.matmul(kt)?.scale(1.0 / (dh as f64).sqrt())?;
    if !distance_bias {
        return Ok(scores);
    }
    let bias = queries.tape().leaf(&distance_penalty(heads, frames));
    Ok(scores.add(bias)?)
}

/// Parameter count of a backbone built from `config`.
pub fn param_count(config: &BackboneConfig) -> usize {
    let mut n = 0;
    let mut cin = 1;
    for l in &config.extractor {
        n += l.channels * cin * l.kernel + l.channels;
        cin = l.channels;
    }
    let (d, f, v) = (config.d_model, config.ffn_dim, config.vocab_size());
    n += 2 * cin + cin * d + d;
    n += config.n_layers * (4 * (d * d + d) + d * f + f + f * d + d + 4 * d);
    n + d * v + v
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamStore,
    frozen: bool,
}

const LN_EPS: f64 = 1e-5;

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut cin = 1;
        for (i, l) in config.extractor.iter().enumerate() {
            let fan = cin * l.kernel;
            p.insert(format!("extractor.{i}.weight"), kaiming_uniform(&mut rng, &[l.channels, cin, l.kernel], fan));
            p.insert(format!("extractor.{i}.bias"), kaiming_uniform(&mut rng, &[l.channels, 1], fan));
            cin = l.channels;
        }
        let (d, f) = (config.d_model, config.ffn_dim);
        p.insert("proj.norm.gamma", Tensor::ones(&[cin]));
        p.insert("proj.norm.beta", Tensor::zeros(&[cin]));
        p.insert("proj.weight", kaiming_uniform(&mut rng, &[cin, d], cin));
        p.insert("proj.bias", kaiming_uniform(&mut rng, &[d], cin));
        for l in 0..config.n_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("layers.{l}.attn.{w}"), kaiming_uniform(&mut rng, &[d, d], d));
                p.insert(format!("layers.{l}.attn.{w}_bias"), Tensor::zeros(&[d]));
            }
            p.insert(format!("layers.{l}.ffn.w1"), kaiming_uniform(&mut rng, &[d, f], d));
            p.insert(format!("layers.{l}.ffn.b1"), kaiming_uniform(&mut rng, &[f], d));
            p.insert(format!("layers.{l}.ffn.w2"), kaiming_uniform(&mut rng, &[f, d], f));
            p.insert(format!("layers.{l}.ffn.b2"), kaiming_uniform(&mut rng, &[d], f));
            for n in ["norm1", "norm2"] {
                p.insert(format!("layers.{l}.{n}.gamma"), Tensor::ones(&[d]));
                p.insert(format!("layers.{l}.{n}.beta"), Tensor::zeros(&[d]));
            }
        }
        let v = config.vocab_size();
        p.insert("decoder.weight", kaiming_uniform(&mut rng, &[d, v], d));
        p.insert("decoder.bias", kaiming_uniform(&mut rng, &[v], d));
        p.set_trainable(true);
        Ok(Self {
            config,
            params: p,
            frozen: false,
        })
    }

    /// Restores a backbone from stored parameters.
    pub fn from_params(config: BackboneConfig, params: ParamStore, frozen: bool) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::MissingParam(name.clone())),
            }
        }
        let mut b = Self {
            config,
            params,
            frozen: false,
        };
        if frozen {
            b.freeze();
        } else {
            b.params.set_trainable(true);
        }
        Ok(b)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Stops gradients for every parameter. Idempotent.
    pub fn freeze(&mut self) {
        self.params.set_trainable(false);
        self.frozen = true;
    }

    /// Waveform samples cut to a whole number of frames.
    pub fn frame_aligned<'a>(&self, waveform: &'a [f64]) -> Result<&'a [f64]> {
        let hop = self.config.total_stride();
        if waveform.len() < hop {
            return Err(Error::Input(format!(
                "waveform of {} samples is shorter than one {hop}-sample frame",
                waveform.len()
            )));
        }
        Ok(&waveform[..waveform.len() / hop * hop])
    }

    /// `(B, 1, N)` waveforms to `(B, C_feat, T)` features with `T = N / hop`.
    pub fn features<'t>(&self, p: &Bound<'t>, wave: Var<'t>) -> Result<Var<'t>> {
        let mut x = wave;
        for (i, l) in self.config.extractor.iter().enumerate() {
            let w = p.get(&format!("extractor.{i}.weight"))?;
            let b = p.get(&format!("extractor.{i}.bias"))?;
            // right padding keeps exactly floor(len / stride) windows
            let pad = l.kernel.saturating_sub(l.stride);
            x = x.conv1d(w, l.stride, 1, 1, (0, pad))?.add(b)?.relu()?;
        }
        Ok(x)
    }

    /// Features for a single waveform, evaluated without gradients.
    pub fn extract_features(&self, waveform: &[f64]) -> Result<Tensor> {
        let samples = self.frame_aligned(waveform)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let wave = tape.constant(vec![1, 1, samples.len()], samples.to_vec())?;
        let f = self.features(&p, wave)?.to_tensor();
        let (c, t) = (f.shape()[1], f.shape()[2]);
        Ok(f.reshape(vec![c, t])?)
    }

    fn check_channels(&self, x: &Var<'_>, expected: usize, what: &str) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 3 || s[1] != expected {
            return Err(Error::Input(format!("{what} expects (B, {expected}, T), got {s:?}")));
        }
        if s[2] == 0 {
            return Err(Error::Input(format!("{what}: zero-length input")));
        }
        Ok((s[0], s[2]))
    }

    /// Feature projection and encoder layers `1..=insertion_layer`.
    pub fn encode_lower<'t>(&self, p: &Bound<'t>, features: Var<'t>) -> Result<Var<'t>> {
        let x = self.embed(p, features)?;
        let x = self.run_layers(p, x, 0..self.config.insertion_layer)?;
        Ok(x.transpose(&[0, 2, 1])?)
    }

    /// Encoder layers `insertion_layer+1..=n_layers` on a `(B', C, T)` batch.
    pub fn encode_upper<'t>(&self, p: &Bound<'t>, embedding: Var<'t>) -> Result<Var<'t>> {
        self.check_channels(&embedding, self.config.d_model, "encode_upper")?;
        let x = embedding.transpose(&[0, 2, 1])?;
        let x = self.run_layers(p, x, self.config.insertion_layer..self.config.n_layers)?;
        Ok(x.transpose(&[0, 2, 1])?)
    }

    /// All encoder layers in one pass, without the split.
    pub fn encode<'t>(&self, p: &Bound<'t>, features: Var<'t>) -> Result<Var<'t>> {
        let x = self.embed(p, features)?;
        let x = self.run_layers(p, x, 0..self.config.n_layers)?;
        Ok(x.transpose(&[0, 2, 1])?)
    }

    /// `(B', C, T)` hidden states to `(B', T, V)` logits.
    pub fn decode<'t>(&self, p: &Bound<'t>, hidden: Var<'t>) -> Result<Var<'t>> {
        self.check_channels(&hidden, self.config.d_model, "decode")?;
        let x = hidden.transpose(&[0, 2, 1])?;
        Ok(x.matmul(p.get("decoder.weight")?)?.add(p.get("decoder.bias")?)?)
    }

    /// Waveform batch `(B, 1, N)` straight to logits.
    pub fn forward<'t>(&self, p: &Bound<'t>, wave: Var<'t>) -> Result<Var<'t>> {
        let f = self.features(p, wave)?;
        let h = self.encode(p, f)?;
        self.decode(p, h)
    }

    fn embed<'t>(&self, p: &Bound<'t>, features: Var<'t>) -> Result<Var<'t>> {
        let (_, frames) = self.check_channels(&features, self.config.feature_channels(), "encode_lower")?;
        let x = features.transpose(&[0, 2, 1])?;
        let x = x.layer_norm(2, p.get("proj.norm.gamma")?, p.get("proj.norm.beta")?, LN_EPS)?;
        let x = x.matmul(p.get("proj.weight")?)?.add(p.get("proj.bias")?)?;
        if self.config.distance_bias {
            return Ok(x);
        }
        let pos = features.tape().leaf(&sinusoidal_positions(frames, self.config.d_model));
        Ok(x.add(pos)?)
    }

    fn run_layers<'t>(&self, p: &Bound<'t>, mut x: Var<'t>, layers: std::ops::Range<usize>) -> Result<Var<'t>> {
        for l in layers {
            x = self.layer(p, x, l)?;
        }
        Ok(x)
    }

    fn layer<'t>(&self, p: &Bound<'t>, x: Var<'t>, l: usize) -> Result<Var<'t>> {
        let g = |n: &str| p.get(&format!("layers.{l}.{n}"));
        let a = self.self_attention(p, x, l)?;
        let x = x.add(a)?.layer_norm(2, g("norm1.gamma")?, g("norm1.beta")?, LN_EPS)?;
        let h = x.matmul(g("ffn.w1")?)?.add(g("ffn.b1")?)?.relu()?;
        let h = h.matmul(g("ffn.w2")?)?.add(g("ffn.b2")?)?;
        Ok(x.add(h)?.layer_norm(2, g("norm2.gamma")?, g("norm2.beta")?, LN_EPS)?)
    }

    fn self_attention<'t>(&self, p: &Bound<'t>, x: Var<'t>, l: usize) -> Result<Var<'t>> {
        let s = x.shape();
        let (b, t, d) = (s[0], s[1], s[2]);
        let (h, dh) = (self.config.n_heads, self.config.head_dim());
        let proj = |w: &str| -> Result<Var<'t>> {
            let y = x
                .matmul(p.get(&format!("layers.{l}.attn.{w}"))?)?
                .add(p.get(&format!("layers.{l}.attn.{w}_bias"))?)?;
            Ok(y.reshape(&[b, t, h, dh])?.transpose(&[0, 2, 1, 3])?)
        };
        let (q, k, v) = (proj("wq")?, proj("wk")?, proj("wv")?);
        let probs = attention_scores(q, k, self.config.distance_bias)?.softmax(3)?;
        let ctx = probs.matmul(v)?.transpose(&[0, 2, 1, 3])?.reshape(&[b, t, d])?;
        Ok(ctx
            .matmul(p.get(&format!("layers.{l}.attn.wo"))?)?
            .add(p.get(&format!("layers.{l}.attn.wo_bias"))?)?)
    }
}
