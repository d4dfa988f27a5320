//! Mask-based separator inserted between two frozen encoder layers, and the
//! diarization branch that reads speaker activity off its masks.
//!
//! Masked streams are laid out speaker-major: row `b * S + s` holds speaker
//! `s` of batch item `b`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::nn::{kaiming_uniform, Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarConfig {
    /// Embedding channels `C`; equals the backbone `d_model`.
    pub io_channels: usize,
    pub bottleneck_channels: usize,
    pub hidden_channels: usize,
    /// Blocks per repeat; dilations run `1, 2, .., 2^(K-1)`.
    pub blocks_per_repeat: usize,
    pub repeats: usize,
    pub n_speakers: usize,
}

pub const KERNEL: usize = 3;
const PRELU_INIT: f64 = 0.25;
const GLN_EPS: f64 = 1e-8;

impl SidecarConfig {
    pub fn toy() -> Self {
        Self {
            io_channels: 64,
            bottleneck_channels: 32,
            hidden_channels: 64,
            blocks_per_repeat: 4,
            repeats: 2,
            n_speakers: 2,
        }
    }

    pub fn paper_scale(n_speakers: usize) -> Self {
        Self {
            io_channels: 768,
            bottleneck_channels: 128,
            hidden_channels: 512,
            blocks_per_repeat: 8,
            repeats: 3,
            n_speakers,
        }
    }

    pub fn dilations(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.repeats).flat_map(move |_| (0..self.blocks_per_repeat).map(|k| 1 << k))
    }

    /// Frames on each side of `t` that can influence mask frame `t`.
    pub fn receptive_radius(&self) -> usize {
        1 + self.dilations().sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::Config(format!("n_speakers must be >= 2, got {}", self.n_speakers)));
        }
        if [self.io_channels, self.bottleneck_channels, self.hidden_channels, self.blocks_per_repeat, self.repeats]
            .contains(&0)
        {
            return Err(Error::Config("sidecar channel and block counts must be positive".into()));
        }
        Ok(())
    }
}

/// Trainable parameter counts per component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub in_conv: usize,
    pub tcn: usize,
    pub mask_conv: usize,
    pub out_conv: usize,
    pub diar_branch: usize,
    /// Everything trained with the backbone frozen.
    pub sidecar_total: usize,
    pub backbone: usize,
    pub total: usize,
    pub trainable_ratio: f64,
}

fn conv_count(cout: usize, cin_per_group: usize, k: usize) -> usize {
    cout * cin_per_group * k + cout
}

/// Exact counts derived from the configurations, without allocating weights.
pub fn param_report(backbone: &BackboneConfig, sidecar: &SidecarConfig) -> ParamReport {
    let (c, b, h) = (sidecar.io_channels, sidecar.bottleneck_channels, sidecar.hidden_channels);
    let flank = conv_count(c, c, KERNEL);
    let block = conv_count(h, b, 1) + h + 2 * h + conv_count(h, 1, KERNEL) + h + 2 * h + conv_count(b, h, 1);
    let blocks = sidecar.blocks_per_repeat * sidecar.repeats;
    let tcn = 2 * c + conv_count(b, c, 1) + blocks * block + b;
    let mask_conv = sidecar.n_speakers * c * b;
    let sidecar_total = 2 * flank + tcn + mask_conv + c;
    let backbone = crate::backbone::param_count(backbone);
    let total = backbone + sidecar_total;
    ParamReport {
        in_conv: flank,
        tcn,
        mask_conv,
        out_conv: flank,
        diar_branch: c,
        sidecar_total,
        backbone,
        total,
        trainable_ratio: sidecar_total as f64 / total as f64,
    }
}

#[derive(Clone, Debug)]
pub struct Sidecar {
    pub config: SidecarConfig,
    pub params: ParamStore,
    /// Skips normalization; only for receptive-field probing.
    bypass_norm: bool,
}

impl Sidecar {
    pub fn new(config: SidecarConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, b, h) = (config.io_channels, config.bottleneck_channels, config.hidden_channels);
        let mut p = ParamStore::new();
        let conv = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: &[usize], fan: usize| {
            p.insert(format!("{name}.weight"), kaiming_uniform(rng, shape, fan));
            p.insert(format!("{name}.bias"), kaiming_uniform(rng, &[shape[0], 1], fan));
        };
        let norm = |p: &mut ParamStore, name: &str, ch: usize| {
            p.insert(format!("{name}.gamma"), Tensor::ones(&[ch, 1]));
            p.insert(format!("{name}.beta"), Tensor::zeros(&[ch, 1]));
        };
        conv(&mut p, &mut rng, "in_conv", &[c, c, KERNEL], c * KERNEL);
        norm(&mut p, "norm", c);
        conv(&mut p, &mut rng, "bottleneck", &[b, c], c);
        for (i, _) in config.dilations().enumerate() {
            let name = |n: &str| format!("blocks.{i}.{n}");
            conv(&mut p, &mut rng, &name("conv1"), &[h, b], b);
            p.insert(name("prelu1"), Tensor::full(&[h], PRELU_INIT));
            norm(&mut p, &name("norm1"), h);
            conv(&mut p, &mut rng, &name("dconv"), &[h, 1, KERNEL], KERNEL);
            p.insert(name("prelu2"), Tensor::full(&[h], PRELU_INIT));
            norm(&mut p, &name("norm2"), h);
            conv(&mut p, &mut rng, &name("conv2"), &[b, h], h);
        }
        p.insert("prelu", Tensor::full(&[b], PRELU_INIT));
        p.insert(
            "mask_conv.weight",
            kaiming_uniform(&mut rng, &[config.n_speakers * c, b], b),
        );
        conv(&mut p, &mut rng, "out_conv", &[c, c, KERNEL], c * KERNEL);
        p.insert("diar.weight", Tensor::zeros(&[1, c]));
        p.set_trainable(true);
        Ok(Self {
            config,
            params: p,
            bypass_norm: false,
        })
    }

    pub fn from_params(config: SidecarConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config, 0)?;
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
        let mut s = Self {
            config,
            params,
            bypass_norm: false,
        };
        s.params.set_trainable(true);
        Ok(s)
    }

    fn gln<'t>(&self, p: &Bound<'t>, x: Var<'t>, name: &str) -> Result<Var<'t>> {
        if self.bypass_norm {
            return Ok(x);
        }
        Ok(x.layer_norm(1, p.get(&format!("{name}.gamma"))?, p.get(&format!("{name}.beta"))?, GLN_EPS)?)
    }

    fn pointwise<'t>(&self, p: &Bound<'t>, x: Var<'t>, name: &str) -> Result<Var<'t>> {
        let w = p.get(&format!("{name}.weight"))?;
        let y = x.pointwise_conv2d(w)?;
        match p.get(&format!("{name}.bias")) {
            Ok(b) => Ok(y.add(b)?),
            Err(_) => Ok(y),
        }
    }

    fn flank<'t>(&self, p: &Bound<'t>, x: Var<'t>, name: &str) -> Result<Var<'t>> {
        let w = p.get(&format!("{name}.weight"))?;
        Ok(x.conv1d(w, 1, 1, 1, (1, 1))?.add(p.get(&format!("{name}.bias"))?)?)
    }

    /// Speaker masks and masked, re-filtered embeddings for a `(B, C, T)`
    /// mixed embedding. Both outputs are `(B*S, C, T)`.
    pub fn separate<'t>(&self, p: &Bound<'t>, mixed: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = mixed.shape();
        let c = self.config.io_channels;
        let &[batch, ch, frames] = &shape[..] else {
            return Err(Error::Input(format!("separate expects (B, C, T), got {shape:?}")));
        };
        if ch != c {
            return Err(Error::Input(format!("separate expects {c} channels, got {ch}")));
        }
        if frames == 0 {
            return Err(Error::Input("separate: zero-length input".into()));
        }
        let s = self.config.n_speakers;
        let filtered = self.flank(p, mixed, "in_conv")?;
        let mut y = self.pointwise(p, self.gln(p, filtered, "norm")?, "bottleneck")?;
        for (i, d) in self.config.dilations().enumerate() {
            let n = |x: &str| format!("blocks.{i}.{x}");
            let z = self.pointwise(p, y, &n("conv1"))?.prelu(p.get(&n("prelu1"))?)?;
            let z = self.gln(p, z, &n("norm1"))?;
            let z = z
                .conv1d(p.get(&n("dconv.weight"))?, 1, d, self.config.hidden_channels, (d, d))?
                .add(p.get(&n("dconv.bias"))?)?
                .prelu(p.get(&n("prelu2"))?)?;
            let z = self.gln(p, z, &n("norm2"))?;
            y = y.add(self.pointwise(p, z, &n("conv2"))?)?;
        }
        let y = y.prelu(p.get("prelu")?)?;
        let masks = self.pointwise(p, y, "mask_conv")?.relu()?;
        let masked = masks
            .reshape(&[batch, s, c, frames])?
            .mul(filtered.reshape(&[batch, 1, c, frames])?)?
            .reshape(&[batch * s, c, frames])?;
        let masks = masks.reshape(&[batch * s, c, frames])?;
        let separated = self.flank(p, masked, "out_conv")?;
        Ok((masks, separated))
    }

    /// Activity probabilities `(B, S, T)` from `(B*S, C, T)` masks.
    pub fn diar_activity<'t>(&self, p: &Bound<'t>, masks: Var<'t>, batch: usize) -> Result<Var<'t>> {
        let shape = masks.shape();
        let s = self.config.n_speakers;
        if shape.len() != 3 || shape[0] != batch * s || shape[1] != self.config.io_channels {
            return Err(Error::Input(format!(
                "diar_activity expects ({batch}*{s}, {}, T) masks, got {shape:?}",
                self.config.io_channels
            )));
        }
        let (c, t) = (shape[1], shape[2]);
        let logits = masks
            .reshape(&[batch, s, c, t])?
            .transpose(&[0, 2, 1, 3])?
            .pointwise_conv2d(p.get("diar.weight")?)?;
        Ok(logits.reshape(&[batch, s, t])?.sigmoid()?)
    }

    /// Masks and activities for one `(C, T)` embedding, without gradients.
    pub fn infer(&self, embedding: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let (c, t) = match embedding.shape() {
            &[c, t] => (c, t),
            s => return Err(Error::Input(format!("expected (C, T) embedding, got {s:?}"))),
        };
        let x = tape.constant(vec![1, c, t], embedding.data().to_vec())?;
        let (masks, sep) = self.separate(&p, x)?;
        let d = self.diar_activity(&p, masks, 1)?;
        let s = self.config.n_speakers;
        Ok((sep.to_tensor(), d.to_tensor().reshape(vec![s, t])?))
    }
}

/// Binary decisions: active only where the probability exceeds 0.5.
pub fn activity_to_decisions(activity: &Tensor) -> Tensor {
    let data = activity.data().iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
    Tensor::new(activity.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;

    fn tiny(s: usize) -> SidecarConfig {
        SidecarConfig {
            io_channels: 4,
            bottleneck_channels: 3,
            hidden_channels: 5,
            blocks_per_repeat: 2,
            repeats: 2,
            n_speakers: s,
        }
    }

    fn input<'t>(tape: &'t Tape, shape: &[usize], seed: u64) -> Var<'t> {
        tape.leaf(&uniform(&mut ChaCha8Rng::seed_from_u64(seed), shape, 2.0))
    }

    #[test]
    fn shapes_and_nonnegative_masks() {
        let sc = Sidecar::new(tiny(2), 1).unwrap();
        let tape = Tape::new();
        let p = sc.params.bind(&tape);
        for seed in 0..10 {
            let (m, sep) = sc.separate(&p, input(&tape, &[2, 4, 5], seed)).unwrap();
            assert_eq!(m.shape(), vec![4, 4, 5]);
            assert_eq!(sep.shape(), vec![4, 4, 5]);
            assert!(m.value().iter().all(|&v| v >= 0.0));
        }
        assert!(sc.separate(&p, input(&tape, &[2, 3, 5], 0)).is_err());
        let empty = tape.constant(vec![1, 4, 0], vec![]).unwrap();
        assert!(sc.separate(&p, empty).is_err());
    }

    #[test]
    fn zero_mask_conv_gives_zero_masks() {
        let mut sc = Sidecar::new(tiny(2), 1).unwrap();
        sc.params.get_mut("mask_conv.weight").unwrap().data_mut().fill(0.0);
        let tape = Tape::new();
        let p = sc.params.bind(&tape);
        let (m, sep) = sc.separate(&p, input(&tape, &[1, 4, 6], 3)).unwrap();
        assert!(m.value().iter().all(|&v| v == 0.0));
        let zeros = tape.constant(vec![2, 4, 6], vec![0.0; 48]).unwrap();
        let expect = sc.flank(&p, zeros, "out_conv").unwrap();
        assert_eq!(sep.value(), expect.value());
        let d = sc.diar_activity(&p, m, 1).unwrap();
        assert!(d.value().iter().all(|&v| v == 0.5));
        assert!(activity_to_decisions(&d.to_tensor()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diar_branch_values() {
        let mut sc = Sidecar::new(tiny(2), 1).unwrap();
        sc.params.get_mut("diar.weight").unwrap().data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        let tape = Tape::new();
        let p = sc.params.bind(&tape);
        let mut m = vec![0.0; 6 * 4 * 5];
        m[0] = 4.0;
        let masks = tape.constant(vec![6, 4, 5], m).unwrap();
        let d = sc.diar_activity(&p, masks, 3).unwrap();
        assert_eq!(d.shape(), vec![3, 2, 5]);
        assert!((d.value()[0] - 0.9820137900379085).abs() < 1e-12);
        assert!(sc.diar_activity(&p, masks, 2).is_err());
    }

    #[test]
    fn decisions_are_strict() {
        let d = Tensor::new(vec![3], vec![0.5, 0.51, 0.49]).unwrap();
        assert_eq!(activity_to_decisions(&d).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn pre_sigmoid_is_linear_in_masks() {
        let mut sc = Sidecar::new(tiny(2), 1).unwrap();
        sc.params.insert("diar.weight", uniform(&mut ChaCha8Rng::seed_from_u64(5), &[1, 4], 1.0));
        let tape = Tape::new();
        let p = sc.params.bind(&tape);
        let m = input(&tape, &[2, 4, 3], 7);
        let logit = |d: Var<'_>| d.value().iter().map(|&v| (v / (1.0 - v)).ln()).collect::<Vec<_>>();
        let a = logit(sc.diar_activity(&p, m, 1).unwrap());
        let b = logit(sc.diar_activity(&p, m.scale(3.0).unwrap(), 1).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((3.0 * x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn receptive_field_is_bounded() {
        let mut sc = Sidecar::new(tiny(2), 2).unwrap();
        sc.bypass_norm = true;
        for (name, t) in sc.params.iter_mut() {
            if name.contains("prelu") {
                t.data_mut().fill(1.0);
            }
        }
        // linear masks: drop the final ReLU by checking pre-activation differences
        let radius = sc.config.receptive_radius();
        assert_eq!(radius, 1 + 2 * (1 + 2));
        let frames = 2 * radius + 11;
        let centre = frames / 2;
        let tape = Tape::new();
        let p = sc.params.bind(&tape);
        let base = tape.constant(vec![1, 4, frames], vec![0.0; 4 * frames]).unwrap();
        let mut bumped = vec![0.0; 4 * frames];
        bumped[centre] = 1.0;
        let bumped = tape.constant(vec![1, 4, frames], bumped).unwrap();
        let probe = |x: Var<'_>| -> Vec<f64> {
            let f = sc.flank(&p, x, "in_conv").unwrap();
            let mut y = sc.pointwise(&p, f, "bottleneck").unwrap();
            for (i, d) in sc.config.dilations().enumerate() {
                let n = |s: &str| format!("blocks.{i}.{s}");
                let z = sc.pointwise(&p, y, &n("conv1")).unwrap();
                let z = z
                    .conv1d(p.get(&n("dconv.weight")).unwrap(), 1, d, 5, (d, d))
                    .unwrap()
                    .add(p.get(&n("dconv.bias")).unwrap())
                    .unwrap();
                y = y.add(sc.pointwise(&p, z, &n("conv2")).unwrap()).unwrap();
            }
            sc.pointwise(&p, y, "mask_conv").unwrap().value().to_vec()
        };
        let (a, b) = (probe(base), probe(bumped));
        let mut touched = vec![false; frames];
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            if (x - y).abs() > 1e-12 {
                touched[i % frames] = true;
            }
        }
        for (t, &hit) in touched.iter().enumerate() {
            if t.abs_diff(centre) > radius {
                assert!(!hit, "frame {t} affected");
            }
        }
        assert!(touched[centre - radius] && touched[centre + radius]);
    }

    #[test]
    fn batch_items_are_independent() {
        let sc = Sidecar::new(tiny(3), 4).unwrap();
        let tape = Tape::new();
        let p = sc.params.bind(&tape);
        let x = input(&tape, &[3, 4, 6], 9);
        let (m_all, s_all) = sc.separate(&p, x).unwrap();
        let (m1, s1) = sc.separate(&p, x.narrow(0, 1, 1).unwrap()).unwrap();
        assert_eq!(&m_all.value()[72..144], &m1.value()[..]);
        assert_eq!(&s_all.value()[72..144], &s1.value()[..]);
    }

    #[test]
    fn paper_scale_counts() {
        let bb = BackboneConfig::paper_scale();
        let two = param_report(&bb, &SidecarConfig::paper_scale(2));
        let three = param_report(&bb, &SidecarConfig::paper_scale(3));
        assert_eq!(two.diar_branch, 768);
        assert_eq!(three.sidecar_total - two.sidecar_total, 98_304);
        assert_eq!(param_report(&bb, &SidecarConfig::paper_scale(2)), two);
    }

    #[test]
    fn counts_match_allocated_parameters() {
        let cfg = SidecarConfig::toy();
        let r = param_report(&BackboneConfig::toy(), &cfg);
        assert_eq!(r.sidecar_total, Sidecar::new(cfg, 0).unwrap().params.num_params());
        let bb = crate::backbone::Backbone::new(BackboneConfig::toy(), 0).unwrap();
        assert_eq!(r.backbone, bb.params.num_params());
    }
}
