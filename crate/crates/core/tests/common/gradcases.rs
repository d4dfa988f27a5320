//! Finite-difference cases for every differentiable op and the training
//! objectives. Each case returns the worst relative error over all inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sidecar_mtl::backbone::{attention_scores, Backbone, BackboneConfig, ExtractorLayer};
use sidecar_mtl::objectives::{adaptation_loss, combined_loss, ctc_loss};
use sidecar_mtl::sidecar::{Sidecar, SidecarConfig};
use sidecar_mtl::tensor::{grad_check_many, Tape, Tensor, Var};

pub const EPS: f64 = 1e-6;

type Case = fn(&mut ChaCha8Rng) -> f64;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Entries in `[-2, 2]` resampled until at least 1e-3 away from zero.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-2.0..2.0);
            if v.abs() >= 1e-3 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts an output with fixed random weights so every element matters.
fn project<'t>(v: Var<'t>, seed: u64) -> sidecar_mtl::tensor::Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = v.shape();
    let w = rand_t(&mut rng, &shape);
    let w = v.tape().constant(shape, w.data().to_vec())?;
    v.mul(w)?.sum()
}

fn check(points: &[Tensor], f: impl for<'t> Fn(&[Var<'t>]) -> sidecar_mtl::tensor::Result<Var<'t>>) -> f64 {
    grad_check_many(f, points, EPS).expect("case evaluates")
}

fn matmul(rng: &mut ChaCha8Rng) -> f64 {
    let a = rand_t(rng, &[2, 3, 4]);
    let b = rand_t(rng, &[4, 5]);
    let c = rand_t(rng, &[2, 5, 2]);
    check(&[a, b, c], |v| project(v[0].matmul(v[1])?.matmul(v[2])?, 1))
}

fn conv1d(rng: &mut ChaCha8Rng) -> f64 {
    let x = rand_t(rng, &[2, 4, 9]);
    let w = rand_t(rng, &[6, 2, 3]);
    let d = rand_t(rng, &[6, 1, 3]);
    check(&[x, w, d], |v| {
        let y = v[0].conv1d(v[1], 2, 2, 2, (2, 1))?;
        project(y.conv1d(v[2], 1, 1, 6, (1, 1))?, 2)
    })
}

fn pointwise_conv2d(rng: &mut ChaCha8Rng) -> f64 {
    let x4 = rand_t(rng, &[2, 3, 2, 5]);
    let x3 = rand_t(rng, &[2, 3, 5]);
    let w = rand_t(rng, &[4, 3]);
    check(&[x4, x3, w], |v| {
        project(v[0].pointwise_conv2d(v[2])?, 3)?.add(project(v[1].pointwise_conv2d(v[2])?, 4)?)
    })
}

fn elementwise(rng: &mut ChaCha8Rng) -> f64 {
    let a = rand_t(rng, &[2, 3, 4]);
    let b = rand_t(rng, &[3, 1]);
    let c = rand_t(rng, &[4]);
    check(&[a, b, c], |v| {
        let s = v[0].add(v[1])?.sub(v[2])?.mul(v[0])?.mul(v[2])?.scale(-1.7)?;
        project(s, 5)
    })
}

fn shape_ops(rng: &mut ChaCha8Rng) -> f64 {
    let a = rand_t(rng, &[2, 3, 4]);
    let b = rand_t(rng, &[2, 2, 4]);
    check(&[a, b], |v| {
        let t = v[0].transpose(&[2, 0, 1])?.reshape(&[4, 6])?.transpose(&[1, 0])?.reshape(&[2, 3, 4])?;
        let c = Var::concat(&[t, v[1]], 1)?;
        let s = c.select(1, &[4, 0, 0, 2])?.narrow(2, 1, 3)?;
        project(s, 6)
    })
}

fn softmaxes(rng: &mut ChaCha8Rng) -> f64 {
    let a = rand_t(rng, &[2, 3, 4]);
    check(&[a], |v| project(v[0].softmax(1)?, 7)?.add(project(v[0].log_softmax(2)?, 8)?))
}

fn activations(rng: &mut ChaCha8Rng) -> f64 {
    let a = off_kink(rng, &[2, 3, 4]);
    let slope = rand_t(rng, &[3]);
    let shared = rand_t(rng, &[1]);
    check(&[a, slope, shared], |v| {
        let x = v[0];
        let y = x.sigmoid()?.add(x.relu()?)?.add(x.prelu(v[1])?)?.add(x.prelu(v[2])?)?;
        project(y, 9)
    })
}

fn layer_norms(rng: &mut ChaCha8Rng) -> f64 {
    let x = rand_t(rng, &[2, 3, 4]);
    let g1 = rand_t(rng, &[3, 1]);
    let b1 = rand_t(rng, &[3, 1]);
    let g2 = rand_t(rng, &[4]);
    let b2 = rand_t(rng, &[4]);
    check(&[x, g1, b1, g2, b2], |v| {
        let a = v[0].layer_norm(1, v[1], v[2], 1e-8)?;
        let b = v[0].layer_norm(2, v[3], v[4], 1e-5)?;
        project(a, 10)?.add(project(b, 11)?)
    })
}

fn reductions(rng: &mut ChaCha8Rng) -> f64 {
    let x = rand_t(rng, &[3, 5]);
    check(&[x], |v| v[0].mul(v[0])?.mean()?.add(v[0].sum()?.scale(0.3)?))
}

fn ctc(rng: &mut ChaCha8Rng) -> f64 {
    let t = 7;
    let logits = rand_t(rng, &[t, 4]);
    let target: Vec<usize> = (0..3).map(|_| rng.gen_range(1..4)).collect();
    check(&[logits], |v| {
        ctc_loss(v[0].log_softmax(1)?, &target).map_err(|e| sidecar_mtl::tensor::TensorError::Invalid {
            op: "ctc",
            msg: e.to_string(),
        })
    })
}

fn attention(rng: &mut ChaCha8Rng) -> f64 {
    let q = rand_t(rng, &[1, 2, 5, 3]);
    let k = rand_t(rng, &[1, 2, 5, 3]);
    check(&[q, k], |v| {
        let a = attention_scores(v[0], v[1], true).map_err(to_tensor_err)?;
        let b = attention_scores(v[0], v[1], false).map_err(to_tensor_err)?;
        project(a, 12)?.add(project(b, 13)?)
    })
}

fn to_tensor_err(e: sidecar_mtl::Error) -> sidecar_mtl::tensor::TensorError {
    sidecar_mtl::tensor::TensorError::Invalid {
        op: "objective",
        msg: e.to_string(),
    }
}

fn combined(rng: &mut ChaCha8Rng) -> f64 {
    let (b, s, t, v) = (2, 2, 8, 4);
    let logits = rand_t(rng, &[b * s, t, v]);
    let pre = rand_t(rng, &[b, s, t]);
    let targets: Vec<Vec<Vec<usize>>> = (0..b)
        .map(|_| {
            (0..s)
                .map(|_| (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..v)).collect())
                .collect()
        })
        .collect();
    let reference = Tensor::new(vec![b, s, t], (0..b * s * t).map(|_| f64::from(rng.gen_bool(0.5) as u8)).collect()).unwrap();
    let lambda = rng.gen_range(0.0..2.0);
    check(&[logits, pre], |x| {
        let d = x[1].sigmoid()?;
        Ok(combined_loss(x[0], &targets, d, &reference, lambda).map_err(to_tensor_err)?.loss)
    })
}

fn adaptation(rng: &mut ChaCha8Rng) -> f64 {
    let bounds = [(0usize, 6usize), (3, 9), (6, 10)];
    let pre: Vec<Tensor> = bounds.iter().map(|&(a, b)| rand_t(rng, &[2, b - a])).collect();
    let refs: Vec<Tensor> = bounds
        .iter()
        .map(|&(a, b)| Tensor::new(vec![2, b - a], (0..2 * (b - a)).map(|_| f64::from(rng.gen_bool(0.5) as u8)).collect()).unwrap())
        .collect();
    check(&pre, |x| {
        let segs = x.iter().map(|v| v.sigmoid()).collect::<Result<Vec<_>, _>>()?;
        Ok(adaptation_loss(&segs, &refs, &bounds).map_err(to_tensor_err)?.0)
    })
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        sample_rate: 800,
        frame_ms: 20,
        extractor: vec![
            ExtractorLayer {
                kernel: 4,
                stride: 4,
                channels: 3,
            },
            ExtractorLayer {
                kernel: 4,
                stride: 4,
                channels: 6,
            },
        ],
        d_model: 6,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 8,
        vocab: vec!["<blank>".into(), "a".into(), "b".into(), "c".into()],
        insertion_layer: 1,
        distance_bias: true,
    }
}

/// Full Sidecar path: embedding -> masks -> frozen upper layers -> decoder,
/// with the combined objective. Every Sidecar parameter is perturbed
/// through the parameter store.
fn end_to_end(rng: &mut ChaCha8Rng) -> f64 {
    let seed = rng.gen();
    let mut backbone = Backbone::new(tiny_backbone(), seed).unwrap();
    backbone.freeze();
    let cfg = SidecarConfig {
        io_channels: 6,
        bottleneck_channels: 3,
        hidden_channels: 4,
        blocks_per_repeat: 2,
        repeats: 1,
        n_speakers: 2,
    };
    let mut sidecar = Sidecar::new(cfg, seed).unwrap();
    // Non-zero diarization weights so the branch gradient is exercised.
    let w = rand_t(rng, &[1, 6]);
    *sidecar.params.get_mut("diar.weight").unwrap() = w.with_grad();
    let t = 8;
    let emb = rand_t(rng, &[1, 6, t]);
    let targets = vec![vec![vec![1, 2], vec![3]]];
    let reference = Tensor::new(vec![1, 2, t], (0..2 * t).map(|i| f64::from((i % 3 != 0) as u8)).collect()).unwrap();

    let loss_of = |sc: &Sidecar, grads: bool| -> (f64, Option<sidecar_mtl::nn::ParamStore>) {
        let tape = Tape::new();
        let bp = backbone.params.bind(&tape);
        let sp = sc.params.bind(&tape);
        let x = tape.constant(vec![1, 6, t], emb.data().to_vec()).unwrap();
        let (masks, sep) = sc.separate(&sp, x).unwrap();
        let d = sc.diar_activity(&sp, masks, 1).unwrap();
        let logits = backbone.decode(&bp, backbone.encode_upper(&bp, sep).unwrap()).unwrap();
        let c = combined_loss(logits, &targets, d, &reference, 0.7).unwrap();
        let value = c.loss.item().unwrap();
        if !grads {
            return (value, None);
        }
        let g = tape.backward(c.loss).unwrap();
        let mut store = sc.params.clone();
        store.absorb_grads(&sp, &g);
        (value, Some(store))
    };

    let (_, analytic) = loss_of(&sidecar, true);
    let analytic = analytic.unwrap();
    let names: Vec<String> = sidecar.params.iter().map(|(n, _)| n.clone()).collect();
    let mut worst = 0.0f64;
    for name in names {
        let n = sidecar.params.get(&name).unwrap().numel();
        for i in 0..n {
            let orig = sidecar.params.get(&name).unwrap().data()[i];
            sidecar.params.get_mut(&name).unwrap().data_mut()[i] = orig + EPS;
            let plus = loss_of(&sidecar, false).0;
            sidecar.params.get_mut(&name).unwrap().data_mut()[i] = orig - EPS;
            let minus = loss_of(&sidecar, false).0;
            sidecar.params.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * EPS);
            let a = analytic.get(&name).unwrap().grad().map_or(0.0, |g| g[i]);
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8));
        }
    }
    worst
}

pub const CASES: &[(&str, Case)] = &[
    ("matmul", matmul),
    ("conv1d", conv1d),
    ("pointwise_conv2d", pointwise_conv2d),
    ("add/sub/mul/scale", elementwise),
    ("reshape/transpose/concat/select", shape_ops),
    ("softmax/log_softmax", softmaxes),
    ("sigmoid/relu/prelu", activations),
    ("layer_norm", layer_norms),
    ("mean/sum", reductions),
    ("ctc_loss", ctc),
    ("attention_scores", attention),
    ("combined_loss", combined),
    ("adaptation_loss", adaptation),
    ("sidecar end to end", end_to_end),
];

/// Worst error per case over `seeds`.
pub fn run(seeds: std::ops::Range<u64>) -> Vec<(&'static str, f64)> {
    CASES
        .iter()
        .map(|&(name, case)| {
            let worst = seeds
                .clone()
                .map(|s| case(&mut ChaCha8Rng::seed_from_u64(1000 + s)))
                .fold(0.0f64, f64::max);
            (name, worst)
        })
        .collect()
}
