//! End-to-end toy run: pretrain, freeze, train the Sidecar, evaluate.
//!
//! Knobs are read from the environment, e.g.
//! `TOY_PRETRAIN_STEPS=2000 TOY_SIDECAR_STEPS=3000 cargo run --release --example toy`.

use std::path::PathBuf;
use std::time::Instant;

use sidecar_mtl::backbone::{Backbone, BackboneConfig};
use sidecar_mtl::checkpoint::{load_backbone, save_backbone};
use sidecar_mtl::mixer::{gen_corpus, CorpusSpec, MixStyle, MixerConfig};
use sidecar_mtl::sidecar::{Sidecar, SidecarConfig};
use sidecar_mtl::train::{evaluate_mixtures, pretrain_single_talker, token_error_rate, train_sidecar, MultiTalker, TrainOptions};

fn knob<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn corpus(cfg: &MixerConfig, style: MixStyle, count: usize, seed: u64, prefix: &str) -> Vec<sidecar_mtl::mixer::Mixture> {
    let pool = cfg.profiles(0).expect("valid mixer config");
    let spec = CorpusSpec {
        style,
        speakers: 2,
        count,
        seed,
        seconds: 0.0,
        id_prefix: prefix.into(),
    };
    gen_corpus(cfg, &pool, &spec).expect("corpus")
}

fn main() -> sidecar_mtl::Result<()> {
    let mut mix = MixerConfig::default();
    mix.min_pair_separation_hz = knob("TOY_MIN_SEP", 150.0);
    mix.fundamental_range_hz = (knob("TOY_F0_LO", mix.fundamental_range_hz.0), knob("TOY_F0_HI", mix.fundamental_range_hz.1));
    let mut bcfg = BackboneConfig::toy();
    bcfg.insertion_layer = knob("TOY_INSERTION", 1);
    let cache: Option<PathBuf> = std::env::var("TOY_BACKBONE_DIR").ok().map(PathBuf::from);

    let backbone = match cache.as_ref().filter(|d| d.join("checkpoint.json").exists()) {
        Some(dir) => {
            let mut b = load_backbone(dir)?;
            b.config.insertion_layer = bcfg.insertion_layer;
            b
        }
        None => {
            let mut b = Backbone::new(bcfg, knob("TOY_SEED", 0))?;
            let train = corpus(&mix, MixStyle::SingleTalker, knob("TOY_PRETRAIN_ITEMS", 2000), 1, "st");
            let opts = TrainOptions {
                steps: knob("TOY_PRETRAIN_STEPS", 2000),
                batch_size: knob("TOY_PRETRAIN_BATCH", 8),
                learning_rate: knob("TOY_PRETRAIN_LR", 1e-3),
                seed: knob("TOY_SEED", 0),
                clip_norm: Some(5.0),
            };
            let t0 = Instant::now();
            pretrain_single_talker(&mut b, &train, &opts, |s| {
                if s.step % 250 == 0 {
                    eprintln!("pretrain {} loss {:.4} ({:.0?})", s.step, s.loss, t0.elapsed());
                }
            })?;
            eprintln!("pretrain done in {:.1?}", t0.elapsed());
            if let Some(dir) = &cache {
                save_backbone(dir, &b)?;
            }
            b
        }
    };
    let held_out = corpus(&mix, MixStyle::SingleTalker, 200, 7, "st-test");
    eprintln!("single-talker TER {:.4}", token_error_rate(&backbone, &held_out)?);

    let mut scfg = SidecarConfig::toy();
    scfg.bottleneck_channels = knob("TOY_BOTTLENECK", scfg.bottleneck_channels);
    scfg.hidden_channels = knob("TOY_HIDDEN", scfg.hidden_channels);
    scfg.blocks_per_repeat = knob("TOY_BLOCKS", scfg.blocks_per_repeat);
    scfg.repeats = knob("TOY_REPEATS", scfg.repeats);
    let mut model = MultiTalker::new(backbone, Sidecar::new(scfg, knob("TOY_SEED", 0))?)?;
    let train = corpus(&mix, MixStyle::LeftAligned, knob("TOY_MIX_ITEMS", 500), 2, "mix");
    let test = corpus(&mix, MixStyle::LeftAligned, 100, 8, "mix-test");
    let opts = TrainOptions {
        steps: knob("TOY_SIDECAR_STEPS", 3000),
        batch_size: knob("TOY_SIDECAR_BATCH", 4),
        learning_rate: knob("TOY_SIDECAR_LR", 2e-3),
        seed: knob("TOY_SEED", 0),
        clip_norm: Some(5.0),
    };
    let lambda = knob("TOY_LAMBDA", 0.01);
    let t0 = Instant::now();
    let summary = train_sidecar(&mut model, &train, lambda, &opts, |s| {
        if s.step % 250 == 0 {
            eprintln!("sidecar {} loss {:.4} ctc {:.4} diar {:.4} ({:.0?})", s.step, s.loss, s.ctc, s.diar, t0.elapsed());
        }
    })?;
    eprintln!("sidecar done in {:.1?}", t0.elapsed());
    let train_eval = evaluate_mixtures(&model, &train[..100], 0.25)?;
    let report = evaluate_mixtures(&model, &test, 0.25)?;
    if std::env::var("TOY_SHOW").is_ok() {
        for m in test.iter().take(12) {
            let (hyps, _) = model.infer(&m.waveform)?;
            let f0: Vec<String> = m.sources.iter().map(|s| s.speaker_id.clone()).collect();
            eprintln!("{:?} ref {:?} hyp {:?}", f0, m.transcripts(), hyps);
        }
    }
    println!(
        "train TER {:.4} DER {:.4} | held-out TER {:.4} DER {:.4} | backbone unchanged {}",
        train_eval.wer.map_or(f64::NAN, |w| w.wer),
        train_eval.der.map_or(f64::NAN, |d| d.der),
        report.wer.map_or(f64::NAN, |w| w.wer),
        report.der.map_or(f64::NAN, |d| d.der),
        summary.backbone_sha256_before == summary.backbone_sha256_after
    );
    Ok(())
}
