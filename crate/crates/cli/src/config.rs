//! Flat run configuration: defaults, then a JSON file, then the seed
//! environment variable, then `--key value` flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use sidecar_mtl::backbone::{BackboneConfig, ExtractorLayer};
use sidecar_mtl::diarize::SegmentPlan;
use sidecar_mtl::mixer::{CorpusSpec, MixStyle, MixerConfig};
use sidecar_mtl::sidecar::SidecarConfig;
use sidecar_mtl::train::TrainOptions;

use crate::CliError;

pub const SEED_ENV: &str = "SIDECAR_MTL_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub max_updates: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub collar: f64,

    /// Corpus directory: written by gen-data, read by every other command.
    pub data: Option<PathBuf>,
    /// Checkpoint written by training commands and read by evaluation.
    pub checkpoint: Option<PathBuf>,
    /// Starting checkpoint: a backbone for train-sidecar, a full model for
    /// adapt-diar.
    pub init_checkpoint: Option<PathBuf>,
    /// Defaults to `<checkpoint>/metrics.jsonl`.
    pub metrics_log: Option<PathBuf>,
    /// Waveform container for diarize.
    pub audio: Option<PathBuf>,
    /// Report or RTTM destination; stdout when unset.
    pub output: Option<PathBuf>,

    pub style: MixStyle,
    pub speakers: usize,
    pub count: usize,
    pub conversation_seconds: f64,
    pub profile_seed: u64,
    pub n_profiles: usize,
    pub fundamental_range_hz: (f64, f64),
    pub token_step_hz: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_pair_separation_hz: f64,
    pub gain_jitter: bool,

    pub sample_rate: usize,
    pub frame_ms: usize,
    pub extractor: Vec<ExtractorLayer>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab: Vec<String>,
    pub insertion_layer: usize,
    pub distance_bias: bool,

    pub bottleneck_channels: usize,
    pub hidden_channels: usize,
    pub blocks_per_repeat: usize,
    pub repeats: usize,
    pub n_speakers: usize,

    pub segment_seconds: f64,
    pub shared_seconds: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BackboneConfig::toy();
        let s = SidecarConfig::toy();
        let m = MixerConfig::default();
        let p = SegmentPlan::default();
        let t = TrainOptions::default();
        Self {
            seed: t.seed,
            lambda: 0.01,
            learning_rate: t.learning_rate,
            max_updates: t.steps,
            batch_size: t.batch_size,
            clip_norm: t.clip_norm,
            collar: 0.25,
            data: None,
            checkpoint: None,
            init_checkpoint: None,
            metrics_log: None,
            audio: None,
            output: None,
            style: MixStyle::LeftAligned,
            speakers: 2,
            count: 500,
            conversation_seconds: 90.0,
            profile_seed: 0,
            n_profiles: m.n_profiles,
            fundamental_range_hz: m.fundamental_range_hz,
            token_step_hz: m.token_step_hz,
            min_tokens: m.min_tokens,
            max_tokens: m.max_tokens,
            min_pair_separation_hz: m.min_pair_separation_hz,
            gain_jitter: m.gain_jitter,
            sample_rate: b.sample_rate,
            frame_ms: b.frame_ms,
            extractor: b.extractor,
            d_model: b.d_model,
            n_layers: b.n_layers,
            n_heads: b.n_heads,
            ffn_dim: b.ffn_dim,
            vocab: b.vocab,
            insertion_layer: b.insertion_layer,
            distance_bias: b.distance_bias,
            bottleneck_channels: s.bottleneck_channels,
            hidden_channels: s.hidden_channels,
            blocks_per_repeat: s.blocks_per_repeat,
            repeats: s.repeats,
            n_speakers: s.n_speakers,
            segment_seconds: p.segment_seconds,
            shared_seconds: p.shared_seconds,
        }
    }
}

/// Parses a flag value as JSON, falling back to a plain string.
fn flag_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Splits `--key value` pairs; `--key=value` is accepted too.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, Value)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(CliError::Usage(format!("expected `--key value`, found `{arg}`")));
        };
        let (key, raw) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Usage(format!("flag `--{flag}` needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), flag_value(&raw)));
    }
    Ok(out)
}

impl RunConfig {
    /// Layers the config file, the seed variable and the flags over the
    /// defaults. Unknown keys and ill-typed values are usage errors.
    pub fn resolve(file: Option<&Path>, seed_env: Option<&str>, overrides: &[(String, Value)]) -> Result<Self, CliError> {
        let mut map = match serde_json::to_value(Self::default()).expect("defaults serialize") {
            Value::Object(m) => m,
            _ => unreachable!("struct serializes to an object"),
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let Value::Object(user) = serde_json::from_str::<Value>(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
            else {
                return Err(CliError::Usage(format!("config {} must be a JSON object", path.display())));
            };
            merge(&mut map, user, "config file")?;
        }
        if let Some(raw) = seed_env {
            let seed: u64 = raw
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
            map.insert("seed".into(), seed.into());
        }
        merge(&mut map, overrides.iter().cloned().collect(), "flag")?;
        serde_json::from_value(Value::Object(map)).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            sample_rate: self.sample_rate,
            frame_ms: self.frame_ms,
            extractor: self.extractor.clone(),
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            vocab: self.vocab.clone(),
            insertion_layer: self.insertion_layer,
            distance_bias: self.distance_bias,
        }
    }

    pub fn sidecar(&self) -> SidecarConfig {
        SidecarConfig {
            io_channels: self.d_model,
            bottleneck_channels: self.bottleneck_channels,
            hidden_channels: self.hidden_channels,
            blocks_per_repeat: self.blocks_per_repeat,
            repeats: self.repeats,
            n_speakers: self.n_speakers,
        }
    }

    pub fn plan(&self) -> SegmentPlan {
        SegmentPlan {
            segment_seconds: self.segment_seconds,
            shared_seconds: self.shared_seconds,
            frame_ms: self.frame_ms,
        }
    }

    pub fn mixer(&self) -> MixerConfig {
        MixerConfig {
            sample_rate: self.sample_rate,
            frame_ms: self.frame_ms,
            n_tokens: self.vocab.len().saturating_sub(1),
            token_step_hz: self.token_step_hz,
            n_profiles: self.n_profiles,
            fundamental_range_hz: self.fundamental_range_hz,
            min_tokens: self.min_tokens,
            max_tokens: self.max_tokens,
            min_pair_separation_hz: self.min_pair_separation_hz,
            gain_jitter: self.gain_jitter,
        }
    }

    pub fn corpus(&self) -> CorpusSpec {
        CorpusSpec {
            style: self.style,
            speakers: self.speakers,
            count: self.count,
            seed: self.seed,
            seconds: self.conversation_seconds,
            id_prefix: format!("{}-{}-", style_name(self.style), self.seed),
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.max_updates,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            clip_norm: self.clip_norm,
        }
    }

    /// Checks every sub-configuration without touching the filesystem.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: sidecar_mtl::Error| CliError::Usage(e.to_string());
        self.backbone().validate().map_err(usage)?;
        self.sidecar().validate().map_err(usage)?;
        self.plan().validate().map_err(usage)?;
        self.mixer().validate().map_err(usage)?;
        let bad = |m: String| Err(CliError::Usage(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be positive when set".into());
        }
        if !(self.collar >= 0.0 && self.collar.is_finite()) {
            return bad(format!("collar must be finite and >= 0, got {}", self.collar));
        }
        if !(self.conversation_seconds > 0.0) {
            return bad("conversation_seconds must be positive".into());
        }
        Ok(())
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
        value
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("this command needs `{key}` (config key or --{key})")))
    }

    /// `key = default` lines for `--help`.
    pub fn defaults_help() -> String {
        let Value::Object(map) = serde_json::to_value(Self::default()).expect("defaults serialize") else {
            unreachable!("struct serializes to an object")
        };
        let mut out = String::from("Configuration keys (JSON file or --key value; flags win):\n");
        for (k, v) in map {
            out.push_str(&format!("  {k} = {v}\n"));
        }
        out.push_str(&format!("Environment: {SEED_ENV} overrides `seed` from the file; a --seed flag still wins.\n"));
        out.push_str("Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.\n");
        out
    }
}

fn merge(map: &mut Map<String, Value>, layer: Map<String, Value>, origin: &str) -> Result<(), CliError> {
    for (k, v) in layer {
        if !map.contains_key(&k) {
            return Err(CliError::Usage(format!("unknown {origin} key `{k}`")));
        }
        map.insert(k, v);
    }
    Ok(())
}

pub fn style_name(style: MixStyle) -> &'static str {
    match style {
        MixStyle::SingleTalker => "single-talker",
        MixStyle::LeftAligned => "left-aligned",
        MixStyle::Delayed => "delayed",
        MixStyle::Conversation => "conversation",
    }
}
