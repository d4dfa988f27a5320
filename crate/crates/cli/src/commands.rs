use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use sidecar_mtl::backbone::Backbone;
use sidecar_mtl::checkpoint::{load_backbone, load_model, save_backbone, save_model};
use sidecar_mtl::diarize::{timeline_from_activity, to_rttm};
use sidecar_mtl::metrics::{der_seconds, permuted_wer, EvalReport, UtteranceReport};
use sidecar_mtl::mixer::{gen_corpus, read_manifest, tokens_to_text, write_manifest, Mixture};
use sidecar_mtl::sidecar::{self, activity_to_decisions, Sidecar};
use sidecar_mtl::tensor::read_tensor;
use sidecar_mtl::train::{self, MultiTalker, StepLog};

use crate::config::{style_name, RunConfig};
use crate::CliError;

pub type Handler = fn(&RunConfig) -> Result<(), CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// Writes to `output` when set, otherwise stdout.
fn emit(config: &RunConfig, text: &str) -> Result<(), CliError> {
    match &config.output {
        Some(path) => std::fs::write(path, text).map_err(|e| io_err(path, e)),
        None => {
            println!("{}", text.trim_end());
            Ok(())
        }
    }
}

fn emit_json(config: &RunConfig, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    emit(config, &text)
}

fn load_corpus(config: &RunConfig, dir: &Path) -> Result<Vec<Mixture>, CliError> {
    Ok(read_manifest(dir, &config.vocab, config.frame_ms, config.sample_rate)?)
}

#[derive(Serialize)]
struct LogLine {
    step: usize,
    loss: f64,
    ctc: f64,
    diar: f64,
}

/// Append-only JSON-lines log, flushed after every line.
struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
    failed: Option<std::io::Error>,
}

impl MetricsLog {
    fn create(path: PathBuf) -> Result<Self, CliError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
            failed: None,
        })
    }

    fn record(&mut self, s: &StepLog) {
        if self.failed.is_some() {
            return;
        }
        let line = LogLine {
            step: s.step,
            loss: s.loss,
            ctc: s.ctc,
            diar: s.diar,
        };
        let res = serde_json::to_writer(&mut self.out, &line)
            .map_err(std::io::Error::from)
            .and_then(|_| self.out.write_all(b"\n"))
            .and_then(|_| self.out.flush());
        self.failed = res.err();
    }

    fn finish(mut self) -> Result<(), CliError> {
        match self.failed.take() {
            Some(e) => Err(io_err(&self.path, e)),
            None => self.out.flush().map_err(|e| io_err(&self.path, e)),
        }
    }
}

fn metrics_path(config: &RunConfig, checkpoint: &Path) -> PathBuf {
    config
        .metrics_log
        .clone()
        .unwrap_or_else(|| checkpoint.join("metrics.jsonl"))
}

pub fn gen_data(config: &RunConfig) -> Result<(), CliError> {
    let dir = config.require(&config.data, "data")?;
    let mixer = config.mixer();
    let pool = mixer.profiles(config.profile_seed)?;
    let corpus = gen_corpus(&mixer, &pool, &config.corpus())?;
    let manifest = write_manifest(&corpus, dir, &config.vocab)?;
    emit_json(
        config,
        &json!({
            "manifest": manifest,
            "style": style_name(config.style),
            "count": corpus.len(),
            "seconds": corpus.iter().map(|m| m.waveform.len() as f64).sum::<f64>() / config.sample_rate as f64,
        }),
    )
}

pub fn pretrain(config: &RunConfig) -> Result<(), CliError> {
    let data = config.require(&config.data, "data")?;
    let out = config.require(&config.checkpoint, "checkpoint")?;
    let corpus = load_corpus(config, data)?;
    let mut backbone = Backbone::new(config.backbone(), config.seed)?;
    let mut log = MetricsLog::create(metrics_path(config, out))?;
    let curve = train::pretrain_single_talker(&mut backbone, &corpus, &config.train_options(), |s| log.record(s));
    log.finish()?;
    let curve = curve?;
    save_backbone(out, &backbone)?;
    emit_json(
        config,
        &json!({
            "steps": curve.len(),
            "final_loss": curve.last(),
            "backbone_sha256": backbone.params.sha256(),
        }),
    )
}

pub fn train_sidecar(config: &RunConfig) -> Result<(), CliError> {
    let data = config.require(&config.data, "data")?;
    let init = config.require(&config.init_checkpoint, "init_checkpoint")?;
    let out = config.require(&config.checkpoint, "checkpoint")?;
    let mut backbone = load_backbone(init)?;
    backbone.config.insertion_layer = config.insertion_layer;
    backbone.config.validate()?;
    let mut scfg = config.sidecar();
    scfg.io_channels = backbone.config.d_model;
    let mut model = MultiTalker::new(backbone, Sidecar::new(scfg, config.seed)?)?;
    let corpus = load_corpus(config, data)?;
    let mut log = MetricsLog::create(metrics_path(config, out))?;
    let summary = train::train_sidecar(&mut model, &corpus, config.lambda, &config.train_options(), |s| log.record(s));
    log.finish()?;
    let summary = summary?;
    save_model(out, &model)?;
    emit_json(
        config,
        &json!({
            "steps": summary.losses.len(),
            "final_loss": summary.losses.last(),
            "backbone_sha256_before": summary.backbone_sha256_before,
            "backbone_sha256_after": summary.backbone_sha256_after,
        }),
    )
}

pub fn adapt_diar(config: &RunConfig) -> Result<(), CliError> {
    let data = config.require(&config.data, "data")?;
    let init = config.require(&config.init_checkpoint, "init_checkpoint")?;
    let out = config.require(&config.checkpoint, "checkpoint")?;
    let mut model = load_model(init)?;
    let corpus = load_corpus(config, data)?;
    let mut log = MetricsLog::create(metrics_path(config, out))?;
    let summary = train::adapt_diarization(&mut model, &corpus, &config.plan(), &config.train_options(), |s| log.record(s));
    log.finish()?;
    let summary = summary?;
    save_model(out, &model)?;
    emit_json(
        config,
        &json!({
            "steps": summary.losses.len(),
            "final_loss": summary.losses.last(),
            "backbone_sha256_before": summary.backbone_sha256_before,
            "backbone_sha256_after": summary.backbone_sha256_after,
        }),
    )
}

fn check_speakers(model: &MultiTalker, corpus: &[Mixture]) -> Result<(), CliError> {
    match corpus.iter().find(|m| m.sources.len() != model.speakers()) {
        Some(m) => Err(CliError::Data(format!(
            "{} has {} speakers but the checkpoint separates {}",
            m.id,
            m.sources.len(),
            model.speakers()
        ))),
        None => Ok(()),
    }
}

pub fn eval_asr(config: &RunConfig) -> Result<(), CliError> {
    let ckpt = config.require(&config.checkpoint, "checkpoint")?;
    let data = config.require(&config.data, "data")?;
    let model = load_model(ckpt)?;
    let corpus = load_corpus(config, data)?;
    check_speakers(&model, &corpus)?;
    let vocab = &model.backbone.config.vocab;
    let per = corpus
        .iter()
        .map(|m| {
            let (hyps, _) = model.infer(&m.waveform)?;
            let (w, perm) = permuted_wer(&m.transcripts(), &hyps);
            Ok(UtteranceReport {
                id: m.id.clone(),
                wer: Some(w),
                der: None,
                hypotheses: Some(perm.iter().map(|&h| tokens_to_text(&hyps[h], vocab)).collect()),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    emit_json(config, &EvalReport::from_utterances(per))
}

pub fn eval_der(config: &RunConfig) -> Result<(), CliError> {
    let ckpt = config.require(&config.checkpoint, "checkpoint")?;
    let data = config.require(&config.data, "data")?;
    let model = load_model(ckpt)?;
    let corpus = load_corpus(config, data)?;
    check_speakers(&model, &corpus)?;
    let plan = config.plan();
    let hop = model.backbone.config.total_stride();
    let per = corpus
        .iter()
        .map(|m| {
            let hyp = if m.waveform.len() / hop > plan.segment_frames() {
                model.diarize_long(&m.waveform, &plan)?.0
            } else {
                timeline_from_activity(&activity_to_decisions(&model.activity(&m.waveform)?), plan.frame_ms)?
            };
            Ok(UtteranceReport {
                id: m.id.clone(),
                der: Some(der_seconds(&m.timeline, &hyp, config.collar)?),
                ..Default::default()
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    emit_json(config, &EvalReport::from_utterances(per))
}

pub fn diarize(config: &RunConfig) -> Result<(), CliError> {
    let ckpt = config.require(&config.checkpoint, "checkpoint")?;
    let audio = config.require(&config.audio, "audio")?;
    let model = load_model(ckpt)?;
    let file = File::open(audio).map_err(|e| io_err(audio, e))?;
    let wave = read_tensor(std::io::BufReader::new(file)).map_err(|e| CliError::Data(format!("{}: {e}", audio.display())))?;
    if wave.shape().len() != 1 {
        return Err(CliError::Data(format!("{}: expected a 1-D waveform, got shape {:?}", audio.display(), wave.shape())));
    }
    let (timeline, _) = model.diarize_long(wave.data(), &config.plan())?;
    let id = audio.file_stem().and_then(|s| s.to_str()).unwrap_or("recording");
    emit(config, &to_rttm(&timeline, id))
}

pub fn param_report(config: &RunConfig) -> Result<(), CliError> {
    emit_json(config, &sidecar::param_report(&config.backbone(), &config.sidecar()))
}
