//! Training loops and inference for the backbone and Sidecar.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::diarize::{plan_segments, stitch, timeline_from_activity, DiarTimeline, SegmentActivity, SegmentPlan};
use crate::metrics::{der_seconds, permuted_wer, EvalReport, UtteranceReport};
use crate::mixer::Mixture;
use crate::objectives::{adaptation_loss, combined_loss, ctc_loss, greedy_decode};
use crate::optim::{Adam, TriStageSchedule};
use crate::sidecar::{activity_to_decisions, Sidecar};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 4,
            learning_rate: 2e-4,
            seed: 0,
            clip_norm: Some(5.0),
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub ctc: f64,
    pub diar: f64,
    pub lr: f64,
}

fn batch_indices(rng: &mut ChaCha8Rng, len: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.gen_range(0..len)).collect()
}

fn check_finite(step: usize, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step })
    }
}

fn wave_var<'t>(tape: &'t Tape, backbone: &Backbone, waveform: &[f64]) -> Result<Var<'t>> {
    let samples = backbone.frame_aligned(waveform)?;
    tape.constant(vec![1, 1, samples.len()], samples.to_vec())
        .map_err(Into::into)
}

/// Single-talker CTC training of every backbone parameter. Returns the
/// per-step losses (mean over the batch of CTC loss per target token).
pub fn pretrain_single_talker(
    backbone: &mut Backbone,
    data: &[Mixture],
    opts: &TrainOptions,
    mut log: impl FnMut(&StepLog),
) -> Result<Vec<f64>> {
    if backbone.is_frozen() {
        return Err(Error::Config("cannot pretrain a frozen backbone".into()));
    }
    if opts.steps > 0 && (data.is_empty() || opts.batch_size == 0) {
        return Err(Error::Input("pretraining needs data and a positive batch size".into()));
    }
    if let Some(m) = data.iter().find(|m| m.sources.len() != 1) {
        return Err(Error::Input(format!("{} is not a single-talker item", m.id)));
    }
    let schedule = TriStageSchedule::new(opts.learning_rate, opts.steps);
    let mut adam = Adam::new(opts.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut curve = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let tape = Tape::new();
        let p = backbone.params.bind(&tape);
        let mut total: Option<Var<'_>> = None;
        for i in batch_indices(&mut rng, data.len(), opts.batch_size) {
            let m = &data[i];
            let logits = backbone.forward(&p, wave_var(&tape, backbone, &m.waveform)?)?;
            let (t, v) = (logits.dim(1), logits.dim(2));
            let lp = logits.reshape(&[t, v])?.log_softmax(1)?;
            let target = &m.sources[0].transcript;
            let l = ctc_loss(lp, target)?.scale(1.0 / target.len().max(1) as f64)?;
            total = Some(match total {
                Some(acc) => acc.add(l)?,
                None => l,
            });
        }
        let loss = total.expect("non-empty batch").scale(1.0 / opts.batch_size as f64)?;
        let value = loss.item()?;
        check_finite(step, value)?;
        let grads = tape.backward(loss)?;
        backbone.params.absorb_grads(&p, &grads);
        let lr = schedule.lr(step);
        adam.step(&mut backbone.params, lr);
        let entry = StepLog {
            step,
            loss: value,
            ctc: value,
            diar: 0.0,
            lr,
        };
        log(&entry);
        curve.push(value);
    }
    Ok(curve)
}

/// Greedy transcripts for single-talker audio.
pub fn transcribe(backbone: &Backbone, waveform: &[f64]) -> Result<Vec<usize>> {
    let tape = Tape::new();
    let p = backbone.params.bind(&tape);
    let logits = backbone.forward(&p, wave_var(&tape, backbone, waveform)?)?;
    Ok(greedy_decode(&logits.value(), logits.dim(2)))
}

/// Pooled token error rate of the plain backbone on single-talker data.
pub fn token_error_rate(backbone: &Backbone, data: &[Mixture]) -> Result<f64> {
    let mut pooled: Option<crate::metrics::WerBreakdown> = None;
    for m in data {
        let hyp = transcribe(backbone, &m.waveform)?;
        let (w, _) = permuted_wer(&m.transcripts(), &[hyp]);
        pooled = Some(pooled.map_or(w, |p| p.merge(&w)));
    }
    Ok(pooled.map_or(0.0, |p| p.wer))
}

/// Frozen backbone with a trainable Sidecar at its insertion point.
#[derive(Clone, Debug)]
pub struct MultiTalker {
    pub backbone: Backbone,
    pub sidecar: Sidecar,
}

impl MultiTalker {
    pub fn new(mut backbone: Backbone, sidecar: Sidecar) -> Result<Self> {
        if sidecar.config.io_channels != backbone.config.d_model {
            return Err(Error::Config(format!(
                "sidecar io_channels {} must equal backbone d_model {}",
                sidecar.config.io_channels, backbone.config.d_model
            )));
        }
        backbone.freeze();
        Ok(Self { backbone, sidecar })
    }

    pub fn speakers(&self) -> usize {
        self.sidecar.config.n_speakers
    }

    /// `(C, T)` embedding after the lower encoder layers.
    pub fn lower_embedding(&self, waveform: &[f64]) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.backbone.params.bind(&tape);
        let f = self.backbone.features(&p, wave_var(&tape, &self.backbone, waveform)?)?;
        let e = self.backbone.encode_lower(&p, f)?.to_tensor();
        let (c, t) = (e.shape()[1], e.shape()[2]);
        Ok(e.reshape(vec![c, t])?)
    }

    /// Logits `(S, T, V)` and activities `(1, S, T)` for one cached embedding.
    fn forward_embedding<'t>(
        &self,
        tape: &'t Tape,
        bp: &crate::nn::Bound<'t>,
        sp: &crate::nn::Bound<'t>,
        embedding: &Tensor,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (c, t) = (embedding.shape()[0], embedding.shape()[1]);
        let x = tape.constant(vec![1, c, t], embedding.data().to_vec())?;
        let (masks, separated) = self.sidecar.separate(sp, x)?;
        let d = self.sidecar.diar_activity(sp, masks, 1)?;
        let logits = self.backbone.decode(bp, self.backbone.encode_upper(bp, separated)?)?;
        Ok((logits, d))
    }

    /// Per-stream greedy transcripts and `(S, T)` activity probabilities.
    pub fn infer(&self, waveform: &[f64]) -> Result<(Vec<Vec<usize>>, Tensor)> {
        let e = self.lower_embedding(waveform)?;
        self.infer_embedding(&e)
    }

    fn infer_embedding(&self, e: &Tensor) -> Result<(Vec<Vec<usize>>, Tensor)> {
        let tape = Tape::new();
        let bp = self.backbone.params.bind(&tape);
        let sp = self.sidecar.params.bind(&tape);
        let (logits, d) = self.forward_embedding(&tape, &bp, &sp, e)?;
        let (s, t, v) = (logits.dim(0), logits.dim(1), logits.dim(2));
        let values = logits.value();
        let hyps = (0..s).map(|i| greedy_decode(&values[i * t * v..(i + 1) * t * v], v)).collect();
        Ok((hyps, d.to_tensor().reshape(vec![s, t])?))
    }

    /// Activities `(S, T)` only; the upper encoder is skipped.
    pub fn activity(&self, waveform: &[f64]) -> Result<Tensor> {
        let e = self.lower_embedding(waveform)?;
        Ok(self.sidecar.infer(&e)?.1)
    }

    /// Segments, aligns and averages activities over a long recording, then
    /// thresholds once.
    pub fn diarize_long(&self, waveform: &[f64], plan: &SegmentPlan) -> Result<(DiarTimeline, usize)> {
        let hop = self.backbone.config.total_stride();
        let frames = waveform.len() / hop;
        let bounds = plan_segments(frames, plan)?;
        let segments = bounds
            .iter()
            .map(|&(a, b)| {
                Ok(SegmentActivity {
                    activity: self.activity(&waveform[a * hop..b * hop])?,
                    start_frame: a,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let global = stitch(&segments)?;
        let tl = timeline_from_activity(&activity_to_decisions(&global), plan.frame_ms)?;
        Ok((tl, bounds.len()))
    }
}

fn check_speakers(model: &MultiTalker, data: &[Mixture]) -> Result<()> {
    match data.iter().find(|m| m.sources.len() != model.speakers()) {
        Some(m) => Err(Error::Input(format!(
            "{} has {} speakers but the model separates {}",
            m.id,
            m.sources.len(),
            model.speakers()
        ))),
        None => Ok(()),
    }
}

/// Outcome of a Sidecar training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub losses: Vec<f64>,
    pub backbone_sha256_before: String,
    pub backbone_sha256_after: String,
}

/// Trains the Sidecar, its flanking convolutions and the diarization branch
/// against PIT-CTC plus `lambda` times the diarization MSE. The backbone is
/// frozen, so its lower-layer embeddings are computed once per mixture.
pub fn train_sidecar(
    model: &mut MultiTalker,
    data: &[Mixture],
    lambda: f64,
    opts: &TrainOptions,
    mut log: impl FnMut(&StepLog),
) -> Result<TrainSummary> {
    check_speakers(model, data)?;
    if opts.steps > 0 && (data.is_empty() || opts.batch_size == 0) {
        return Err(Error::Input("sidecar training needs data and a positive batch size".into()));
    }
    let before = model.backbone.params.sha256();
    let cache = data.iter().map(|m| model.lower_embedding(&m.waveform)).collect::<Result<Vec<_>>>()?;
    let schedule = TriStageSchedule::new(opts.learning_rate, opts.steps);
    let mut adam = Adam::new(opts.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let tape = Tape::new();
        let bp = model.backbone.params.bind(&tape);
        let sp = model.sidecar.params.bind(&tape);
        let mut total: Option<Var<'_>> = None;
        let (mut ctc, mut diar) = (0.0, 0.0);
        for i in batch_indices(&mut rng, data.len(), opts.batch_size) {
            let m = &data[i];
            let (logits, d) = model.forward_embedding(&tape, &bp, &sp, &cache[i])?;
            let t = logits.dim(1);
            let reference = fit_frames(&m.activity, t).reshape(vec![1, m.sources.len(), t])?;
            let c = combined_loss(logits, &[m.transcripts()], d, &reference, lambda)?;
            ctc += c.ctc;
            diar += c.diar;
            total = Some(match total {
                Some(acc) => acc.add(c.loss)?,
                None => c.loss,
            });
        }
        let scale = 1.0 / opts.batch_size as f64;
        let loss = total.expect("non-empty batch").scale(scale)?;
        let value = loss.item()?;
        check_finite(step, value)?;
        let grads = tape.backward(loss)?;
        model.sidecar.params.absorb_grads(&sp, &grads);
        let lr = schedule.lr(step);
        adam.step(&mut model.sidecar.params, lr);
        log(&StepLog {
            step,
            loss: value,
            ctc: ctc * scale,
            diar: diar * scale,
            lr,
        });
        losses.push(value);
    }
    Ok(TrainSummary {
        losses,
        backbone_sha256_before: before,
        backbone_sha256_after: model.backbone.params.sha256(),
    })
}

/// Pads with zeros or truncates a `(S, T)` activity to `frames` columns.
fn fit_frames(activity: &Tensor, frames: usize) -> Tensor {
    let (s, t) = (activity.shape()[0], activity.shape()[1]);
    let data = (0..s)
        .flat_map(|i| (0..frames).map(move |j| if j < t { activity.at(&[i, j]) } else { 0.0 }))
        .collect();
    Tensor::new(vec![s, frames], data).expect("sized by construction")
}

/// Diarization-only adaptation on long recordings, one recording per step,
/// using every segment of the plan.
pub fn adapt_diarization(
    model: &mut MultiTalker,
    data: &[Mixture],
    plan: &SegmentPlan,
    opts: &TrainOptions,
    mut log: impl FnMut(&StepLog),
) -> Result<TrainSummary> {
    check_speakers(model, data)?;
    if opts.steps > 0 && data.is_empty() {
        return Err(Error::Input("adaptation needs data".into()));
    }
    let before = model.backbone.params.sha256();
    let hop = model.backbone.config.total_stride();
    let mut cache = Vec::with_capacity(data.len());
    for m in data {
        let frames = m.waveform.len() / hop;
        let bounds = plan_segments(frames, plan)?;
        let segs = bounds
            .iter()
            .map(|&(a, b)| model.lower_embedding(&m.waveform[a * hop..b * hop]))
            .collect::<Result<Vec<_>>>()?;
        cache.push((bounds, segs));
    }
    let schedule = TriStageSchedule::new(opts.learning_rate, opts.steps);
    let mut adam = Adam::new(opts.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut losses = Vec::with_capacity(opts.steps);
    let s = model.speakers();
    for step in 0..opts.steps {
        let i = rng.gen_range(0..data.len());
        let (bounds, segs) = &cache[i];
        let tape = Tape::new();
        let sp = model.sidecar.params.bind(&tape);
        let mut ds = Vec::with_capacity(segs.len());
        let mut refs = Vec::with_capacity(segs.len());
        for (&(a, b), e) in bounds.iter().zip(segs) {
            let (c, t) = (e.shape()[0], e.shape()[1]);
            let x = tape.constant(vec![1, c, t], e.data().to_vec())?;
            let (masks, _) = model.sidecar.separate(&sp, x)?;
            ds.push(model.sidecar.diar_activity(&sp, masks, 1)?.reshape(&[s, t])?);
            refs.push(columns(&data[i].activity, a, b));
        }
        let (loss, _) = adaptation_loss(&ds, &refs, bounds)?;
        let value = loss.item()?;
        check_finite(step, value)?;
        let grads = tape.backward(loss)?;
        model.sidecar.params.absorb_grads(&sp, &grads);
        let lr = schedule.lr(step);
        adam.step(&mut model.sidecar.params, lr);
        log(&StepLog {
            step,
            loss: value,
            ctc: 0.0,
            diar: value,
            lr,
        });
        losses.push(value);
    }
    Ok(TrainSummary {
        losses,
        backbone_sha256_before: before,
        backbone_sha256_after: model.backbone.params.sha256(),
    })
}

fn columns(t: &Tensor, from: usize, to: usize) -> Tensor {
    let rows = t.shape()[0];
    let data = (0..rows).flat_map(|s| (from..to).map(move |c| t.at(&[s, c]))).collect();
    Tensor::new(vec![rows, to - from], data).expect("sized by construction")
}

/// Permuted token error and collar DER on short mixtures, scored without
/// segmentation.
pub fn evaluate_mixtures(model: &MultiTalker, data: &[Mixture], collar: f64) -> Result<EvalReport> {
    check_speakers(model, data)?;
    let frame_ms = model.backbone.config.frame_ms;
    let mut per = Vec::with_capacity(data.len());
    for m in data {
        let (hyps, d) = model.infer(&m.waveform)?;
        let (w, _) = permuted_wer(&m.transcripts(), &hyps);
        let hyp_tl = timeline_from_activity(&activity_to_decisions(&d), frame_ms)?;
        per.push(UtteranceReport {
            id: m.id.clone(),
            wer: Some(w),
            der: Some(der_seconds(&m.timeline, &hyp_tl, collar)?),
            hypotheses: None,
        });
    }
    Ok(EvalReport::from_utterances(per))
}

/// DER of stitched diarization on long recordings.
pub fn evaluate_conversations(model: &MultiTalker, data: &[Mixture], plan: &SegmentPlan, collar: f64) -> Result<EvalReport> {
    check_speakers(model, data)?;
    let mut per = Vec::with_capacity(data.len());
    for m in data {
        let (tl, _) = model.diarize_long(&m.waveform, plan)?;
        per.push(UtteranceReport {
            id: m.id.clone(),
            der: Some(der_seconds(&m.timeline, &tl, collar)?),
            ..Default::default()
        });
    }
    Ok(EvalReport::from_utterances(per))
}
