//! Synthetic tone-language corpora: single-talker utterances, left-aligned
//! and delayed multi-talker mixtures, and two-party conversations.
//!
//! Each token is a raised-cosine-gated tone whose pitch depends on both the
//! token and the speaker, so token identity is learnable while two speakers
//! saying the same token still differ.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::diarize::{to_rttm, DiarTimeline, Interval};
use crate::metrics::parse_rttm;
use crate::tensor::{read_tensor, write_tensor, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixerConfig {
    pub sample_rate: usize,
    pub frame_ms: usize,
    /// Non-blank token count.
    pub n_tokens: usize,
    /// Pitch step between consecutive tokens.
    pub token_step_hz: f64,
    pub n_profiles: usize,
    /// Speaker fundamentals are spread evenly over this range.
    pub fundamental_range_hz: (f64, f64),
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Minimum fundamental gap between speakers placed in one mixture.
    pub min_pair_separation_hz: f64,
    /// Random per-speaker gain in `[0.5, 1.0]` instead of equal gain.
    pub gain_jitter: bool,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            frame_ms: 20,
            n_tokens: 8,
            token_step_hz: 400.0,
            n_profiles: 16,
            fundamental_range_hz: (250.0, 550.0),
            min_tokens: 4,
            max_tokens: 7,
            min_pair_separation_hz: 100.0,
            gain_jitter: false,
        }
    }
}

impl MixerConfig {
    pub fn hop(&self) -> usize {
        self.sample_rate * self.frame_ms / 1000
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("mixer: {m}")));
        if self.hop() == 0 || self.sample_rate * self.frame_ms % 1000 != 0 {
            return bad("frame_ms must cover a whole number of samples");
        }
        if self.n_tokens == 0 || self.n_profiles < 2 || self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("need tokens, at least two profiles and 1 <= min_tokens <= max_tokens");
        }
        let (lo, hi) = self.fundamental_range_hz;
        if !(lo > 0.0 && hi > lo) {
            return bad("fundamental range must be positive and increasing");
        }
        if (hi - lo) / ((self.n_profiles - 1) as f64) < 10.0 {
            return bad("speaker fundamentals must be at least 10 Hz apart");
        }
        Ok(())
    }

    /// Evenly spaced fundamentals in shuffled order, each with its own
    /// second-harmonic weight and token duration range.
    pub fn profiles(&self, seed: u64) -> Result<Vec<SpeakerProfile>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = self.fundamental_range_hz;
        let step = (hi - lo) / (self.n_profiles - 1) as f64;
        let mut f0: Vec<f64> = (0..self.n_profiles).map(|i| lo + step * i as f64).collect();
        f0.shuffle(&mut rng);
        Ok(f0
            .into_iter()
            .enumerate()
            .map(|(i, f)| SpeakerProfile {
                id: format!("spk{i:02}"),
                fundamental_hz: f,
                harmonics: vec![1.0, rng.gen_range(0.0..0.5)],
                frames_per_token: (rng.gen_range(4..=5), rng.gen_range(6..=8)),
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub id: String,
    pub fundamental_hz: f64,
    /// Weights of the 1st, 2nd, .. harmonics.
    pub harmonics: Vec<f64>,
    /// Inclusive per-token duration range in frames.
    pub frames_per_token: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub waveform: Vec<f64>,
    /// Token ids in `1..=n_tokens`.
    pub transcript: Vec<usize>,
    pub speaker_id: String,
    /// Frame index where each token starts, plus the end frame.
    pub boundaries: Vec<usize>,
}

/// Renders `transcript_length` random tokens for `profile`.
pub fn gen_utterance(cfg: &MixerConfig, profile: &SpeakerProfile, transcript_length: usize, seed: u64) -> Result<Utterance> {
    if transcript_length == 0 {
        return Err(Error::Input("transcript_length must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<(usize, usize)> = (0..transcript_length)
        .map(|_| Ok((rng.gen_range(1..=cfg.n_tokens), token_frames(profile, &mut rng)?)))
        .collect::<Result<_>>()?;
    render(cfg, profile, &tokens, &mut rng)
}

fn token_frames(profile: &SpeakerProfile, rng: &mut ChaCha8Rng) -> Result<usize> {
    let (lo, hi) = profile.frames_per_token;
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!("bad token duration range {lo}..={hi}")));
    }
    Ok(rng.gen_range(lo..=hi))
}

/// Renders `(token, frames)` pairs.
fn render(cfg: &MixerConfig, profile: &SpeakerProfile, tokens: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Result<Utterance> {
    let hop = cfg.hop();
    let mut waveform = Vec::new();
    let mut boundaries = vec![0];
    for &(tok, frames) in tokens {
        let n = frames * hop;
        let freq = profile.fundamental_hz + cfg.token_step_hz * (tok - 1) as f64;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let ramp = n / 5;
        for i in 0..n {
            let t = i as f64 / cfg.sample_rate as f64;
            let tone: f64 = profile
                .harmonics
                .iter()
                .enumerate()
                .map(|(h, w)| w * (std::f64::consts::TAU * freq * (h + 1) as f64 * t + phase).sin())
                .sum();
            let edge = i.min(n - 1 - i);
            let env = if edge < ramp {
                0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            waveform.push(0.5 * tone * env);
        }
        boundaries.push(boundaries.last().expect("non-empty") + frames);
    }
    Ok(Utterance {
        waveform,
        transcript: tokens.iter().map(|t| t.0).collect(),
        speaker_id: profile.id.clone(),
        boundaries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub speaker_id: String,
    pub transcript: Vec<usize>,
    pub onset_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub id: String,
    pub waveform: Vec<f64>,
    pub sources: Vec<Source>,
    /// `(S, T)` binary frame activity in source order.
    pub activity: Tensor,
    pub timeline: DiarTimeline,
}

impl Mixture {
    pub fn frames(&self) -> usize {
        self.activity.shape()[1]
    }

    pub fn speaker_ids(&self) -> Vec<String> {
        self.sources.iter().map(|s| s.speaker_id.clone()).collect()
    }

    pub fn transcripts(&self) -> Vec<Vec<usize>> {
        self.sources.iter().map(|s| s.transcript.clone()).collect()
    }
}

/// Sums utterances placed at the given frame onsets with per-source gains.
fn place(cfg: &MixerConfig, utts: &[Utterance], onsets: &[usize], gains: &[f64]) -> Result<Mixture> {
    let hop = cfg.hop();
    let mut ids: Vec<&str> = utts.iter().map(|u| u.speaker_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Input(format!("duplicate speakers in mixture: {ids:?}")));
    }
    let frames = utts
        .iter()
        .zip(onsets)
        .map(|(u, &o)| o + u.waveform.len() / hop)
        .max()
        .unwrap_or(0);
    let mut waveform = vec![0.0; frames * hop];
    let mut activity = vec![0.0; utts.len() * frames];
    let mut timeline = DiarTimeline::default();
    let secs = |f: usize| f as f64 * cfg.frame_ms as f64 / 1000.0;
    for (s, ((u, &o), &g)) in utts.iter().zip(onsets).zip(gains).enumerate() {
        for (i, &v) in u.waveform.iter().enumerate() {
            waveform[o * hop + i] += g * v;
        }
        let len = u.waveform.len() / hop;
        activity[s * frames + o..s * frames + o + len].fill(1.0);
        timeline.intervals.push(Interval {
            speaker: u.speaker_id.clone(),
            onset: secs(o),
            offset: secs(o + len),
        });
    }
    timeline.sort();
    Ok(Mixture {
        id: String::new(),
        waveform,
        sources: utts
            .iter()
            .zip(onsets)
            .map(|(u, &o)| Source {
                speaker_id: u.speaker_id.clone(),
                transcript: u.transcript.clone(),
                onset_seconds: secs(o),
            })
            .collect(),
        activity: Tensor::new(vec![utts.len(), frames], activity)?,
        timeline,
    })
}

/// All sources start at zero and are summed with equal gain.
pub fn mix_left_aligned(cfg: &MixerConfig, utterances: &[Utterance]) -> Result<Mixture> {
    if utterances.is_empty() {
        return Err(Error::Input("mixture needs at least one utterance".into()));
    }
    place(cfg, utterances, &vec![0; utterances.len()], &vec![1.0; utterances.len()])
}

/// The first source starts at zero; each later source starts at a
/// frame-aligned onset drawn uniformly from `[0, length so far]`.
pub fn mix_delayed(cfg: &MixerConfig, utterances: &[Utterance], seed: u64) -> Result<Mixture> {
    if utterances.is_empty() {
        return Err(Error::Input("mixture needs at least one utterance".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hop = cfg.hop();
    let mut onsets = vec![0];
    let mut so_far = utterances[0].waveform.len() / hop;
    for u in &utterances[1..] {
        let o = rng.gen_range(0..=so_far);
        so_far = so_far.max(o + u.waveform.len() / hop);
        onsets.push(o);
    }
    place(cfg, utterances, &onsets, &vec![1.0; utterances.len()])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnModel {
    pub mean_turn_seconds: f64,
    pub overlap_probability: f64,
    pub max_overlap_seconds: f64,
}

impl Default for TurnModel {
    fn default() -> Self {
        Self {
            mean_turn_seconds: 3.0,
            overlap_probability: 0.2,
            max_overlap_seconds: 1.0,
        }
    }
}

/// Two speakers taking alternating turns of exponential length. At each turn
/// change the next speaker may start early, overlapping the previous turn.
pub fn gen_conversation(
    cfg: &MixerConfig,
    profiles: &[SpeakerProfile; 2],
    total_seconds: f64,
    turns: &TurnModel,
    seed: u64,
) -> Result<Mixture> {
    if profiles[0].id == profiles[1].id {
        return Err(Error::Input("conversation needs two distinct speakers".into()));
    }
    let hop = cfg.hop();
    let frame_s = cfg.frame_ms as f64 / 1000.0;
    let total = (total_seconds / frame_s).round() as usize;
    if total == 0 {
        return Err(Error::Input("conversation must last at least one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let turn_len = Exp::new(1.0 / turns.mean_turn_seconds).map_err(|e| Error::Config(e.to_string()))?;
    let mut waveform = vec![0.0; total * hop];
    let mut transcripts = vec![Vec::new(), Vec::new()];
    let mut first_onset = [None, None];
    let mut spans: [Vec<(usize, usize)>; 2] = [Vec::new(), Vec::new()];
    let (mut start, mut speaker) = (0usize, 0usize);
    while start < total {
        let target = (turn_len.sample(&mut rng) / frame_s).ceil().max(1.0) as usize;
        let p = &profiles[speaker];
        let mut tokens = Vec::new();
        let mut frames = 0;
        while frames < target {
            let f = token_frames(p, &mut rng)?;
            tokens.push((rng.gen_range(1..=cfg.n_tokens), f));
            frames += f;
        }
        let utt = render(cfg, p, &tokens, &mut rng)?;
        let len = utt.boundaries.last().copied().expect("non-empty");
        let end = (start + len).min(total);
        for (i, &v) in utt.waveform.iter().take((end - start) * hop).enumerate() {
            waveform[start * hop + i] += v;
        }
        let spoken = utt.boundaries.iter().take_while(|&&b| start + b < end).count();
        transcripts[speaker].extend_from_slice(&utt.transcript[..spoken.min(utt.transcript.len())]);
        first_onset[speaker].get_or_insert(start);
        match spans[speaker].last_mut() {
            Some(last) if last.1 >= start => last.1 = last.1.max(end),
            _ => spans[speaker].push((start, end)),
        }
        let other = 1 - speaker;
        let mut next = end;
        if rng.gen_bool(turns.overlap_probability) {
            let o = (rng.gen_range(0.0..turns.max_overlap_seconds) / frame_s).round() as usize;
            next = end - o.min(end - start);
        }
        if let Some(&(_, own_end)) = spans[other].last() {
            next = next.max(own_end);
        }
        start = next;
        speaker = other;
    }
    let secs = |f: usize| f as f64 * cfg.frame_ms as f64 / 1000.0;
    let mut timeline = DiarTimeline::default();
    let mut activity = vec![0.0; 2 * total];
    for (s, sp) in spans.iter().enumerate() {
        for &(a, b) in sp {
            activity[s * total + a..s * total + b].fill(1.0);
            timeline.intervals.push(Interval {
                speaker: profiles[s].id.clone(),
                onset: secs(a),
                offset: secs(b),
            });
        }
    }
    timeline.sort();
    Ok(Mixture {
        id: String::new(),
        waveform,
        sources: (0..2)
            .map(|s| Source {
                speaker_id: profiles[s].id.clone(),
                transcript: transcripts[s].clone(),
                onset_seconds: secs(first_onset[s].unwrap_or(0)),
            })
            .collect(),
        activity: Tensor::new(vec![2, total], activity)?,
        timeline,
    })
}

/// Fraction of speech time where both speakers talk.
pub fn overlap_fraction(activity: &Tensor) -> f64 {
    let (s, t) = (activity.shape()[0], activity.shape()[1]);
    let count = |pred: &dyn Fn(usize) -> bool| (0..t).filter(|&i| pred(i)).count() as f64;
    let active = |i: usize| (0..s).filter(|&k| activity.at(&[k, i]) > 0.5).count();
    let speech = count(&|i| active(i) >= 1);
    if speech == 0.0 {
        return 0.0;
    }
    count(&|i| active(i) >= 2) / speech
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixStyle {
    SingleTalker,
    LeftAligned,
    Delayed,
    Conversation,
}

impl std::str::FromStr for MixStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single-talker" => Ok(Self::SingleTalker),
            "left-aligned" => Ok(Self::LeftAligned),
            "delayed" => Ok(Self::Delayed),
            "conversation" => Ok(Self::Conversation),
            other => Err(Error::Config(format!(
                "unknown style `{other}` (expected single-talker, left-aligned, delayed or conversation)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub style: MixStyle,
    pub speakers: usize,
    pub count: usize,
    pub seed: u64,
    /// Conversation length.
    pub seconds: f64,
    pub id_prefix: String,
}

fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Picks `n` distinct speakers whose fundamentals are pairwise at least
/// `min_pair_separation_hz` apart.
fn pick_speakers<'p>(cfg: &MixerConfig, pool: &'p [SpeakerProfile], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<&'p SpeakerProfile>> {
    for _ in 0..10_000 {
        let pick: Vec<&SpeakerProfile> = pool.choose_multiple(rng, n).collect();
        let ok = pick.iter().enumerate().all(|(i, a)| {
            pick[i + 1..]
                .iter()
                .all(|b| (a.fundamental_hz - b.fundamental_hz).abs() >= cfg.min_pair_separation_hz)
        });
        if pick.len() == n && ok {
            return Ok(pick);
        }
    }
    Err(Error::Config(format!(
        "cannot find {n} speakers separated by {} Hz in a pool of {}",
        cfg.min_pair_separation_hz,
        pool.len()
    )))
}

/// Generates a corpus; a pure function of `(cfg, pool, spec)`.
pub fn gen_corpus(cfg: &MixerConfig, pool: &[SpeakerProfile], spec: &CorpusSpec) -> Result<Vec<Mixture>> {
    cfg.validate()?;
    let need = match spec.style {
        MixStyle::SingleTalker => 1,
        MixStyle::Conversation => 2,
        _ => spec.speakers,
    };
    if matches!(spec.style, MixStyle::LeftAligned | MixStyle::Delayed) && !(2..=4).contains(&spec.speakers) {
        return Err(Error::Config(format!("mixtures need 2 to 4 speakers, got {}", spec.speakers)));
    }
    if need > pool.len() {
        return Err(Error::Config(format!("{need} speakers requested from a pool of {}", pool.len())));
    }
    (0..spec.count)
        .map(|i| {
            let mut rng = item_rng(spec.seed, i);
            let who = pick_speakers(cfg, pool, need, &mut rng)?;
            let utt = |p: &SpeakerProfile, rng: &mut ChaCha8Rng| {
                let len = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
                gen_utterance(cfg, p, len, rng.gen())
            };
            let mut m = match spec.style {
                MixStyle::SingleTalker | MixStyle::LeftAligned => {
                    let us = who.iter().map(|p| utt(p, &mut rng)).collect::<Result<Vec<_>>>()?;
                    let gains: Vec<f64> = us
                        .iter()
                        .map(|_| if cfg.gain_jitter { rng.gen_range(0.5..=1.0) } else { 1.0 })
                        .collect();
                    place(cfg, &us, &vec![0; us.len()], &gains)?
                }
                MixStyle::Delayed => {
                    let us = who.iter().map(|p| utt(p, &mut rng)).collect::<Result<Vec<_>>>()?;
                    mix_delayed(cfg, &us, rng.gen())?
                }
                MixStyle::Conversation => {
                    let pair = [who[0].clone(), who[1].clone()];
                    gen_conversation(cfg, &pair, spec.seconds, &TurnModel::default(), rng.gen())?
                }
            };
            m.id = format!("{}{i:05}", spec.id_prefix);
            Ok(m)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSpeaker {
    pub id: String,
    /// Space-separated token symbols.
    pub transcript: String,
    pub onset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub id: String,
    pub audio_path: String,
    pub speakers: Vec<ManifestSpeaker>,
    pub rttm_path: String,
}

pub const MANIFEST: &str = "manifest.jsonl";

pub fn tokens_to_text(tokens: &[usize], vocab: &[String]) -> String {
    tokens.iter().map(|&t| vocab[t].as_str()).collect::<Vec<_>>().join(" ")
}

pub fn text_to_tokens(text: &str, vocab: &[String]) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| {
            vocab
                .iter()
                .skip(1)
                .position(|v| v == w)
                .map(|i| i + 1)
                .ok_or_else(|| Error::Input(format!("unknown token `{w}`")))
        })
        .collect()
}

/// Writes `manifest.jsonl`, `audio/<id>.sdtn` and `rttm/<id>.rttm` under
/// `dir`. Transcripts are stored as symbols from `vocab` (blank at 0).
pub fn write_manifest(mixtures: &[Mixture], dir: &Path, vocab: &[String]) -> Result<PathBuf> {
    for sub in ["audio", "rttm"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let path = dir.join(MANIFEST);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    for m in mixtures {
        if m.id.is_empty() || m.id.contains(|c: char| c.is_whitespace() || c == '/' || c == '\\') {
            return Err(Error::Input(format!("recording id `{}` must be non-empty without whitespace or path separators", m.id)));
        }
        if m.sources.iter().flat_map(|s| &s.transcript).any(|&t| t == 0 || t >= vocab.len()) {
            return Err(Error::Input(format!("{}: transcript token outside the vocabulary", m.id)));
        }
        let audio = format!("audio/{}.sdtn", m.id);
        let rttm = format!("rttm/{}.rttm", m.id);
        let apath = dir.join(&audio);
        let f = File::create(&apath).map_err(|e| Error::io(&apath, e))?;
        let wave = Tensor::new(vec![m.waveform.len()], m.waveform.clone())?;
        write_tensor(BufWriter::new(f), &wave)?;
        let rpath = dir.join(&rttm);
        fs::write(&rpath, to_rttm(&m.timeline, &m.id)).map_err(|e| Error::io(&rpath, e))?;
        let line = ManifestLine {
            id: m.id.clone(),
            audio_path: audio,
            speakers: m
                .sources
                .iter()
                .map(|s| ManifestSpeaker {
                    id: s.speaker_id.clone(),
                    transcript: tokens_to_text(&s.transcript, vocab),
                    onset: s.onset_seconds,
                })
                .collect(),
            rttm_path: rttm,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Moves endpoints lying on the frame grid (up to rounding from the RTTM
/// onset plus duration) exactly onto it.
fn snap_to_frames(mut tl: DiarTimeline, frame_ms: usize) -> DiarTimeline {
    let snap = |x: f64| {
        let f = x * 1000.0 / frame_ms as f64;
        if (f - f.round()).abs() < 1e-6 {
            f.round() * frame_ms as f64 / 1000.0
        } else {
            x
        }
    };
    for iv in &mut tl.intervals {
        iv.onset = snap(iv.onset);
        iv.offset = snap(iv.offset);
    }
    tl.sort();
    tl
}

/// Reads a corpus written by [`write_manifest`].
pub fn read_manifest(dir: &Path, vocab: &[String], frame_ms: usize, sample_rate: usize) -> Result<Vec<Mixture>> {
    let path = dir.join(MANIFEST);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let hop = sample_rate * frame_ms / 1000;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            msg: e.to_string(),
        })?;
        let apath = dir.join(&entry.audio_path);
        let f = File::open(&apath).map_err(|e| Error::io(&apath, e))?;
        let wave = read_tensor(BufReader::new(f))?;
        let rpath = dir.join(&entry.rttm_path);
        let text = fs::read_to_string(&rpath).map_err(|e| Error::io(&rpath, e))?;
        let timeline = snap_to_frames(parse_rttm(&text)?, frame_ms);
        let ids: Vec<String> = entry.speakers.iter().map(|s| s.id.clone()).collect();
        let activity = timeline.to_activity(&ids, wave.numel() / hop, frame_ms)?;
        let sources = entry
            .speakers
            .iter()
            .map(|s| {
                Ok(Source {
                    speaker_id: s.id.clone(),
                    transcript: text_to_tokens(&s.transcript, vocab)?,
                    onset_seconds: s.onset,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Mixture {
            id: entry.id,
            waveform: wave.data().to_vec(),
            sources,
            activity,
            timeline,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> MixerConfig {
        MixerConfig::default()
    }

    fn fixed(frames: usize, id: &str, f0: f64) -> SpeakerProfile {
        SpeakerProfile {
            id: id.into(),
            fundamental_hz: f0,
            harmonics: vec![1.0, 0.3],
            frames_per_token: (frames, frames),
        }
    }

    #[test]
    fn utterance_determinism_and_duration() {
        let p = fixed(10, "a", 300.0);
        let u = gen_utterance(&cfg(), &p, 5, 9).unwrap();
        assert_eq!(u.waveform.len(), 8000);
        assert_eq!(u.boundaries, vec![0, 10, 20, 30, 40, 50]);
        assert_eq!(u, gen_utterance(&cfg(), &p, 5, 9).unwrap());
        let q = fixed(10, "b", 400.0);
        assert_ne!(u.waveform, gen_utterance(&cfg(), &q, 5, 9).unwrap().waveform);
        assert!(gen_utterance(&cfg(), &p, 0, 9).is_err());
    }

    #[test]
    fn profiles_are_distinct() {
        let ps = cfg().profiles(3).unwrap();
        for (i, a) in ps.iter().enumerate() {
            for b in &ps[i + 1..] {
                assert!((a.fundamental_hz - b.fundamental_hz).abs() >= 10.0);
            }
        }
    }

    #[test]
    fn left_aligned_activity() {
        let c = cfg();
        let a = gen_utterance(&c, &fixed(10, "a", 300.0), 5, 1).unwrap();
        let b = gen_utterance(&c, &fixed(5, "b", 420.0), 5, 2).unwrap();
        let m = mix_left_aligned(&c, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(m.waveform.len(), 8000);
        let row: Vec<f64> = (0..50).map(|t| m.activity.at(&[1, t])).collect();
        assert!(row[..25].iter().all(|&v| v == 1.0) && row[25..].iter().all(|&v| v == 0.0));
        for i in 0..8000 {
            let expect = a.waveform[i] + b.waveform.get(i).copied().unwrap_or(0.0);
            assert_eq!(m.waveform[i], expect);
        }
        assert!(mix_left_aligned(&c, &[a.clone(), a]).is_err());
    }

    #[test]
    fn delayed_onsets() {
        let c = cfg();
        let a = gen_utterance(&c, &fixed(10, "a", 300.0), 3, 1).unwrap();
        let b = gen_utterance(&c, &fixed(10, "b", 420.0), 3, 2).unwrap();
        let m = mix_delayed(&c, &[a.clone(), b.clone()], 5).unwrap();
        assert_eq!(m, mix_delayed(&c, &[a, b], 5).unwrap());
        let onset = m.sources[1].onset_seconds;
        let f = (onset / 0.02).round() as usize;
        assert!(f <= 30);
        assert_eq!(m.activity.at(&[1, f]), 1.0);
        if f > 0 {
            assert_eq!(m.activity.at(&[1, f - 1]), 0.0);
        }
    }

    #[test]
    fn conversation_invariants() {
        let c = cfg();
        let ps = c.profiles(1).unwrap();
        let pair = [ps[0].clone(), ps[1].clone()];
        let m = gen_conversation(&c, &pair, 73.0, &TurnModel::default(), 4).unwrap();
        assert_eq!(m.frames(), 3650);
        assert_eq!(m, gen_conversation(&c, &pair, 73.0, &TurnModel::default(), 4).unwrap());
        for spk in m.timeline.speakers() {
            let mut iv: Vec<_> = m.timeline.intervals.iter().filter(|i| i.speaker == spk).collect();
            iv.sort_by(|a, b| a.onset.total_cmp(&b.onset));
            assert!(iv.windows(2).all(|w| w[0].offset < w[1].onset));
        }
        let back = m.timeline.to_activity(&m.speaker_ids(), m.frames(), 20).unwrap();
        assert_eq!(back, m.activity);
    }

    #[test]
    fn corpus_is_reproducible() {
        let c = cfg();
        let pool = c.profiles(0).unwrap();
        let spec = CorpusSpec {
            style: MixStyle::LeftAligned,
            speakers: 3,
            count: 4,
            seed: 7,
            seconds: 0.0,
            id_prefix: "mix".into(),
        };
        let a = gen_corpus(&c, &pool, &spec).unwrap();
        assert_eq!(a, gen_corpus(&c, &pool, &spec).unwrap());
        assert!(a.iter().all(|m| m.sources.len() == 3));
        assert_eq!(a[2].id, "mix00002");
        assert!("diagonal".parse::<MixStyle>().is_err());
    }
}
