//! Permutation-minimized word error rate and collar-based diarization error
//! rate, plus the RTTM reader.

use serde::{Deserialize, Serialize};

use crate::diarize::{DiarTimeline, Interval};
use crate::perm::{argmin, permutations, Permutation};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Unit-cost Levenshtein alignment. Among minimal alignments the one with
/// the fewest substitutions wins; remaining ties resolve match, then
/// substitution, then deletion, then insertion while tracing back.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    // (cost, substitutions) per cell
    let mut dp = vec![(0usize, 0usize); (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = (i, 0);
    }
    for j in 0..=m {
        dp[j] = (j, 0);
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = dp[(i - 1) * w + j - 1];
            let diag = if reference[i - 1] == hypothesis[j - 1] {
                diag
            } else {
                (diag.0 + 1, diag.1 + 1)
            };
            let del = dp[(i - 1) * w + j];
            let ins = dp[i * w + j - 1];
            dp[i * w + j] = diag.min((del.0 + 1, del.1)).min((ins.0 + 1, ins.1));
        }
    }
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let diag = dp[(i - 1) * w + j - 1];
            if reference[i - 1] == hypothesis[j - 1] && diag == here {
                i -= 1;
                j -= 1;
                continue;
            }
            if reference[i - 1] != hypothesis[j - 1] && (diag.0 + 1, diag.1 + 1) == here {
                counts.substitutions += 1;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 {
            let del = dp[(i - 1) * w + j];
            if (del.0 + 1, del.1) == here {
                counts.deletions += 1;
                i -= 1;
                continue;
            }
        }
        counts.insertions += 1;
        j -= 1;
    }
    counts
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_words: usize,
    pub wer: f64,
}

impl WerBreakdown {
    pub fn new(counts: EditCounts, reference_words: usize) -> Self {
        Self {
            substitutions: counts.substitutions,
            insertions: counts.insertions,
            deletions: counts.deletions,
            reference_words,
            wer: counts.errors() as f64 / reference_words.max(1) as f64,
        }
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Pools counts, then recomputes the ratio.
    pub fn merge(&self, other: &Self) -> Self {
        Self::new(
            EditCounts {
                substitutions: self.substitutions + other.substitutions,
                insertions: self.insertions + other.insertions,
                deletions: self.deletions + other.deletions,
            },
            self.reference_words + other.reference_words,
        )
    }
}

/// Error counts under the hypothesis-to-reference assignment with the fewest
/// total errors. The shorter list is padded with empty sequences;
/// `perm[s]` is the hypothesis stream scored against reference `s`.
pub fn permuted_wer<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> (WerBreakdown, Permutation) {
    let n = refs.len().max(hyps.len());
    fn get<T>(v: &[Vec<T>], i: usize) -> &[T] {
        v.get(i).map_or(&[], |x| &x[..])
    }
    let mut table = vec![EditCounts::default(); n * n];
    for s in 0..n {
        for h in 0..n {
            table[s * n + h] = edit_distance(get(refs, s), get(hyps, h));
        }
    }
    let perms = permutations(n);
    let total = |p: &Permutation| p.iter().enumerate().map(|(s, &h)| table[s * n + h].errors()).sum::<usize>() as f64;
    let (best, _) = argmin(perms.iter().map(total)).expect("at least one permutation");
    let perm = perms[best].clone();
    let mut counts = EditCounts::default();
    for (s, &h) in perm.iter().enumerate() {
        let c = table[s * n + h];
        counts.substitutions += c.substitutions;
        counts.insertions += c.insertions;
        counts.deletions += c.deletions;
    }
    let words = refs.iter().map(Vec::len).sum();
    (WerBreakdown::new(counts, words), perm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerBreakdown {
    pub miss_seconds: f64,
    pub falarm_seconds: f64,
    pub confusion_seconds: f64,
    pub scored_speech_seconds: f64,
    pub mi: f64,
    pub fa: f64,
    pub cf: f64,
    pub der: f64,
    /// Hypothesis speaker to reference speaker.
    pub mapping: Vec<(String, String)>,
}

struct Region {
    dur: f64,
    reference: Vec<usize>,
    hypothesis: Vec<usize>,
}

fn active(tl: &DiarTimeline, speakers: &[String], t: f64) -> Vec<usize> {
    let mut out: Vec<usize> = tl
        .intervals
        .iter()
        .filter(|i| i.onset <= t && t < i.offset)
        .map(|i| speakers.iter().position(|s| *s == i.speaker).expect("speaker listed"))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Diarization error with a no-score collar around every reference boundary
/// and a single best speaker mapping for the recording. Overlapped speech is
/// scored.
pub fn der(reference: &DiarTimeline, hypothesis: &DiarTimeline, collar: f64) -> Result<DerBreakdown> {
    let d = der_seconds(reference, hypothesis, collar)?;
    if d.scored_speech_seconds <= 0.0 {
        return Err(Error::Input("no scored reference speech; DER is undefined".into()));
    }
    Ok(d)
}

/// Like [`der`], but a recording without scored speech yields zero seconds
/// and zero rates instead of an error, so it can still be pooled.
pub fn der_seconds(reference: &DiarTimeline, hypothesis: &DiarTimeline, collar: f64) -> Result<DerBreakdown> {
    if !(collar >= 0.0) {
        return Err(Error::Input(format!("collar must be >= 0, got {collar}")));
    }
    for (name, tl) in [("reference", reference), ("hypothesis", hypothesis)] {
        if let Some(i) = tl.intervals.iter().find(|i| !(i.offset > i.onset)) {
            return Err(Error::Input(format!("{name} interval {i:?} has offset <= onset")));
        }
    }
    let rspk = reference.speakers();
    let hspk = hypothesis.speakers();
    let n = rspk.len().max(hspk.len());
    if n > 6 {
        return Err(Error::Input(format!("speaker mapping search limited to 6 speakers, got {n}")));
    }
    let ref_edges: Vec<f64> = reference.intervals.iter().flat_map(|i| [i.onset, i.offset]).collect();
    let mut cuts: Vec<f64> = ref_edges
        .iter()
        .flat_map(|&b| [b - collar, b, b + collar])
        .chain(hypothesis.intervals.iter().flat_map(|i| [i.onset, i.offset]))
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut regions = Vec::new();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mid = 0.5 * (a + b);
        if b <= a || ref_edges.iter().any(|&e| (mid - e).abs() < collar) {
            continue;
        }
        let r = active(reference, &rspk, mid);
        let h = active(hypothesis, &hspk, mid);
        if !r.is_empty() || !h.is_empty() {
            regions.push(Region {
                dur: b - a,
                reference: r,
                hypothesis: h,
            });
        }
    }
    // overlap[h][r]: scored time where both are active
    let mut overlap = vec![0.0; n * n];
    for reg in &regions {
        for &h in &reg.hypothesis {
            for &r in &reg.reference {
                overlap[h * n + r] += reg.dur;
            }
        }
    }
    let perms = permutations(n);
    let gain = |p: &Permutation| -> f64 { -(0..n).map(|h| overlap[h * n + p[h]]).sum::<f64>() };
    let (best, _) = argmin(perms.iter().map(gain)).expect("at least one permutation");
    let map = &perms[best];

    let (mut miss, mut fa, mut conf, mut scored) = (0.0, 0.0, 0.0, 0.0);
    for reg in &regions {
        let (nr, nh) = (reg.reference.len(), reg.hypothesis.len());
        let correct = reg.hypothesis.iter().filter(|&&h| reg.reference.contains(&map[h])).count();
        scored += nr as f64 * reg.dur;
        miss += nr.saturating_sub(nh) as f64 * reg.dur;
        fa += nh.saturating_sub(nr) as f64 * reg.dur;
        conf += (nr.min(nh) - correct) as f64 * reg.dur;
    }
    let mapping = hspk
        .iter()
        .enumerate()
        .filter_map(|(h, name)| rspk.get(map[h]).map(|r| (name.clone(), r.clone())))
        .collect();
    let rate = |x: f64| if scored > 0.0 { x / scored } else { 0.0 };
    let (mi, fa_r, cf) = (rate(miss), rate(fa), rate(conf));
    Ok(DerBreakdown {
        miss_seconds: miss,
        falarm_seconds: fa,
        confusion_seconds: conf,
        scored_speech_seconds: scored,
        mi,
        fa: fa_r,
        cf,
        der: mi + fa_r + cf,
        mapping,
    })
}

/// Reads `SPEAKER` lines. Blank lines and `;` comments are skipped.
pub fn parse_rttm(text: &str) -> Result<DiarTimeline> {
    let mut tl = DiarTimeline::default();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with(';') {
            continue;
        }
        let err = |msg: String| Error::Parse { line: n + 1, msg };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 8 || f[0] != "SPEAKER" {
            return Err(err(format!("expected a SPEAKER line with at least 8 fields, got `{line}`")));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(format!("{what} `{s}` is not a number"))),
            }
        };
        let onset = num(f[3], "onset")?;
        let dur = num(f[4], "duration")?;
        if dur <= 0.0 || onset < 0.0 {
            return Err(err(format!("interval at {onset} with duration {dur} is empty or negative")));
        }
        tl.intervals.push(Interval {
            speaker: f[7].to_string(),
            onset,
            offset: onset + dur,
        });
    }
    Ok(tl)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerSummary {
    pub mi: f64,
    pub fa: f64,
    pub cf: f64,
    pub der: f64,
}

/// Pools seconds across recordings.
pub fn pool_der(parts: &[DerBreakdown]) -> Option<DerSummary> {
    let scored: f64 = parts.iter().map(|d| d.scored_speech_seconds).sum();
    if scored <= 0.0 {
        return None;
    }
    let sum = |f: fn(&DerBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / scored;
    let (mi, fa, cf) = (sum(|d| d.miss_seconds), sum(|d| d.falarm_seconds), sum(|d| d.confusion_seconds));
    Some(DerSummary {
        mi,
        fa,
        cf,
        der: mi + fa + cf,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UtteranceReport {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wer: Option<WerBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub der: Option<DerBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hypotheses: Option<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub wer: Option<WerBreakdown>,
    pub der: Option<DerSummary>,
    pub per_utterance: Vec<UtteranceReport>,
}

impl EvalReport {
    pub fn from_utterances(per_utterance: Vec<UtteranceReport>) -> Self {
        let wer = per_utterance
            .iter()
            .filter_map(|u| u.wer)
            .reduce(|a, b| a.merge(&b));
        let ders: Vec<DerBreakdown> = per_utterance.iter().filter_map(|u| u.der.clone()).collect();
        Self {
            wer,
            der: pool_der(&ders),
            per_utterance,
        }
    }
}
