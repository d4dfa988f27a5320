//! Long-recording diarization: overlapping segments, stream alignment across
//! segments, averaging of shared frames, and RTTM output.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::perm::{argmin, is_permutation, permutations, Permutation};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentPlan {
    pub segment_seconds: f64,
    pub shared_seconds: f64,
    pub frame_ms: usize,
}

impl Default for SegmentPlan {
    fn default() -> Self {
        Self {
            segment_seconds: 30.0,
            shared_seconds: 15.0,
            frame_ms: 20,
        }
    }
}

impl SegmentPlan {
    fn frames(&self, seconds: f64) -> usize {
        (seconds * 1000.0 / self.frame_ms as f64).round() as usize
    }

    pub fn segment_frames(&self) -> usize {
        self.frames(self.segment_seconds)
    }

    pub fn shared_frames(&self) -> usize {
        self.frames(self.shared_seconds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_ms == 0 || !(self.shared_seconds > 0.0 && self.shared_seconds < self.segment_seconds) {
            return Err(Error::Config(format!(
                "segment plan needs 0 < shared ({}) < segment ({}) and frame_ms > 0",
                self.shared_seconds, self.segment_seconds
            )));
        }
        if self.shared_frames() == 0 || self.shared_frames() >= self.segment_frames() {
            return Err(Error::Config("segment hop must be at least one frame".into()));
        }
        Ok(())
    }
}

/// `[start, end)` frame ranges covering `0..total_frames`.
pub fn plan_segments(total_frames: usize, plan: &SegmentPlan) -> Result<Vec<(usize, usize)>> {
    plan.validate()?;
    if total_frames == 0 {
        return Err(Error::Input("cannot segment an empty recording".into()));
    }
    let (len, hop) = (plan.segment_frames(), plan.segment_frames() - plan.shared_frames());
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + len).min(total_frames);
        out.push((start, end));
        if end == total_frames {
            return Ok(out);
        }
        start += hop;
    }
}

fn sq_dist(prev: &Tensor, next: &Tensor, perm: &[usize]) -> f64 {
    let t = prev.shape()[1];
    let (p, n) = (prev.data(), next.data());
    perm.iter()
        .enumerate()
        .map(|(s, &a)| (0..t).map(|i| (p[s * t + i] - n[a * t + i]).powi(2)).sum::<f64>())
        .sum()
}

/// Permutation of `next`'s streams closest to `prev` in summed squared
/// distance over the shared `(S, T_sh)` frames. Row `s` of the aligned
/// segment is `next[perm[s]]`.
pub fn align_permutation(prev: &Tensor, next: &Tensor) -> Result<Permutation> {
    if prev.shape() != next.shape() || prev.shape().len() != 2 || prev.shape()[0] == 0 {
        return Err(Error::Input(format!(
            "align_permutation needs equal (S, T) shapes, got {:?} and {:?}",
            prev.shape(),
            next.shape()
        )));
    }
    let all = permutations(prev.shape()[0]);
    let (best, _) = argmin(all.iter().map(|p| sq_dist(prev, next, p))).expect("non-empty");
    Ok(all[best].clone())
}

/// Per-frame probabilities `(S, T_seg)` for one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentActivity {
    pub activity: Tensor,
    pub start_frame: usize,
}

impl SegmentActivity {
    pub fn end_frame(&self) -> usize {
        self.start_frame + self.activity.shape()[1]
    }
}

fn reorder(t: &Tensor, perm: &[usize]) -> Tensor {
    let cols = t.shape()[1];
    let data = perm.iter().flat_map(|&s| t.data()[s * cols..(s + 1) * cols].iter().copied()).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn columns(t: &Tensor, from: usize, to: usize) -> Tensor {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let data = (0..rows).flat_map(|s| t.data()[s * cols + from..s * cols + to].iter().copied()).collect();
    Tensor::new(vec![rows, to - from], data).expect("sized by construction")
}

/// Joins segment activities into one `(S, T_total)` tensor and returns the
/// permutation applied to each segment.
pub fn stitch_with_perms(segments: &[SegmentActivity]) -> Result<(Tensor, Vec<Permutation>)> {
    let first = segments.first().ok_or_else(|| Error::Input("nothing to stitch".into()))?;
    if first.start_frame != 0 {
        return Err(Error::Input(format!("first segment starts at frame {}", first.start_frame)));
    }
    let streams = first.activity.shape()[0];
    for (i, seg) in segments.iter().enumerate() {
        let s = seg.activity.shape();
        if s.len() != 2 || s[0] != streams || s[1] == 0 {
            return Err(Error::Input(format!("segment {i} has shape {s:?}, expected ({streams}, T>0)")));
        }
        if i > 0 {
            let prev = &segments[i - 1];
            if seg.start_frame <= prev.start_frame || seg.start_frame >= prev.end_frame() || seg.end_frame() < prev.end_frame() {
                return Err(Error::Input(format!(
                    "segment {i} [{}, {}) must start inside segment {} [{}, {}) and extend past it",
                    seg.start_frame,
                    seg.end_frame(),
                    i - 1,
                    prev.start_frame,
                    prev.end_frame()
                )));
            }
        }
        if i > 1 && seg.start_frame < segments[i - 2].end_frame() {
            return Err(Error::Input(format!("segment {i} overlaps more than one predecessor")));
        }
    }

    let mut aligned: Vec<Tensor> = Vec::with_capacity(segments.len());
    let mut perms = Vec::with_capacity(segments.len());
    for (i, seg) in segments.iter().enumerate() {
        let perm = if i == 0 {
            crate::perm::identity(streams)
        } else {
            let prev = &segments[i - 1];
            let off = seg.start_frame - prev.start_frame;
            let shared = prev.end_frame() - seg.start_frame;
            let a = columns(&aligned[i - 1], off, off + shared);
            let b = columns(&seg.activity, 0, shared);
            align_permutation(&a, &b)?
        };
        aligned.push(reorder(&seg.activity, &perm));
        perms.push(perm);
    }

    let total = segments.last().expect("non-empty").end_frame();
    let mut sum = vec![0.0; streams * total];
    let mut count = vec![0u32; total];
    for (seg, act) in segments.iter().zip(&aligned) {
        let len = act.shape()[1];
        for t in 0..len {
            count[seg.start_frame + t] += 1;
            for s in 0..streams {
                sum[s * total + seg.start_frame + t] += act.data()[s * len + t];
            }
        }
    }
    for s in 0..streams {
        for t in 0..total {
            sum[s * total + t] /= count[t] as f64;
        }
    }
    Ok((Tensor::new(vec![streams, total], sum)?, perms))
}

/// Joins segment activities into one `(S, T_total)` tensor.
pub fn stitch(segments: &[SegmentActivity]) -> Result<Tensor> {
    stitch_with_perms(segments).map(|(t, _)| t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub speaker: String,
    pub onset: f64,
    pub offset: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiarTimeline {
    pub intervals: Vec<Interval>,
}

impl DiarTimeline {
    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.intervals.iter().map(|i| i.speaker.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    /// Orders intervals by onset, then speaker.
    pub fn sort(&mut self) {
        self.intervals
            .sort_by(|a, b| a.onset.total_cmp(&b.onset).then_with(|| a.speaker.cmp(&b.speaker)));
    }

    /// Same intervals with endpoints within `tol` seconds.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        let (mut a, mut b) = (self.clone(), other.clone());
        a.sort();
        b.sort();
        a.intervals.len() == b.intervals.len()
            && a.intervals.iter().zip(&b.intervals).all(|(x, y)| {
                x.speaker == y.speaker && (x.onset - y.onset).abs() <= tol && (x.offset - y.offset).abs() <= tol
            })
    }

    /// Frame-level `(S, frames)` binary activity for the given speaker order.
    /// Frame `t` is active when its start lies inside an interval.
    pub fn to_activity(&self, speakers: &[String], frames: usize, frame_ms: usize) -> Result<Tensor> {
        let mut data = vec![0.0; speakers.len() * frames];
        let fs = frame_ms as f64 / 1000.0;
        for iv in &self.intervals {
            let s = speakers
                .iter()
                .position(|x| *x == iv.speaker)
                .ok_or_else(|| Error::Input(format!("speaker {} not in {speakers:?}", iv.speaker)))?;
            let from = (iv.onset / fs).round().max(0.0) as usize;
            let to = ((iv.offset / fs).round() as usize).min(frames);
            for t in from..to {
                data[s * frames + t] = 1.0;
            }
        }
        Ok(Tensor::new(vec![speakers.len(), frames], data)?)
    }
}

/// Maximal runs of active frames in a binary `(S, T)` tensor, labelled
/// `spk<s>`.
pub fn timeline_from_activity(binary: &Tensor, frame_ms: usize) -> Result<DiarTimeline> {
    let &[streams, frames] = binary.shape() else {
        return Err(Error::Input(format!("expected (S, T) activity, got {:?}", binary.shape())));
    };
    let secs = |t: usize| t as f64 * frame_ms as f64 / 1000.0;
    let mut tl = DiarTimeline::default();
    for s in 0..streams {
        let row = &binary.data()[s * frames..(s + 1) * frames];
        let mut t = 0;
        while t < frames {
            if row[t] > 0.5 {
                let start = t;
                while t < frames && row[t] > 0.5 {
                    t += 1;
                }
                tl.intervals.push(Interval {
                    speaker: format!("spk{s}"),
                    onset: secs(start),
                    offset: secs(t),
                });
            } else {
                t += 1;
            }
        }
    }
    tl.sort();
    Ok(tl)
}

/// One `SPEAKER` line per interval, sorted by onset then speaker.
pub fn to_rttm(timeline: &DiarTimeline, recording_id: &str) -> String {
    let mut tl = timeline.clone();
    tl.sort();
    let mut out = String::new();
    for iv in &tl.intervals {
        writeln!(
            out,
            "SPEAKER {recording_id} 1 {:.2} {:.2} <NA> <NA> {} <NA> <NA>",
            iv.onset,
            iv.offset - iv.onset,
            iv.speaker
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// Stitched, thresholded timeline for a long recording given per-segment
/// activities.
pub fn diarize_segments(segments: &[SegmentActivity], frame_ms: usize) -> Result<DiarTimeline> {
    let global = stitch(segments)?;
    timeline_from_activity(&crate::sidecar::activity_to_decisions(&global), frame_ms)
}

/// Applies `perm` to the rows of an `(S, T)` tensor.
pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    if t.shape().len() != 2 || !is_permutation(perm) || perm.len() != t.shape()[0] {
        return Err(Error::Input(format!("cannot permute {:?} rows by {perm:?}", t.shape())));
    }
    Ok(reorder(t, perm))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
    }

    #[test]
    fn plan_arithmetic() {
        let p = SegmentPlan::default();
        assert_eq!(plan_segments(3000, &p).unwrap(), vec![(0, 1500), (750, 2250), (1500, 3000)]);
        assert_eq!(plan_segments(1500, &p).unwrap(), vec![(0, 1500)]);
        assert_eq!(plan_segments(1200, &p).unwrap(), vec![(0, 1200)]);
        assert_eq!(plan_segments(1550, &p).unwrap(), vec![(0, 1500), (750, 1550)]);
        assert!(plan_segments(0, &p).is_err());
        let bad = SegmentPlan {
            shared_seconds: 30.0,
            ..p
        };
        assert!(plan_segments(100, &bad).is_err());
    }

    #[test]
    fn alignment_examples() {
        let prev = t2(&[&[1.0, 1.0], &[0.0, 0.0]]);
        let next = t2(&[&[0.0, 0.0], &[1.0, 1.0]]);
        assert_eq!(align_permutation(&prev, &next).unwrap(), vec![1, 0]);
        let prev = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let next = t2(&[&[0.9, 0.1], &[0.0, 1.0]]);
        assert!((sq_dist(&prev, &next, &[0, 1]) - 0.02).abs() < 1e-12);
        assert!((sq_dist(&prev, &next, &[1, 0]) - 3.62).abs() < 1e-12);
        assert_eq!(align_permutation(&prev, &next).unwrap(), vec![0, 1]);
        let same = t2(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert_eq!(align_permutation(&same, &same).unwrap(), vec![0, 1]);
        assert!(align_permutation(&same, &t2(&[&[0.5], &[0.5]])).is_err());
    }

    #[test]
    fn stitch_single_and_swapped() {
        let a = t2(&[&[0.9, 0.8, 0.1, 0.2], &[0.1, 0.3, 0.7, 0.6]]);
        let one = [SegmentActivity {
            activity: a.clone(),
            start_frame: 0,
        }];
        assert_eq!(stitch(&one).unwrap(), a);
        // next segment repeats frames 2..4 with streams swapped
        let b = t2(&[&[0.7, 0.6, 0.4], &[0.1, 0.2, 0.9]]);
        let segs = [
            one[0].clone(),
            SegmentActivity {
                activity: b,
                start_frame: 2,
            },
        ];
        let (out, perms) = stitch_with_perms(&segs).unwrap();
        assert_eq!(perms[1], vec![1, 0]);
        assert_eq!(out.shape(), &[2, 5]);
        assert_eq!(out.data(), &[0.9, 0.8, 0.1, 0.2, 0.9, 0.1, 0.3, 0.7, 0.6, 0.4]);
    }

    #[test]
    fn stitch_rejects_bad_offsets() {
        let a = Tensor::full(&[2, 4], 0.5);
        assert!(stitch(&[]).is_err());
        let gap = [
            SegmentActivity {
                activity: a.clone(),
                start_frame: 0,
            },
            SegmentActivity {
                activity: a.clone(),
                start_frame: 4,
            },
        ];
        assert!(stitch(&gap).is_err());
    }

    #[test]
    fn timelines_and_rttm() {
        let b = t2(&[&[1., 1., 1., 1., 1., 0., 0.], &[1., 0., 1., 0., 0., 0., 0.]]);
        let tl = timeline_from_activity(&b, 20).unwrap();
        assert_eq!(tl.intervals.len(), 3);
        assert_eq!(
            tl.intervals[0],
            Interval {
                speaker: "spk0".into(),
                onset: 0.0,
                offset: 0.1
            }
        );
        let rttm = to_rttm(&tl, "rec");
        assert_eq!(rttm.lines().next().unwrap(), "SPEAKER rec 1 0.00 0.10 <NA> <NA> spk0 <NA> <NA>");
        assert_eq!(rttm.lines().nth(1).unwrap(), "SPEAKER rec 1 0.00 0.02 <NA> <NA> spk1 <NA> <NA>");
        assert_eq!(rttm.lines().nth(2).unwrap(), "SPEAKER rec 1 0.04 0.02 <NA> <NA> spk1 <NA> <NA>");
        assert!(timeline_from_activity(&Tensor::zeros(&[2, 5]), 20).unwrap().intervals.is_empty());
        assert_eq!(to_rttm(&DiarTimeline::default(), "rec"), "");
        let back = tl.to_activity(&["spk0".into(), "spk1".into()], 7, 20).unwrap();
        assert_eq!(back, b);
    }
}
