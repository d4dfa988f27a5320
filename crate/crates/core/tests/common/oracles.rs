//! Reference implementations that share no code with the library.

use sidecar_mtl::diarize::DiarTimeline;

/// Independent CTC reference: sum over every label path whose collapse is
/// the target, accumulated in probability space.
pub fn enumerate_ctc(lp: &[f64], frames: usize, vocab: usize, target: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &k in &path {
            if k != 0 && Some(k) != prev {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(t, &k)| lp[t * vocab + k]).sum::<f64>().exp();
        }
        let Some(i) = path.iter().position(|&k| k + 1 < vocab) else {
            break;
        };
        path[i] += 1;
        path[..i].iter_mut().for_each(|k| *k = 0);
    }
    -total.ln()
}

/// Scores on a 1 ms grid: frames within `collar` of any reference boundary
/// are dropped; the speaker mapping maximises matched time.
pub fn grid_der(reference: &DiarTimeline, hypothesis: &DiarTimeline, collar: f64) -> (f64, f64, f64, f64) {
    let end = reference
        .intervals
        .iter()
        .chain(&hypothesis.intervals)
        .map(|i| i.offset)
        .fold(0.0, f64::max);
    let ms = (end * 1000.0).round() as usize + 1;
    let (rs, hs) = (reference.speakers(), hypothesis.speakers());
    let bounds: Vec<f64> = reference.intervals.iter().flat_map(|i| [i.onset, i.offset]).collect();
    let on = |t: &DiarTimeline, spk: &str, x: f64| t.intervals.iter().any(|i| i.speaker == spk && i.onset <= x && x < i.offset);
    let mut frames = Vec::new();
    for k in 0..ms {
        let x = (k as f64 + 0.5) / 1000.0;
        if bounds.iter().any(|b| (x - b).abs() < collar) {
            continue;
        }
        let r: Vec<bool> = rs.iter().map(|s| on(reference, s, x)).collect();
        let h: Vec<bool> = hs.iter().map(|s| on(hypothesis, s, x)).collect();
        frames.push((r, h));
    }
    // Every injective partial map from hypothesis to reference speakers.
    let mut best_matched = 0usize;
    let mut assign = vec![usize::MAX; hs.len()];
    fn search(i: usize, assign: &mut Vec<usize>, nref: usize, frames: &[(Vec<bool>, Vec<bool>)], best: &mut usize) {
        if i == assign.len() {
            let m = frames
                .iter()
                .map(|(r, h)| (0..assign.len()).filter(|&j| assign[j] != usize::MAX && h[j] && r[assign[j]]).count())
                .sum();
            *best = (*best).max(m);
            return;
        }
        assign[i] = usize::MAX;
        search(i + 1, assign, nref, frames, best);
        for k in 0..nref {
            if !assign[..i].contains(&k) {
                assign[i] = k;
                search(i + 1, assign, nref, frames, best);
            }
        }
        assign[i] = usize::MAX;
    }
    search(0, &mut assign, rs.len(), &frames, &mut best_matched);
    let (mut scored, mut miss, mut fa, mut overlap) = (0usize, 0usize, 0usize, 0usize);
    for (r, h) in &frames {
        let nr = r.iter().filter(|&&a| a).count();
        let nh = h.iter().filter(|&&a| a).count();
        scored += nr;
        miss += nr.saturating_sub(nh);
        fa += nh.saturating_sub(nr);
        overlap += nr.min(nh);
    }
    let s = |n: usize| n as f64 / 1000.0;
    (s(miss), s(fa), s(overlap - best_matched), s(scored))
}

