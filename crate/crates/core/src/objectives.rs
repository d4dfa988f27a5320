//! CTC, permutation-invariant CTC, diarization MSE and their combinations.

use crate::diarize::align_permutation;
use crate::perm::{argmin, permutations, Permutation};
use crate::tensor::{Tensor, Var};
use crate::{Error, Result};

/// Log-space stand-in for `-inf`.
const NEG: f64 = -1e30;

fn lse(a: f64, b: f64) -> f64 {
    if a <= NEG {
        return b;
    }
    if b <= NEG {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Minimum frame count for `target`: one frame per token plus one blank
/// between each pair of equal neighbours.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_tokens(target: &[usize], vocab: usize) -> Result<()> {
    match target.iter().find(|&&t| t == 0 || t >= vocab) {
        Some(&token) => Err(Error::CtcToken { token, vocab }),
        None => Ok(()),
    }
}

/// Loss value and its gradient with respect to the log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcStats {
    /// `+inf` when no alignment exists.
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Forward-backward over the blank-augmented target for row-major
/// `(frames, vocab)` log-probabilities.
pub fn ctc_stats(log_probs: &[f64], frames: usize, vocab: usize, target: &[usize]) -> Result<CtcStats> {
    if frames == 0 || log_probs.len() != frames * vocab {
        return Err(Error::Input(format!(
            "ctc expects {frames}x{vocab} log-probabilities with frames > 0, got {}",
            log_probs.len()
        )));
    }
    check_tokens(target, vocab)?;
    let ext: Vec<usize> = std::iter::once(0)
        .chain(target.iter().flat_map(|&t| [t, 0]))
        .collect();
    let n = ext.len();
    let lp = |t: usize, s: usize| log_probs[t * vocab + ext[s]];
    let skip = |s: usize| s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2];

    let mut alpha = vec![NEG; frames * n];
    alpha[0] = lp(0, 0);
    if n > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * n);
        let prev = &prev[(t - 1) * n..];
        for s in 0..n {
            let mut a = prev[s];
            if s >= 1 {
                a = lse(a, prev[s - 1]);
            }
            if skip(s) {
                a = lse(a, prev[s - 2]);
            }
            cur[s] = if a <= NEG { NEG } else { a + lp(t, s) };
        }
    }
    let last = (frames - 1) * n;
    let log_p = if n > 1 {
        lse(alpha[last + n - 1], alpha[last + n - 2])
    } else {
        alpha[last]
    };
    if log_p <= NEG / 2.0 {
        return Ok(CtcStats {
            loss: f64::INFINITY,
            grad: vec![0.0; log_probs.len()],
        });
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![NEG; frames * n];
    beta[last + n - 1] = 0.0;
    if n > 1 {
        beta[last + n - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..n {
            let next = |s2: usize| beta[(t + 1) * n + s2] + lp(t + 1, s2);
            let mut b = next(s);
            if s + 1 < n {
                b = lse(b, next(s + 1));
            }
            if s + 2 < n && skip(s + 2) {
                b = lse(b, next(s + 2));
            }
            beta[t * n + s] = if b <= NEG / 2.0 { NEG } else { b };
        }
    }

    let mut grad = vec![0.0; log_probs.len()];
    for t in 0..frames {
        for s in 0..n {
            let ab = alpha[t * n + s] + beta[t * n + s];
            if ab > NEG / 2.0 {
                grad[t * vocab + ext[s]] -= (ab - log_p).exp();
            }
        }
    }
    Ok(CtcStats { loss: -log_p, grad })
}

fn frames_vocab(log_probs: &Var<'_>) -> Result<(usize, usize)> {
    match log_probs.shape()[..] {
        [t, v] => Ok((t, v)),
        ref s => Err(Error::Input(format!("ctc expects (T, V) log-probabilities, got {s:?}"))),
    }
}

/// Negative log-likelihood of `target` under `(T, V)` log-probabilities
/// (rows already log-softmaxed), recorded on the tape.
pub fn ctc_loss<'t>(log_probs: Var<'t>, target: &[usize]) -> Result<Var<'t>> {
    let (frames, vocab) = frames_vocab(&log_probs)?;
    check_tokens(target, vocab)?;
    let required = ctc_min_frames(target);
    if frames < required {
        return Err(Error::CtcTooShort {
            frames,
            target_len: target.len(),
            required,
        });
    }
    let stats = ctc_stats(&log_probs.value(), frames, vocab, target)?;
    Ok(log_probs.tape().scalar_fn(log_probs, stats.loss, stats.grad)?)
}

/// Collapses repeats, then drops blanks.
pub fn ctc_collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != 0 {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Loss by enumerating every length-`T` path. Limited to `T <= 8`, `V <= 4`.
pub fn ctc_brute_force(log_probs: &Tensor, target: &[usize]) -> Result<f64> {
    let &[frames, vocab] = log_probs.shape() else {
        return Err(Error::Input(format!("expected (T, V), got {:?}", log_probs.shape())));
    };
    if frames == 0 || frames > 8 || vocab > 4 {
        return Err(Error::Input(format!("brute force limited to 1 <= T <= 8, V <= 4; got T={frames}, V={vocab}")));
    }
    check_tokens(target, vocab)?;
    let lp = log_probs.data();
    let mut total = NEG;
    let mut path = vec![0usize; frames];
    for code in 0..vocab.pow(frames as u32) {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % vocab;
            c /= vocab;
        }
        if ctc_collapse(&path) == target {
            let score: f64 = path.iter().enumerate().map(|(t, &k)| lp[t * vocab + k]).sum();
            total = lse(total, score);
        }
    }
    Ok(if total <= NEG / 2.0 { f64::INFINITY } else { -total })
}

/// Best-path decoding of row-major `(frames, vocab)` scores.
pub fn greedy_decode(scores: &[f64], vocab: usize) -> Vec<usize> {
    let path: Vec<usize> = scores
        .chunks_exact(vocab)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b })
                .0
        })
        .collect();
    ctc_collapse(&path)
}

/// Permutation-invariant CTC over `(S, T, V)` log-probabilities.
///
/// Returns the mean per-speaker loss under the best assignment of streams
/// to targets, and that assignment (`perm[s]` is the stream for target `s`).
/// Ties go to the lexicographically smallest permutation.
pub fn pit_ctc<'t>(log_probs: Var<'t>, targets: &[Vec<usize>]) -> Result<(Var<'t>, Permutation)> {
    let shape = log_probs.shape();
    let &[streams, frames, vocab] = &shape[..] else {
        return Err(Error::Input(format!("pit_ctc expects (S, T, V), got {shape:?}")));
    };
    if streams != targets.len() || streams == 0 || streams > 4 {
        return Err(Error::Input(format!(
            "pit_ctc needs 1..=4 streams matching {} targets, got {streams}",
            targets.len()
        )));
    }
    let values = log_probs.value();
    let block = frames * vocab;
    let mut stats = Vec::with_capacity(streams * streams);
    for stream in 0..streams {
        let rows = &values[stream * block..(stream + 1) * block];
        for (target, tokens) in targets.iter().enumerate() {
            let pair = |source| Error::PitPair {
                stream,
                target,
                source: Box::new(source),
            };
            let required = ctc_min_frames(tokens);
            if frames < required {
                return Err(pair(Error::CtcTooShort {
                    frames,
                    target_len: tokens.len(),
                    required,
                }));
            }
            stats.push(ctc_stats(rows, frames, vocab, tokens).map_err(pair)?);
        }
    }
    let perms = permutations(streams);
    // Summing in sorted order makes equal multisets of pair losses tie exactly.
    let cost = |p: &Permutation| {
        let mut pair: Vec<f64> = p.iter().enumerate().map(|(s, &a)| stats[a * streams + s].loss).collect();
        pair.sort_by(f64::total_cmp);
        pair.iter().sum::<f64>() / streams as f64
    };
    let (best, _) = argmin(perms.iter().map(cost)).expect("at least one permutation");
    let perm = perms[best].clone();

    let tape = log_probs.tape();
    let mut total: Option<Var<'t>> = None;
    for (s, &a) in perm.iter().enumerate() {
        let row = log_probs.select(0, &[a])?.reshape(&[frames, vocab])?;
        let st = &stats[a * streams + s];
        let l = tape.scalar_fn(row, st.loss, st.grad.clone())?;
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
    }
    let loss = total.expect("at least one stream").scale(1.0 / streams as f64)?;
    Ok((loss, perm))
}

/// Mean squared error between `(B, S, T)` activities re-ordered by `perm`
/// and the binary reference.
pub fn diar_mse<'t>(activity: Var<'t>, reference: &Tensor, perm: &[usize]) -> Result<Var<'t>> {
    let shape = activity.shape();
    if shape.len() != 3 || shape != reference.shape() {
        return Err(Error::Input(format!(
            "diar_mse: activity {shape:?} and reference {:?} must both be (B, S, T)",
            reference.shape()
        )));
    }
    if !crate::perm::is_permutation(perm) || perm.len() != shape[1] {
        return Err(Error::Input(format!("diar_mse: {perm:?} is not a permutation of {} streams", shape[1])));
    }
    let r = activity.tape().leaf(reference);
    let diff = activity.select(1, perm)?.sub(r)?;
    Ok(diff.mul(diff)?.mean()?)
}

/// Objective pieces for one batch.
pub struct Combined<'t> {
    pub loss: Var<'t>,
    pub ctc: f64,
    pub diar: f64,
    /// Chosen permutation per batch item.
    pub perms: Vec<Permutation>,
}

/// `pit_ctc + lambda * diar_mse`, averaged over the batch. The diarization
/// term reuses the permutation picked by CTC alone.
///
/// `logits` is `(B*S, T, V)` with rows ordered `b*S + s`, `targets[b][s]`,
/// `activity` and `reference` are `(B, S, T)`.
pub fn combined_loss<'t>(
    logits: Var<'t>,
    targets: &[Vec<Vec<usize>>],
    activity: Var<'t>,
    reference: &Tensor,
    lambda: f64,
) -> Result<Combined<'t>> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let ashape = activity.shape();
    let &[batch, streams, frames] = &ashape[..] else {
        return Err(Error::Input(format!("activity must be (B, S, T), got {ashape:?}")));
    };
    let lshape = logits.shape();
    if lshape.len() != 3 || lshape[0] != batch * streams || lshape[1] != frames || targets.len() != batch {
        return Err(Error::Input(format!(
            "logits {lshape:?} and {} target sets do not match activity {ashape:?}",
            targets.len()
        )));
    }
    let log_probs = logits.log_softmax(2)?;
    let mut ctc: Option<Var<'t>> = None;
    let mut perms = Vec::with_capacity(batch);
    let mut rows = Vec::with_capacity(batch * streams);
    for (b, tgt) in targets.iter().enumerate() {
        let (l, p) = pit_ctc(log_probs.narrow(0, b * streams, streams)?, tgt)?;
        rows.extend(p.iter().map(|&a| b * streams + a));
        perms.push(p);
        ctc = Some(match ctc {
            Some(c) => c.add(l)?,
            None => l,
        });
    }
    let ctc = ctc.expect("non-empty batch").scale(1.0 / batch as f64)?;
    let permuted = activity
        .reshape(&[batch * streams, frames])?
        .select(0, &rows)?
        .reshape(&[batch, streams, frames])?;
    let diar = diar_mse(permuted, reference, &crate::perm::identity(streams))?;
    let loss = if lambda == 0.0 { ctc } else { ctc.add(diar.scale(lambda)?)? };
    Ok(Combined {
        loss,
        ctc: ctc.item()?,
        diar: diar.item()?,
        perms,
    })
}

/// Diarization-only loss over consecutive segments of one recording.
///
/// `segments[i]` and `references[i]` are `(S, T_i)`; `bounds[i]` is the
/// global `[start, end)` frame range of segment `i`. The first segment takes
/// its MSE-optimal permutation; each later one is aligned to the re-ordered
/// previous segment on their shared frames. Returns the mean squared error
/// over all segment frames and the per-segment permutations.
pub fn adaptation_loss<'t>(
    segments: &[Var<'t>],
    references: &[Tensor],
    bounds: &[(usize, usize)],
) -> Result<(Var<'t>, Vec<Permutation>)> {
    if segments.is_empty() || segments.len() != references.len() || segments.len() != bounds.len() {
        return Err(Error::Input(format!(
            "adaptation_loss needs matching non-empty segment lists, got {} / {} / {}",
            segments.len(),
            references.len(),
            bounds.len()
        )));
    }
    let mut perms: Vec<Permutation> = Vec::with_capacity(segments.len());
    let mut total: Option<Var<'t>> = None;
    let mut count = 0usize;
    for (i, (seg, reference)) in segments.iter().zip(references).enumerate() {
        let shape = seg.shape();
        let (start, end) = bounds[i];
        if shape.len() != 2 || shape != reference.shape() || shape[1] != end.saturating_sub(start) {
            return Err(Error::Input(format!(
                "segment {i}: activity {shape:?}, reference {:?}, bounds {start}..{end}",
                reference.shape()
            )));
        }
        let streams = shape[0];
        let values = seg.to_tensor();
        let perm = if i == 0 {
            let all = permutations(streams);
            let cost = |p: &Permutation| -> f64 {
                (0..streams)
                    .flat_map(|s| {
                        let (v, r) = (&values, reference);
                        (0..shape[1]).map(move |t| (v.at(&[p[s], t]) - r.at(&[s, t])).powi(2))
                    })
                    .sum()
            };
            all[argmin(all.iter().map(cost)).expect("non-empty").0].clone()
        } else {
            let (pstart, pend) = bounds[i - 1];
            if start < pstart || start >= pend {
                return Err(Error::Input(format!("segment {i} does not overlap its predecessor")));
            }
            let shared = pend.min(end) - start;
            let prev = segments[i - 1].to_tensor();
            let prev_perm = &perms[i - 1];
            let prev_shared = shared_slice(&prev, prev_perm, start - pstart, shared);
            let next_shared = shared_slice(&values, &crate::perm::identity(streams), 0, shared);
            align_permutation(&prev_shared, &next_shared)?
        };
        let r = seg.tape().leaf(reference);
        let diff = seg.select(0, &perm)?.sub(r)?;
        let sq = diff.mul(diff)?.sum()?;
        count += seg.to_tensor().numel();
        total = Some(match total {
            Some(t) => t.add(sq)?,
            None => sq,
        });
        perms.push(perm);
    }
    let loss = total.expect("non-empty").scale(1.0 / count.max(1) as f64)?;
    Ok((loss, perms))
}

/// Rows re-ordered by `perm`, columns `offset..offset+len`.
fn shared_slice(t: &Tensor, perm: &[usize], offset: usize, len: usize) -> Tensor {
    let data = perm
        .iter()
        .flat_map(|&s| (offset..offset + len).map(move |c| t.at(&[s, c])))
        .collect();
    Tensor::new(vec![perm.len(), len], data).expect("sized by construction")
}
