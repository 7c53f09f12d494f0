//! Dynamic speech segmentation driven by a word-counting gate.
//!
//! A sigmoidal gate scores every encoder frame; the floor of the running
//! score sum assigns each frame a segment index. Label tokens carry word
//! indices counted from boundary tokens. Together the two index arrays
//! define which encoder frames each decoder position may attend to, and the
//! squared difference between the summed gate scores and the true unit
//! count is the self-supervision signal that trains the gate.
//!
//! Index extraction and mask construction are gradient barriers: they read
//! tensor data and produce plain integers, so the gate learns exclusively
//! through the counting loss.

use serde::{Deserialize, Serialize};

use crate::data::{GO_ID, SPACE_ID};
use crate::error::{Error, Result};
use crate::mask::{AttentionMask, Window};
use crate::tensor::Tensor;

/// What the gate counts: SPACE delimiters (word mode, English-style
/// transcripts) or every non-GO token (character/syllable mode).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountUnit {
    Space,
    Token,
}

/// Gate parameters: a single linear probe `[h, 1]` plus bias `[1]`.
pub struct GateParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl GateParams {
    pub fn new(w: Tensor, b: Tensor) -> Result<GateParams> {
        if w.rank() != 2 || w.shape()[1] != 1 {
            return Err(Error::contract(format!(
                "gate weight must have shape [h, 1], got {:?}",
                w.shape()
            )));
        }
        if b.shape() != [1] {
            return Err(Error::contract(format!(
                "gate bias must have shape [1], got {:?}",
                b.shape()
            )));
        }
        Ok(GateParams { w, b })
    }
}

/// Per-frame segment indices: the floor of the cumulative gate score.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentIndices {
    pub w_hat: Vec<usize>,
    pub cum_alpha: Vec<f64>,
}

/// Per-token unit indices counted from the teacher-forcing input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordIndices {
    pub w: Vec<usize>,
}

/// Per-frame gate score: `sigmoid(o_A_i . W_G + b_G)`.
///
/// Accepts `[N, h]` or batched `[B, N, h]` memory and returns `[N]` or
/// `[B, N]` scores in (0, 1). Zeroing padded frames is the caller's job
/// (multiply by the frame-validity mask).
pub fn gate_alpha(memory: &Tensor, gate: &GateParams) -> Result<Tensor> {
    let scores = memory.matmul(&gate.w)?.add_bias(&gate.b)?;
    let mut shape = scores.shape().to_vec();
    shape.pop();
    scores.sigmoid().reshape(&shape)
}

/// Assign each frame the floor of the cumulative gate score.
///
/// The result is detached from the gradient graph: it is integer-valued and
/// feeds only mask construction, never backward rules.
pub fn frame_segment_indices(alpha: &[f64]) -> Result<SegmentIndices> {
    let mut cum_alpha = Vec::with_capacity(alpha.len());
    let mut w_hat = Vec::with_capacity(alpha.len());
    let mut running = 0.0;
    for (i, &a) in alpha.iter().enumerate() {
        if !(0.0..1.0).contains(&a) {
            return Err(Error::contract(format!(
                "gate score {a} at frame {i} outside [0, 1)"
            )));
        }
        running += a;
        cum_alpha.push(running);
        w_hat.push(running.floor() as usize);
    }
    Ok(SegmentIndices { w_hat, cum_alpha })
}

/// Unit index of each position of a GO-prefixed token sequence.
///
/// Space mode counts SPACE delimiters seen so far; token mode counts every
/// non-GO token.
pub fn label_word_indices(y_in: &[usize], unit: CountUnit) -> WordIndices {
    let mut w = Vec::with_capacity(y_in.len());
    let mut count = 0usize;
    for &tok in y_in {
        match unit {
            CountUnit::Space => {
                if tok == SPACE_ID {
                    count += 1;
                }
            }
            CountUnit::Token => {
                if tok != GO_ID {
                    count += 1;
                }
            }
        }
        w.push(count);
    }
    WordIndices { w }
}

/// Whether a token with this id advances the unit count.
pub fn is_boundary_token(tok: usize, unit: CountUnit) -> bool {
    match unit {
        CountUnit::Space => tok == SPACE_ID,
        CountUnit::Token => tok != GO_ID,
    }
}

/// Self-attention window: position `i` may attend `j` iff
/// `i - lb <= j <= i + la`, with either bound removable.
pub fn build_window_mask(n: usize, lb: Window, la: Window) -> AttentionMask {
    let mut admissible = vec![false; n * n];
    for i in 0..n {
        let j_lo = match lb {
            Window::Bounded(b) => i.saturating_sub(b),
            Window::Unbounded => 0,
        };
        let j_hi = match la {
            Window::Bounded(b) => (i + b).min(n - 1),
            Window::Unbounded => n - 1,
        };
        for j in j_lo..=j_hi {
            admissible[i * n + j] = true;
        }
    }
    AttentionMask::new(vec![n, n], admissible).expect("window mask dims are consistent")
}

/// Decoder-to-encoder admissibility: token `k` attends frame `i` iff
/// `w_k - d_lb <= w_hat_i <= w_k + d_la` and frame `i` is valid.
///
/// A valid token whose window catches no valid frame falls back to the
/// single valid frame whose segment index is closest to the token's word
/// index (earlier frame on ties), which keeps early-training rows alive
/// when the gate undercounts. Invalid (padded) tokens admit every valid
/// frame so downstream softmax rows stay well-formed; their outputs are
/// masked out of every loss.
pub fn build_dynamic_mask(
    seg: &SegmentIndices,
    words: &WordIndices,
    d_lb: Window,
    d_la: Window,
    frame_valid: &[bool],
    token_valid: &[bool],
) -> Result<AttentionMask> {
    let n = seg.w_hat.len();
    let l = words.w.len();
    if frame_valid.len() != n || token_valid.len() != l {
        return Err(Error::contract(format!(
            "dynamic mask: {n} frames / {l} tokens but {} / {} validity flags",
            frame_valid.len(),
            token_valid.len()
        )));
    }
    if !frame_valid.iter().any(|&v| v) {
        return Err(Error::contract("dynamic mask: no valid frames".to_string()));
    }
    let mut admissible = vec![false; l * n];
    for k in 0..l {
        let row = &mut admissible[k * n..(k + 1) * n];
        if !token_valid[k] {
            for i in 0..n {
                row[i] = frame_valid[i];
            }
            continue;
        }
        let wk = words.w[k] as i64;
        let mut any = false;
        for i in 0..n {
            if !frame_valid[i] {
                continue;
            }
            let wh = seg.w_hat[i] as i64;
            let below = match d_la {
                Window::Bounded(b) => wh <= wk + b as i64,
                Window::Unbounded => true,
            };
            let above = match d_lb {
                Window::Bounded(b) => wh >= wk - b as i64,
                Window::Unbounded => true,
            };
            if below && above {
                row[i] = true;
                any = true;
            }
        }
        if !any {
            let mut best: Option<(usize, i64)> = None;
            for i in 0..n {
                if !frame_valid[i] {
                    continue;
                }
                let dist = (seg.w_hat[i] as i64 - wk).abs();
                if best.map_or(true, |(_, d)| dist < d) {
                    best = Some((i, dist));
                }
            }
            let (i, _) = best.expect("at least one valid frame checked above");
            row[i] = true;
        }
    }
    AttentionMask::new(vec![l, n], admissible)
}

/// Batched variant: per-utterance masks stacked into `[B, L_max, N_max]`.
pub fn build_dynamic_mask_batch(
    segs: &[SegmentIndices],
    words: &[WordIndices],
    d_lb: Window,
    d_la: Window,
    frame_valid: &[Vec<bool>],
    token_valid: &[Vec<bool>],
) -> Result<AttentionMask> {
    let b = segs.len();
    if words.len() != b || frame_valid.len() != b || token_valid.len() != b {
        return Err(Error::contract("dynamic mask batch: uneven batch arrays".to_string()));
    }
    let n = segs.first().map_or(0, |s| s.w_hat.len());
    let l = words.first().map_or(0, |w| w.w.len());
    let mut admissible = Vec::with_capacity(b * l * n);
    for u in 0..b {
        let m = build_dynamic_mask(&segs[u], &words[u], d_lb, d_la, &frame_valid[u], &token_valid[u])?;
        if m.dims() != [l, n] {
            return Err(Error::contract(
                "dynamic mask batch: utterances must be padded to common extents".to_string(),
            ));
        }
        admissible.extend_from_slice(m.admissible());
    }
    AttentionMask::new(vec![b, l, n], admissible)
}

/// Squared difference between the true unit count and the summed gate
/// scores over valid frames. Differentiable with respect to the scores.
pub fn word_loss(alpha: &Tensor, target_count: usize, frame_valid: &[bool]) -> Result<Tensor> {
    if alpha.rank() != 1 || alpha.numel() != frame_valid.len() {
        return Err(Error::contract(format!(
            "word loss: alpha shape {:?} vs {} validity flags",
            alpha.shape(),
            frame_valid.len()
        )));
    }
    let mask = Tensor::from_vec(
        alpha.shape(),
        frame_valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        alpha.precision(),
    )?;
    let total = alpha.mul(&mask)?.sum_all();
    let diff = Tensor::scalar(target_count as f64, alpha.precision()).sub(&total)?;
    diff.mul(&diff)
}

/// Batched word loss, averaged over utterances: `mean_b (target_b - sum_i
/// alpha_bi)^2`. `alpha` is `[B, N]` with padded entries already zeroed.
pub fn word_loss_batch(alpha: &Tensor, targets: &[f64], valid: &Tensor) -> Result<Tensor> {
    if alpha.rank() != 2 || alpha.shape()[0] != targets.len() {
        return Err(Error::contract(format!(
            "batched word loss: alpha shape {:?} vs {} targets",
            alpha.shape(),
            targets.len()
        )));
    }
    let sums = alpha.mul(valid)?.sum_last();
    let t = Tensor::from_vec(&[targets.len()], targets.to_vec(), alpha.precision())?;
    let diff = t.sub(&sums)?;
    Ok(diff.mul(&diff)?.mean_all())
}

/// Soft unit-count estimate: the sum of gate scores over valid frames.
pub fn estimated_count(alpha: &[f64], frame_valid: &[bool]) -> f64 {
    alpha
        .iter()
        .zip(frame_valid)
        .filter(|(_, &v)| v)
        .map(|(a, _)| a)
        .sum()
}
