//! Analytic operation budgets, computed from model shapes and printed
//! beside the reference hardware measurements for comparison.
//!
//! Counts are multiply plus add (one MAC = 2 ops), per 10-frame streaming
//! step for the extractors and per cache entry for the alignment DP.

use serde::{Deserialize, Serialize};

/// Reference measurements from the Cortex-M7 profile this system models.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReferenceOps {
    pub l1_mops_per_step: f64,
    pub l2_mops_per_step: f64,
    pub l1_match_kops_per_entry: f64,
    pub l2_match_kops_per_entry: f64,
}

impl Default for ReferenceOps {
    fn default() -> Self {
        ReferenceOps {
            l1_mops_per_step: 1.8,
            l2_mops_per_step: 2.9,
            l1_match_kops_per_entry: 2.80,
            l2_match_kops_per_entry: 1.68,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpsBudget {
    /// SincNet plus two conv layers per streaming step.
    pub l1_frontend_ops_per_step: u64,
    /// Bi-directional recurrent layers plus classifier per streaming step.
    pub l2_gru_ops_per_step: u64,
    pub l1_match_ops_per_entry: u64,
    pub l2_match_ops_per_entry: u64,
    /// Frame/key sizes the per-entry figures assume.
    pub match_frames: usize,
    pub match_key_len: usize,
    pub reference: ReferenceOps,
}

/// Front-end cost per streaming step of `step` input frames: one sinc dot
/// product per channel per frame, then two stride-1 conv layers with the
/// second running at half rate after pooling.
pub fn l1_step_ops(channels: usize, window: usize, kernel: usize, step: usize) -> u64 {
    let sinc = step * channels * window;
    let conv1 = step * channels * channels * kernel;
    let conv2 = (step / 2) * channels * channels * kernel;
    2 * (sinc + conv1 + conv2) as u64
}

/// Recurrent extractor cost per streaming step: both directions of both
/// layers plus the classifier head.
pub fn l2_step_ops(input_dim: usize, hidden: usize, outputs: usize, step: usize) -> u64 {
    let layer1 = 3 * hidden * (input_dim + hidden);
    let layer2 = 3 * hidden * (2 * hidden + hidden);
    let per_frame = 2 * (layer1 + layer2) + outputs * 2 * hidden;
    2 * (step * per_frame) as u64
}

/// Blank-free alignment DP: T x U cells, three fused multiply-adds each.
pub fn l1_match_ops(frames: usize, key_len: usize) -> u64 {
    2 * (3 * frames * key_len) as u64
}

/// Blank-aware alignment DP over the expanded 2U+1 states.
pub fn l2_match_ops(frames: usize, key_len: usize) -> u64 {
    2 * (3 * frames * (2 * key_len + 1)) as u64
}

/// Budget at given shapes; `match_frames`/`match_key_len` describe a typical
/// lookup (defaults mirror a 3-second utterance).
pub fn ops_budget(
    channels: usize,
    window: usize,
    kernel: usize,
    gru_hidden: usize,
    gru_outputs: usize,
    match_frames: usize,
    match_key_len: usize,
) -> OpsBudget {
    const STEP: usize = 10;
    OpsBudget {
        l1_frontend_ops_per_step: l1_step_ops(channels, window, kernel, STEP),
        l2_gru_ops_per_step: l2_step_ops(channels, gru_hidden, gru_outputs, STEP),
        l1_match_ops_per_entry: l1_match_ops(match_frames, match_key_len),
        l2_match_ops_per_entry: l2_match_ops(match_frames, match_key_len),
        match_frames,
        match_key_len,
        reference: ReferenceOps::default(),
    }
}

pub fn render_table(budget: &OpsBudget) -> String {
    let mut out = String::new();
    out.push_str("operation budget (computed vs reference platform)\n");
    out.push_str(&format!(
        "  L1 extractor per 10-frame step: {:>10.3} MOps   (reference {:.1} MOps)\n",
        budget.l1_frontend_ops_per_step as f64 / 1e6,
        budget.reference.l1_mops_per_step
    ));
    out.push_str(&format!(
        "  L2 extractor per 10-frame step: {:>10.3} MOps   (reference {:.1} MOps)\n",
        budget.l2_gru_ops_per_step as f64 / 1e6,
        budget.reference.l2_mops_per_step
    ));
    out.push_str(&format!(
        "  L1 match per entry (T={}, U={}): {:>8.2} KOps   (reference {:.2} KOps)\n",
        budget.match_frames,
        budget.match_key_len,
        budget.l1_match_ops_per_entry as f64 / 1e3,
        budget.reference.l1_match_kops_per_entry
    ));
    out.push_str(&format!(
        "  L2 match per entry (T={}, U={}): {:>8.2} KOps   (reference {:.2} KOps)\n",
        budget.match_frames,
        budget.match_key_len,
        budget.l2_match_ops_per_entry as f64 / 1e3,
        budget.reference.l2_match_kops_per_entry
    ));
    out
}
