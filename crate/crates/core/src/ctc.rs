//! Alignment-marginalized sequence matching.
//!
//! Both cache levels score a query by the probability that a frame-level
//! posterior sequence collapses to a stored label sequence, summed over all
//! frame alignments. Two collapse semantics are supported:
//!
//! * [`CollapseMode::RepeatMerge`] — blank-free: adjacent identical symbols
//!   merge. Used by the sound-unit cache, whose centroid alphabet has no
//!   blank symbol.
//! * [`CollapseMode::StandardCtc`] — adjacent repeats merge, then blanks are
//!   removed. Used by the phoneme cache (41 phonemes + one blank).
//!
//! The loss is `-ln p(target | posteriors)`, computed by a forward dynamic
//! program in the log domain (stable for thousands of frames). A brute-force
//! path enumerator is provided as a testing oracle and stays independent of
//! the DP.

use thiserror::Error;

/// Symbol id within a posterior alphabet.
pub type Symbol = u16;

const NEG_INF: f64 = f64::NEG_INFINITY;

#[derive(Debug, Error, PartialEq)]
pub enum CtcError {
    /// The target cannot be produced by any length-T alignment (probability
    /// is exactly zero).
    #[error("target of length {target_len} is infeasible for {frames} frames")]
    Infeasible { target_len: usize, frames: usize },
    /// Brute-force instance exceeds the enumeration guard.
    #[error("oracle instance too large: V^T = {paths} exceeds {limit}")]
    OracleTooLarge { paths: u64, limit: u64 },
    /// Mode/blank configuration mismatch.
    #[error("{0}")]
    BlankConfig(String),
    /// Malformed posterior matrix.
    #[error("{0}")]
    BadPosteriors(String),
}

/// How alignments collapse to label sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollapseMode {
    /// Merge adjacent identical symbols; no blank exists.
    RepeatMerge,
    /// Merge adjacent identical symbols, then delete blanks.
    StandardCtc,
}

/// A blank-free label sequence used as a cache key or match target.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelSequence {
    pub symbols: Vec<Symbol>,
}

impl LabelSequence {
    pub fn new(symbols: Vec<Symbol>) -> Self {
        Self { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// True when no two adjacent symbols are equal.
    pub fn is_collapsed(&self) -> bool {
        self.symbols.windows(2).all(|w| w[0] != w[1])
    }
}

/// Per-frame probability distributions over a symbol alphabet, stored as
/// natural-log probabilities (row-major T x V).
#[derive(Debug, Clone)]
pub struct PosteriorSequence {
    log_probs: Vec<f64>,
    frames: usize,
    alphabet_size: usize,
    blank: Option<usize>,
}

impl PosteriorSequence {
    /// Build from probability rows. Each row must sum to 1 within 1e-6.
    pub fn from_probs(
        rows: &[Vec<f64>],
        blank: Option<usize>,
    ) -> Result<PosteriorSequence, CtcError> {
        if rows.is_empty() {
            return Err(CtcError::BadPosteriors("no frames".into()));
        }
        let v = rows[0].len();
        if v == 0 {
            return Err(CtcError::BadPosteriors("empty alphabet".into()));
        }
        if let Some(b) = blank {
            if b >= v {
                return Err(CtcError::BadPosteriors(format!(
                    "blank index {b} outside alphabet of size {v}"
                )));
            }
        }
        let mut log_probs = Vec::with_capacity(rows.len() * v);
        for (t, row) in rows.iter().enumerate() {
            if row.len() != v {
                return Err(CtcError::BadPosteriors(format!(
                    "row {t} has {} entries, expected {v}",
                    row.len()
                )));
            }
            let sum: f64 = row.iter().sum();
            if !(sum.is_finite() && (sum - 1.0).abs() <= 1e-6) {
                return Err(CtcError::BadPosteriors(format!(
                    "row {t} sums to {sum}, expected 1"
                )));
            }
            for &p in row {
                if !(0.0..=1.0 + 1e-9).contains(&p) {
                    return Err(CtcError::BadPosteriors(format!(
                        "row {t} holds probability {p} outside [0,1]"
                    )));
                }
                log_probs.push(if p > 0.0 { p.ln() } else { NEG_INF });
            }
        }
        Ok(PosteriorSequence {
            log_probs,
            frames: rows.len(),
            alphabet_size: v,
            blank,
        })
    }

    /// Build from already-normalized log-probability rows (each row's
    /// log-sum-exp must be 0 within 1e-6).
    pub fn from_log_probs(
        rows: &[Vec<f64>],
        blank: Option<usize>,
    ) -> Result<PosteriorSequence, CtcError> {
        if rows.is_empty() {
            return Err(CtcError::BadPosteriors("no frames".into()));
        }
        let v = rows[0].len();
        if let Some(b) = blank {
            if b >= v {
                return Err(CtcError::BadPosteriors(format!(
                    "blank index {b} outside alphabet of size {v}"
                )));
            }
        }
        let mut log_probs = Vec::with_capacity(rows.len() * v);
        for (t, row) in rows.iter().enumerate() {
            if row.len() != v {
                return Err(CtcError::BadPosteriors(format!(
                    "row {t} has {} entries, expected {v}",
                    row.len()
                )));
            }
            let lse = log_sum_exp(row);
            if !(lse.is_finite() && lse.abs() <= 1e-6) {
                return Err(CtcError::BadPosteriors(format!(
                    "row {t} log-sum-exp is {lse}, expected 0"
                )));
            }
            log_probs.extend_from_slice(row);
        }
        Ok(PosteriorSequence {
            log_probs,
            frames: rows.len(),
            alphabet_size: v,
            blank,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn blank(&self) -> Option<usize> {
        self.blank
    }

    #[inline]
    pub fn log_prob(&self, t: usize, sym: usize) -> f64 {
        self.log_probs[t * self.alphabet_size + sym]
    }

    pub fn prob_row(&self, t: usize) -> Vec<f64> {
        let base = t * self.alphabet_size;
        self.log_probs[base..base + self.alphabet_size]
            .iter()
            .map(|lp| lp.exp())
            .collect()
    }
}

/// Loss with the target length it was computed against; exposes the
/// length-normalized view used for threshold comparison.
#[derive(Debug, Clone, Copy)]
pub struct CtcOutcome {
    /// `-ln p(target | posteriors)`.
    pub loss: f64,
    pub target_len: usize,
}

impl CtcOutcome {
    /// Loss divided by the target length.
    pub fn normalized(&self) -> f64 {
        self.loss / self.target_len.max(1) as f64
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let hi = xs.iter().cloned().fold(NEG_INF, f64::max);
    if hi == NEG_INF {
        return NEG_INF;
    }
    hi + xs.iter().map(|&x| (x - hi).exp()).sum::<f64>().ln()
}

/// Collapse a raw symbol path to its label sequence.
///
/// `RepeatMerge` merges adjacent duplicates; `StandardCtc` merges adjacent
/// duplicates and then removes blanks (which must be supplied).
pub fn collapse(
    raw: &[Symbol],
    mode: CollapseMode,
    blank: Option<Symbol>,
) -> Result<LabelSequence, CtcError> {
    match (mode, blank) {
        (CollapseMode::StandardCtc, None) => {
            return Err(CtcError::BlankConfig(
                "StandardCtc collapse requires a blank symbol".into(),
            ))
        }
        (CollapseMode::RepeatMerge, Some(_)) => {
            return Err(CtcError::BlankConfig(
                "RepeatMerge collapse forbids a blank symbol".into(),
            ))
        }
        _ => {}
    }
    let mut out = Vec::with_capacity(raw.len());
    let mut prev: Option<Symbol> = None;
    for &s in raw {
        if prev != Some(s) {
            out.push(s);
            prev = Some(s);
        }
    }
    if mode == CollapseMode::StandardCtc {
        let b = blank.unwrap();
        out.retain(|&s| s != b);
    }
    Ok(LabelSequence::new(out))
}

fn check_mode(posts: &PosteriorSequence, mode: CollapseMode) -> Result<(), CtcError> {
    match mode {
        CollapseMode::StandardCtc if posts.blank.is_none() => Err(CtcError::BlankConfig(
            "StandardCtc matching requires posteriors with a blank index".into(),
        )),
        CollapseMode::RepeatMerge if posts.blank.is_some() => Err(CtcError::BlankConfig(
            "RepeatMerge matching forbids a blank index".into(),
        )),
        _ => Ok(()),
    }
}

fn adjacent_dups(target: &[Symbol]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// `-ln p(target | posts)` marginalized over all feasible alignments.
pub fn ctc_loss(
    posts: &PosteriorSequence,
    target: &LabelSequence,
    mode: CollapseMode,
) -> Result<CtcOutcome, CtcError> {
    check_mode(posts, mode)?;
    let (log_p, _alpha) = forward(posts, &target.symbols, mode)?;
    Ok(CtcOutcome {
        loss: -log_p,
        target_len: target.len(),
    })
}

/// Loss plus the gradient of the loss with respect to the per-frame
/// unnormalized log scores (the logits a log-softmax would consume):
/// `grad[t][k] = y[t][k] - q[t][k]` where `q` is the alignment occupancy.
pub fn ctc_loss_grad(
    posts: &PosteriorSequence,
    target: &LabelSequence,
    mode: CollapseMode,
) -> Result<(CtcOutcome, Vec<f64>), CtcError> {
    let (outcome, q) = ctc_occupancy(posts, target, mode)?;
    let t = posts.frames;
    let v = posts.alphabet_size;
    let mut grad = vec![0.0; t * v];
    for i in 0..t * v {
        grad[i] = posts.log_probs[i].exp() - q[i];
    }
    Ok((outcome, grad))
}

/// Loss plus the occupancy matrix `q[t][k]` = posterior probability that an
/// alignment drawn from `p(pi | target)` sits on symbol `k` at frame `t`.
/// The gradient of the loss w.r.t. the normalized log-probabilities is `-q`.
pub fn ctc_occupancy(
    posts: &PosteriorSequence,
    target: &LabelSequence,
    mode: CollapseMode,
) -> Result<(CtcOutcome, Vec<f64>), CtcError> {
    check_mode(posts, mode)?;
    let symbols = &target.symbols;
    let (log_p, alpha) = forward(posts, symbols, mode)?;
    let beta = backward_pass(posts, symbols, mode);
    let t_len = posts.frames;
    let v = posts.alphabet_size;
    let states = state_symbols(symbols, mode, posts.blank);
    let s_len = states.len();
    let mut q = vec![0.0; t_len * v];
    for t in 0..t_len {
        // log q over states, folded into symbols
        let mut per_symbol = vec![NEG_INF; v];
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab != NEG_INF {
                let k = states[s] as usize;
                per_symbol[k] = log_add(per_symbol[k], ab);
            }
        }
        for k in 0..v {
            if per_symbol[k] != NEG_INF {
                q[t * v + k] = (per_symbol[k] - log_p).exp();
            }
        }
    }
    Ok((
        CtcOutcome {
            loss: -log_p,
            target_len: symbols.len(),
        },
        q,
    ))
}

/// The DP state sequence: the target itself for RepeatMerge, the
/// blank-interleaved expansion for StandardCtc.
fn state_symbols(target: &[Symbol], mode: CollapseMode, blank: Option<usize>) -> Vec<Symbol> {
    match mode {
        CollapseMode::RepeatMerge => target.to_vec(),
        CollapseMode::StandardCtc => {
            let b = blank.unwrap() as Symbol;
            let mut out = Vec::with_capacity(2 * target.len() + 1);
            out.push(b);
            for &s in target {
                out.push(s);
                out.push(b);
            }
            out
        }
    }
}

fn feasibility(posts: &PosteriorSequence, target: &[Symbol], mode: CollapseMode) -> bool {
    let t = posts.frames;
    match mode {
        // A length-T path collapses to exactly T-or-fewer symbols, and a
        // collapsed sequence never holds adjacent duplicates.
        CollapseMode::RepeatMerge => {
            !target.is_empty() && target.len() <= t && adjacent_dups(target) == 0
        }
        // Repeated labels need a separating blank frame.
        CollapseMode::StandardCtc => target.len() + adjacent_dups(target) <= t,
    }
}

/// Forward DP. Returns (total log-probability, alpha matrix T x S).
fn forward(
    posts: &PosteriorSequence,
    target: &[Symbol],
    mode: CollapseMode,
) -> Result<(f64, Vec<f64>), CtcError> {
    let t_len = posts.frames;
    if !feasibility(posts, target, mode) {
        return Err(CtcError::Infeasible {
            target_len: target.len(),
            frames: t_len,
        });
    }
    let states = state_symbols(target, mode, posts.blank);
    let s_len = states.len();
    let mut alpha = vec![NEG_INF; t_len * s_len];

    match mode {
        CollapseMode::RepeatMerge => {
            alpha[0] = posts.log_prob(0, states[0] as usize);
            for t in 1..t_len {
                for s in 0..s_len {
                    let stay = alpha[(t - 1) * s_len + s];
                    let step = if s > 0 {
                        alpha[(t - 1) * s_len + s - 1]
                    } else {
                        NEG_INF
                    };
                    let acc = log_add(stay, step);
                    if acc != NEG_INF {
                        alpha[t * s_len + s] = acc + posts.log_prob(t, states[s] as usize);
                    }
                }
            }
            let log_p = alpha[(t_len - 1) * s_len + s_len - 1];
            if log_p == NEG_INF {
                return Err(CtcError::Infeasible {
                    target_len: target.len(),
                    frames: t_len,
                });
            }
            Ok((log_p, alpha))
        }
        CollapseMode::StandardCtc => {
            let blank = posts.blank.unwrap() as Symbol;
            alpha[0] = posts.log_prob(0, states[0] as usize);
            if s_len > 1 {
                alpha[1] = posts.log_prob(0, states[1] as usize);
            }
            for t in 1..t_len {
                for s in 0..s_len {
                    let mut acc = alpha[(t - 1) * s_len + s];
                    if s >= 1 {
                        acc = log_add(acc, alpha[(t - 1) * s_len + s - 1]);
                    }
                    if s >= 2 && states[s] != blank && states[s] != states[s - 2] {
                        acc = log_add(acc, alpha[(t - 1) * s_len + s - 2]);
                    }
                    if acc != NEG_INF {
                        alpha[t * s_len + s] = acc + posts.log_prob(t, states[s] as usize);
                    }
                }
            }
            let last = alpha[(t_len - 1) * s_len + s_len - 1];
            let prev = if s_len >= 2 {
                alpha[(t_len - 1) * s_len + s_len - 2]
            } else {
                NEG_INF
            };
            let log_p = log_add(last, prev);
            if log_p == NEG_INF {
                return Err(CtcError::Infeasible {
                    target_len: target.len(),
                    frames: t_len,
                });
            }
            Ok((log_p, alpha))
        }
    }
}

/// Backward DP with the exclusive convention (beta excludes the emission at
/// its own frame), so `p = sum_s alpha[t][s] * beta[t][s]` holds at every t.
fn backward_pass(posts: &PosteriorSequence, target: &[Symbol], mode: CollapseMode) -> Vec<f64> {
    let t_len = posts.frames;
    let states = state_symbols(target, mode, posts.blank);
    let s_len = states.len();
    let mut beta = vec![NEG_INF; t_len * s_len];

    match mode {
        CollapseMode::RepeatMerge => {
            beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
            for t in (0..t_len - 1).rev() {
                for s in 0..s_len {
                    let mut acc =
                        beta[(t + 1) * s_len + s] + posts.log_prob(t + 1, states[s] as usize);
                    if s + 1 < s_len {
                        acc = log_add(
                            acc,
                            beta[(t + 1) * s_len + s + 1]
                                + posts.log_prob(t + 1, states[s + 1] as usize),
                        );
                    }
                    beta[t * s_len + s] = acc;
                }
            }
        }
        CollapseMode::StandardCtc => {
            let blank = posts.blank.unwrap() as Symbol;
            beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
            if s_len >= 2 {
                beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
            }
            for t in (0..t_len - 1).rev() {
                for s in 0..s_len {
                    let mut acc =
                        beta[(t + 1) * s_len + s] + posts.log_prob(t + 1, states[s] as usize);
                    if s + 1 < s_len {
                        acc = log_add(
                            acc,
                            beta[(t + 1) * s_len + s + 1]
                                + posts.log_prob(t + 1, states[s + 1] as usize),
                        );
                    }
                    if s + 2 < s_len && states[s + 2] != blank && states[s + 2] != states[s] {
                        acc = log_add(
                            acc,
                            beta[(t + 1) * s_len + s + 2]
                                + posts.log_prob(t + 1, states[s + 2] as usize),
                        );
                    }
                    beta[t * s_len + s] = acc;
                }
            }
        }
    }
    beta
}

/// Exact probability by enumerating all `V^T` paths. Testing oracle only;
/// guarded so it cannot be misused on real workloads.
pub fn brute_force_ctc(
    posts: &PosteriorSequence,
    target: &LabelSequence,
    mode: CollapseMode,
) -> Result<f64, CtcError> {
    const LIMIT: u64 = 10_000_000;
    check_mode(posts, mode)?;
    let t = posts.frames;
    let v = posts.alphabet_size;
    let paths = (v as u64).checked_pow(t as u32).unwrap_or(u64::MAX);
    if paths > LIMIT {
        return Err(CtcError::OracleTooLarge {
            paths,
            limit: LIMIT,
        });
    }
    let blank_sym = posts.blank.map(|b| b as Symbol);
    let mut total = 0.0f64;
    let mut path = vec![0usize; t];
    loop {
        let raw: Vec<Symbol> = path.iter().map(|&s| s as Symbol).collect();
        let collapsed = collapse(&raw, mode, blank_sym)?;
        if collapsed.symbols == target.symbols {
            let mut p = 1.0f64;
            for (frame, &sym) in path.iter().enumerate() {
                p *= posts.log_prob(frame, sym).exp();
            }
            total += p;
        }
        // odometer increment over base-V digits
        let mut i = 0;
        loop {
            if i == t {
                return Ok(total);
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn uniform_posts(t: usize, v: usize, blank: Option<usize>) -> PosteriorSequence {
        let rows = vec![vec![1.0 / v as f64; v]; t];
        PosteriorSequence::from_probs(&rows, blank).unwrap()
    }

    pub(crate) fn random_posts(
        t: usize,
        v: usize,
        blank: Option<usize>,
        rng: &mut rand_pcg::Pcg64Mcg,
    ) -> PosteriorSequence {
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| {
                let raw: Vec<f64> = (0..v).map(|_| rng.gen::<f64>() + 1e-3).collect();
                let sum: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / sum).collect()
            })
            .collect();
        PosteriorSequence::from_probs(&rows, blank).unwrap()
    }

    #[test]
    fn collapse_merges_adjacent_ids() {
        let got = collapse(&[13, 42, 42, 56, 56], CollapseMode::RepeatMerge, None).unwrap();
        assert_eq!(got.symbols, vec![13, 42, 56]);
    }

    #[test]
    fn collapse_empty_is_empty() {
        let got = collapse(&[], CollapseMode::RepeatMerge, None).unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn collapse_standard_merges_then_deblanks() {
        // alphabet {a=0, b=1, -=2}: [a,-,a,a,b] -> [a,a,b]
        let got = collapse(&[0, 2, 0, 0, 1], CollapseMode::StandardCtc, Some(2)).unwrap();
        assert_eq!(got.symbols, vec![0, 0, 1]);
    }

    #[test]
    fn collapse_repeat_merge_is_idempotent() {
        let mut rng = rng_from(3);
        for _ in 0..50 {
            let raw: Vec<Symbol> = (0..rng.gen_range(0..12))
                .map(|_| rng.gen_range(0..4))
                .collect();
            let once = collapse(&raw, CollapseMode::RepeatMerge, None).unwrap();
            let twice = collapse(&once.symbols, CollapseMode::RepeatMerge, None).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn single_frame_single_alignment() {
        let posts = PosteriorSequence::from_probs(&[vec![0.7, 0.3]], Some(1)).unwrap();
        let out = ctc_loss(
            &posts,
            &LabelSequence::new(vec![0]),
            CollapseMode::StandardCtc,
        )
        .unwrap();
        assert!((out.loss - (-(0.7f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn three_frame_uniform_standard_is_5_over_27() {
        // alphabet {a=0, b=1, blank=2}, target [a,b]:
        // alignments aab, abb, ab-, a-b, -ab
        let posts = uniform_posts(3, 3, Some(2));
        let target = LabelSequence::new(vec![0, 1]);
        let out = ctc_loss(&posts, &target, CollapseMode::StandardCtc).unwrap();
        let p = (-out.loss).exp();
        assert!((p - 5.0 / 27.0).abs() < 1e-12, "p = {p}");
        let oracle = brute_force_ctc(&posts, &target, CollapseMode::StandardCtc).unwrap();
        assert!((oracle - 5.0 / 27.0).abs() < 1e-15);
    }

    #[test]
    fn three_frame_uniform_repeat_merge_is_quarter() {
        // alphabet {x=0, y=1}, target [x,y]: alignments xxy, xyy
        let posts = uniform_posts(3, 2, None);
        let target = LabelSequence::new(vec![0, 1]);
        let out = ctc_loss(&posts, &target, CollapseMode::RepeatMerge).unwrap();
        assert!((out.loss - 4.0f64.ln()).abs() < 1e-12);
        let oracle = brute_force_ctc(&posts, &target, CollapseMode::RepeatMerge).unwrap();
        assert!((oracle - 0.25).abs() < 1e-15);
    }

    #[test]
    fn oracle_agrees_with_dp_on_random_instances() {
        let mut rng = rng_from(91);
        let mut checked = 0;
        while checked < 200 {
            let t = rng.gen_range(1..=6);
            let v = rng.gen_range(2..=4usize);
            let u = rng.gen_range(1..=3usize);
            let blank = Some(v - 1);
            let posts = random_posts(t, v, blank, &mut rng);
            let target =
                LabelSequence::new((0..u).map(|_| rng.gen_range(0..v as Symbol - 1)).collect());
            let oracle = brute_force_ctc(&posts, &target, CollapseMode::StandardCtc).unwrap();
            match ctc_loss(&posts, &target, CollapseMode::StandardCtc) {
                Ok(out) => {
                    let p = (-out.loss).exp();
                    assert!(
                        (p - oracle).abs() <= 1e-9 * oracle.max(1e-300),
                        "T={t} V={v} target={:?}: dp {p} oracle {oracle}",
                        target.symbols
                    );
                }
                Err(CtcError::Infeasible { .. }) => assert_eq!(oracle, 0.0),
                Err(e) => panic!("unexpected {e}"),
            }
            checked += 1;
        }
    }

    #[test]
    fn infeasible_when_target_longer_than_frames() {
        let posts = uniform_posts(2, 2, None);
        let err = ctc_loss(
            &posts,
            &LabelSequence::new(vec![0, 1, 0]),
            CollapseMode::RepeatMerge,
        )
        .unwrap_err();
        assert!(matches!(err, CtcError::Infeasible { .. }));
    }

    #[test]
    fn impossible_full_alphabet_target_is_zero_in_oracle() {
        let posts = uniform_posts(2, 3, Some(2));
        // needs at least 4 frames: a b a b over a 2-symbol non-blank alphabet
        let target = LabelSequence::new(vec![0, 1, 0, 1]);
        let p = brute_force_ctc(&posts, &target, CollapseMode::StandardCtc).unwrap();
        assert_eq!(p, 0.0);
        assert!(matches!(
            ctc_loss(&posts, &target, CollapseMode::StandardCtc),
            Err(CtcError::Infeasible { .. })
        ));
    }

    #[test]
    fn single_frame_gradient_is_softmax_minus_onehot() {
        let posts = PosteriorSequence::from_probs(&[vec![0.6, 0.3, 0.1]], Some(2)).unwrap();
        let target = LabelSequence::new(vec![0]);
        let (_, grad) = ctc_loss_grad(&posts, &target, CollapseMode::StandardCtc).unwrap();
        let expect = [0.6 - 1.0, 0.3, 0.1];
        for (g, e) in grad.iter().zip(expect.iter()) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = rng_from(17);
        for case in 0..40 {
            let t = rng.gen_range(1..=5);
            let v = rng.gen_range(2..=4usize);
            let u = rng.gen_range(1..=3usize);
            let (mode, blank) = if case % 2 == 0 {
                (CollapseMode::StandardCtc, Some(v - 1))
            } else {
                (CollapseMode::RepeatMerge, None)
            };
            let max_sym = if blank.is_some() { v - 1 } else { v };
            let mut symbols: Vec<Symbol> = Vec::new();
            for _ in 0..u {
                let mut s = rng.gen_range(0..max_sym as Symbol);
                if mode == CollapseMode::RepeatMerge {
                    while symbols.last() == Some(&s) {
                        s = rng.gen_range(0..max_sym as Symbol);
                    }
                }
                symbols.push(s);
            }
            let target = LabelSequence::new(symbols);
            let logits: Vec<f64> = (0..t * v).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let loss_of = |logits: &[f64]| -> Option<f64> {
                let rows: Vec<Vec<f64>> = (0..t)
                    .map(|i| {
                        let row = &logits[i * v..(i + 1) * v];
                        let lse = log_sum_exp(row);
                        row.iter().map(|x| x - lse).collect()
                    })
                    .collect();
                let posts = PosteriorSequence::from_log_probs(&rows, blank).unwrap();
                ctc_loss(&posts, &target, mode).ok().map(|o| o.loss)
            };
            let base = match loss_of(&logits) {
                Some(l) => l,
                None => continue, // infeasible draw
            };
            assert!(base.is_finite());
            let rows: Vec<Vec<f64>> = (0..t)
                .map(|i| {
                    let row = &logits[i * v..(i + 1) * v];
                    let lse = log_sum_exp(row);
                    row.iter().map(|x| x - lse).collect()
                })
                .collect();
            let posts = PosteriorSequence::from_log_probs(&rows, blank).unwrap();
            let (_, grad) = ctc_loss_grad(&posts, &target, mode).unwrap();
            let h = 1e-5;
            for i in 0..t * v {
                let mut plus = logits.clone();
                plus[i] += h;
                let mut minus = logits.clone();
                minus[i] -= h;
                let fd = (loss_of(&plus).unwrap() - loss_of(&minus).unwrap()) / (2.0 * h);
                let denom = fd.abs().max(grad[i].abs()).max(1e-6);
                assert!(
                    (fd - grad[i]).abs() / denom < 1e-4,
                    "case {case} idx {i}: fd {fd} vs dp {}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn infeasible_target_emits_no_gradient() {
        let posts = uniform_posts(1, 3, Some(2));
        let target = LabelSequence::new(vec![0, 1]);
        assert!(matches!(
            ctc_loss_grad(&posts, &target, CollapseMode::StandardCtc),
            Err(CtcError::Infeasible { .. })
        ));
    }

    #[test]
    fn repeat_merge_target_probabilities_partition_path_space() {
        // every length-T path collapses to exactly one target, so summing
        // p(l|P) over all collapsed sequences must give 1
        let mut rng = rng_from(29);
        for (t, v) in [(2usize, 2usize), (3, 3), (4, 2), (4, 3)] {
            let posts = random_posts(t, v, None, &mut rng);
            let mut total = 0.0;
            // enumerate all collapsed sequences of length 1..=t
            let mut stack: Vec<Vec<Symbol>> = (0..v as Symbol).map(|s| vec![s]).collect();
            while let Some(seq) = stack.pop() {
                if let Ok(out) = ctc_loss(
                    &posts,
                    &LabelSequence::new(seq.clone()),
                    CollapseMode::RepeatMerge,
                ) {
                    total += (-out.loss).exp();
                }
                if seq.len() < t {
                    for s in 0..v as Symbol {
                        if *seq.last().unwrap() != s {
                            let mut next = seq.clone();
                            next.push(s);
                            stack.push(next);
                        }
                    }
                }
            }
            assert!((total - 1.0).abs() < 1e-9, "T={t} V={v}: total {total}");
        }
    }

    #[test]
    fn appending_uniform_frame_preserves_feasibility() {
        let mut rng = rng_from(41);
        for _ in 0..50 {
            let t = rng.gen_range(2..=5);
            let v = 3usize;
            let posts = random_posts(t, v, None, &mut rng);
            let mut symbols: Vec<Symbol> = Vec::new();
            for _ in 0..rng.gen_range(1..=t) {
                let mut s = rng.gen_range(0..v as Symbol);
                while symbols.last() == Some(&s) {
                    s = rng.gen_range(0..v as Symbol);
                }
                symbols.push(s);
            }
            let target = LabelSequence::new(symbols);
            if ctc_loss(&posts, &target, CollapseMode::RepeatMerge).is_ok() {
                let mut rows: Vec<Vec<f64>> = (0..t).map(|i| posts.prob_row(i)).collect();
                rows.push(vec![1.0 / v as f64; v]);
                let grown = PosteriorSequence::from_probs(&rows, None).unwrap();
                let out = ctc_loss(&grown, &target, CollapseMode::RepeatMerge).unwrap();
                assert!(out.loss.is_finite());
            }
        }
    }

    #[test]
    fn log_domain_stable_for_long_sequences() {
        let mut rng = rng_from(53);
        let posts = random_posts(2000, 42, Some(41), &mut rng);
        let target = LabelSequence::new((0..30).map(|i| (i % 40) as Symbol).collect());
        let out = ctc_loss(&posts, &target, CollapseMode::StandardCtc).unwrap();
        assert!(out.loss.is_finite() && out.loss > 0.0);
        let norm = out.normalized();
        assert!(norm.is_finite());
    }

    #[test]
    fn occupancy_rows_sum_to_one() {
        let mut rng = rng_from(67);
        let posts = random_posts(6, 4, Some(3), &mut rng);
        let target = LabelSequence::new(vec![0, 1, 2]);
        let (_, q) = ctc_occupancy(&posts, &target, CollapseMode::StandardCtc).unwrap();
        for t in 0..6 {
            let row_sum: f64 = q[t * 4..(t + 1) * 4].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-9, "t={t}: {row_sum}");
        }
    }
}
