//! Phoneme cache (L2).
//!
//! Queries run the learnable recurrent extractor to per-frame phoneme
//! posteriors (41 context-independent phonemes plus the «sp» blank) and
//! match them against cloud-supplied reference phoneme sequences with the
//! standard blank-aware alignment loss.
//!
//! Reference sequences arrive in a transport form with the blank marking
//! word boundaries; the stored match target strips those markers (the blank
//! is the alignment epsilon and must not appear in targets), keeping the
//! word structure alongside for display.

use thiserror::Error;

use crate::autodiff::TensorError;
use crate::ctc::{self, CollapseMode, CtcError, LabelSequence, PosteriorSequence, Symbol};
use crate::dsp::FeatureSequence;
use crate::gru::GruStack;

/// 41 context-independent phonemes; index 41 is the «sp» blank.
pub const PHONEMES: [&str; 41] = [
    "AA", "AE", "AH", "AO", "AW", "AX", "AY", "B", "CH", "D", "DH", "DX", "EH", "ER", "EY", "F",
    "G", "HH", "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T",
    "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
];
pub const PHONEME_COUNT: usize = PHONEMES.len();
pub const ALPHABET_SIZE: usize = PHONEME_COUNT + 1;
pub const BLANK: usize = PHONEME_COUNT;
pub const BLANK_NAME: &str = "sp";

pub fn phoneme_name(id: usize) -> &'static str {
    if id == BLANK {
        BLANK_NAME
    } else {
        PHONEMES[id]
    }
}

#[derive(Debug, Error)]
pub enum L2Error {
    #[error("model: {0}")]
    Model(#[from] TensorError),
    #[error("ctc: {0}")]
    Ctc(#[from] CtcError),
    #[error("entry record: {0}")]
    BadRecord(String),
    #[error("empty phoneme key")]
    EmptyKey,
}

/// One phoneme cache entry.
#[derive(Debug, Clone, PartialEq)]
pub struct L2Entry {
    /// Blank-free match target.
    pub key: LabelSequence,
    /// Phonemes per word, in order (transport-form structure, display only).
    pub word_lens: Vec<usize>,
    pub intent: u32,
    pub transcript_id: u32,
    pub created_at: u64,
    pub last_hit: u64,
}

/// Split a transport-form sequence (blank symbols between words) into the
/// blank-free match target plus the per-word lengths.
pub fn strip_boundaries(transport: &[Symbol]) -> (LabelSequence, Vec<usize>) {
    let mut symbols = Vec::with_capacity(transport.len());
    let mut word_lens = Vec::new();
    let mut current = 0usize;
    for &s in transport {
        if s as usize == BLANK {
            if current > 0 {
                word_lens.push(current);
                current = 0;
            }
        } else {
            symbols.push(s);
            current += 1;
        }
    }
    if current > 0 {
        word_lens.push(current);
    }
    (LabelSequence::new(symbols), word_lens)
}

impl L2Entry {
    pub fn from_transport(
        transport: &[Symbol],
        intent: u32,
        transcript_id: u32,
    ) -> Result<L2Entry, L2Error> {
        let (key, word_lens) = strip_boundaries(transport);
        if key.is_empty() {
            return Err(L2Error::EmptyKey);
        }
        Ok(L2Entry {
            key,
            word_lens,
            intent,
            transcript_id,
            created_at: 0,
            last_hit: 0,
        })
    }

    /// Transport form: phonemes with the blank re-inserted between words.
    pub fn transport_form(&self) -> Vec<Symbol> {
        let mut out = Vec::with_capacity(self.key.len() + self.word_lens.len());
        let mut idx = 0usize;
        for (w, &len) in self.word_lens.iter().enumerate() {
            if w > 0 {
                out.push(BLANK as Symbol);
            }
            for _ in 0..len {
                out.push(self.key.symbols[idx]);
                idx += 1;
            }
        }
        out
    }

    pub fn display_key(&self) -> String {
        self.transport_form()
            .iter()
            .map(|&s| phoneme_name(s as usize))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn size_bytes(&self) -> usize {
        self.to_bytes().len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"L2E1");
        out.extend_from_slice(&(self.key.len() as u16).to_le_bytes());
        for &s in &self.key.symbols {
            out.push(s as u8);
        }
        out.extend_from_slice(&(self.word_lens.len() as u16).to_le_bytes());
        for &w in &self.word_lens {
            out.push(w as u8);
        }
        out.extend_from_slice(&self.intent.to_le_bytes());
        out.extend_from_slice(&self.transcript_id.to_le_bytes());
        out.extend_from_slice(&self.created_at.to_le_bytes());
        out.extend_from_slice(&self.last_hit.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(L2Entry, usize), L2Error> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], L2Error> {
            if *pos + n > bytes.len() {
                return Err(L2Error::BadRecord("truncated".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != b"L2E1" {
            return Err(L2Error::BadRecord("bad magic".into()));
        }
        let key_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let symbols: Vec<Symbol> = take(&mut pos, key_len)?
            .iter()
            .map(|&b| b as Symbol)
            .collect();
        if symbols.iter().any(|&s| s as usize >= BLANK) {
            return Err(L2Error::BadRecord(
                "key symbol outside phoneme range".into(),
            ));
        }
        let n_words = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let word_lens: Vec<usize> = take(&mut pos, n_words)?
            .iter()
            .map(|&b| b as usize)
            .collect();
        let intent = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let transcript_id = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let created_at = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let last_hit = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        Ok((
            L2Entry {
                key: LabelSequence::new(symbols),
                word_lens,
                intent,
                transcript_id,
                created_at,
                last_hit,
            },
            pos,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct L2MatchResult {
    pub best_entry: Option<usize>,
    /// Length-normalized loss of the best entry.
    pub loss: f64,
    pub hit: bool,
}

/// Per-frame phoneme posteriors for a feature sequence.
pub fn phoneme_posteriors(
    features: &FeatureSequence,
    model: &GruStack,
) -> Result<PosteriorSequence, L2Error> {
    Ok(model.posteriors(&features.frames, Some(BLANK))?)
}

/// Normalized loss of posteriors against one entry. Entries too long for the
/// frame budget are skipped with infinity rather than an error, so one stale
/// entry cannot poison a lookup.
pub fn entry_loss(posts: &PosteriorSequence, entry: &L2Entry) -> f64 {
    let u = entry.key.len();
    if 2 * u + 1 > posts.frames() {
        return f64::INFINITY;
    }
    match ctc::ctc_loss(posts, &entry.key, CollapseMode::StandardCtc) {
        Ok(out) => out.normalized(),
        Err(_) => f64::INFINITY,
    }
}

/// Match features against every entry through the given extractor snapshot.
pub fn match_query(
    features: &FeatureSequence,
    model: &GruStack,
    entries: &[L2Entry],
    threshold_fn: &dyn Fn(usize) -> f64,
) -> Result<L2MatchResult, L2Error> {
    if entries.is_empty() {
        return Ok(L2MatchResult {
            best_entry: None,
            loss: f64::INFINITY,
            hit: false,
        });
    }
    let posts = phoneme_posteriors(features, model)?;
    let mut best: Option<usize> = None;
    let mut best_loss = f64::INFINITY;
    for (i, entry) in entries.iter().enumerate() {
        let loss = entry_loss(&posts, entry);
        if loss < best_loss {
            best_loss = loss;
            best = Some(i);
        }
    }
    let hit = match best {
        Some(i) => best_loss <= threshold_fn(entries[i].key.len()),
        None => false,
    };
    Ok(L2MatchResult {
        best_entry: best,
        loss: best_loss,
        hit,
    })
}
