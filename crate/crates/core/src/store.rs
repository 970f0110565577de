//! Cache store: L1 and L2 entries under one capacity budget with LRU
//! eviction and per-intent caps.
//!
//! A logical clock orders recency: installs and hits both advance it.
//! Capacity counts entries across both levels; the per-intent cap applies
//! within a level. When an install would breach the per-intent cap, that
//! intent's least-recent entry in that level is evicted first; otherwise a
//! full store evicts the globally least-recent entry.

use std::path::Path;

use thiserror::Error;

use crate::l1::L1Entry;
use crate::l2::L2Entry;

pub const DEFAULT_CAPACITY: usize = 60;
pub const DEFAULT_PER_INTENT_CAP: usize = 8;

const SNAPSHOT_MAGIC: &[u8; 4] = b"SCS1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad preload: {0}")]
    BadPreload(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    L1,
    L2,
}

#[derive(Debug)]
pub struct CacheStore {
    pub capacity: usize,
    pub per_intent_cap: usize,
    l1: Vec<L1Entry>,
    l2: Vec<L2Entry>,
    clock: u64,
}

impl CacheStore {
    pub fn new(capacity: usize, per_intent_cap: usize) -> Self {
        assert!(capacity >= 1 && per_intent_cap >= 1);
        CacheStore {
            capacity,
            per_intent_cap,
            l1: Vec::new(),
            l2: Vec::new(),
            clock: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.l1.len() + self.l2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn l1_entries(&self) -> &[L1Entry] {
        &self.l1
    }

    pub fn l2_entries(&self) -> &[L2Entry] {
        &self.l2
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Mark an L1 entry as hit (recency refresh only).
    pub fn touch_l1(&mut self, idx: usize) {
        let now = self.tick();
        self.l1[idx].last_hit = now;
    }

    pub fn touch_l2(&mut self, idx: usize) {
        let now = self.tick();
        self.l2[idx].last_hit = now;
    }

    fn evict_lru_for_intent(&mut self, level: Level, intent: u32) -> bool {
        match level {
            Level::L1 => {
                let victim = self
                    .l1
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.intent == intent)
                    .min_by_key(|(_, e)| e.last_hit)
                    .map(|(i, _)| i);
                if let Some(i) = victim {
                    self.l1.remove(i);
                    return true;
                }
            }
            Level::L2 => {
                let victim = self
                    .l2
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.intent == intent)
                    .min_by_key(|(_, e)| e.last_hit)
                    .map(|(i, _)| i);
                if let Some(i) = victim {
                    self.l2.remove(i);
                    return true;
                }
            }
        }
        false
    }

    fn evict_global_lru(&mut self) {
        let l1_oldest = self.l1.iter().map(|e| e.last_hit).min();
        let l2_oldest = self.l2.iter().map(|e| e.last_hit).min();
        match (l1_oldest, l2_oldest) {
            (Some(a), Some(b)) if a <= b => {
                let i = self.l1.iter().position(|e| e.last_hit == a).unwrap();
                self.l1.remove(i);
            }
            (_, Some(b)) => {
                let i = self.l2.iter().position(|e| e.last_hit == b).unwrap();
                self.l2.remove(i);
            }
            (Some(a), None) => {
                let i = self.l1.iter().position(|e| e.last_hit == a).unwrap();
                self.l1.remove(i);
            }
            (None, None) => {}
        }
    }

    fn make_room(&mut self, level: Level, intent: u32) {
        let at_intent_cap = match level {
            Level::L1 => {
                self.l1.iter().filter(|e| e.intent == intent).count() >= self.per_intent_cap
            }
            Level::L2 => {
                self.l2.iter().filter(|e| e.intent == intent).count() >= self.per_intent_cap
            }
        };
        if at_intent_cap {
            self.evict_lru_for_intent(level, intent);
        }
        if self.len() >= self.capacity {
            self.evict_global_lru();
        }
    }

    pub fn install_l1(&mut self, mut entry: L1Entry) {
        self.make_room(Level::L1, entry.intent);
        let now = self.tick();
        entry.created_at = now;
        entry.last_hit = now;
        self.l1.push(entry);
    }

    pub fn install_l2(&mut self, mut entry: L2Entry) {
        self.make_room(Level::L2, entry.intent);
        let now = self.tick();
        entry.created_at = now;
        entry.last_hit = now;
        self.l2.push(entry);
    }

    /// Every stored-state invariant, checked in one place for fuzzing.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.len() > self.capacity {
            return Err(format!(
                "size {} exceeds capacity {}",
                self.len(),
                self.capacity
            ));
        }
        let mut counts: std::collections::HashMap<(u8, u32), usize> =
            std::collections::HashMap::new();
        for e in &self.l1 {
            *counts.entry((1, e.intent)).or_default() += 1;
            if e.last_hit > self.clock || e.created_at > self.clock {
                return Err("timestamp ahead of clock".into());
            }
            if e.last_hit < e.created_at {
                return Err("last_hit before creation".into());
            }
        }
        for e in &self.l2 {
            *counts.entry((2, e.intent)).or_default() += 1;
            if e.last_hit > self.clock || e.created_at > self.clock {
                return Err("timestamp ahead of clock".into());
            }
            if e.last_hit < e.created_at {
                return Err("last_hit before creation".into());
            }
        }
        for ((level, intent), n) in counts {
            if n > self.per_intent_cap {
                return Err(format!(
                    "intent {intent} holds {n} L{level} entries, cap {}",
                    self.per_intent_cap
                ));
            }
        }
        Ok(())
    }

    /// Stable content digest of everything except recency metadata; hit
    /// purity checks compare this before and after lookups.
    pub fn content_digest(&self) -> u64 {
        let mut bytes = Vec::new();
        for e in &self.l1 {
            let mut c = e.clone();
            c.created_at = 0;
            c.last_hit = 0;
            bytes.extend_from_slice(&c.to_bytes());
        }
        for e in &self.l2 {
            let mut c = e.clone();
            c.created_at = 0;
            c.last_hit = 0;
            bytes.extend_from_slice(&c.to_bytes());
        }
        crate::rng::fnv1a64(&bytes)
    }

    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&(self.capacity as u32).to_le_bytes());
        out.extend_from_slice(&(self.per_intent_cap as u32).to_le_bytes());
        out.extend_from_slice(&self.clock.to_le_bytes());
        out.extend_from_slice(&(self.l1.len() as u32).to_le_bytes());
        for e in &self.l1 {
            out.extend_from_slice(&e.to_bytes());
        }
        out.extend_from_slice(&(self.l2.len() as u32).to_le_bytes());
        for e in &self.l2 {
            out.extend_from_slice(&e.to_bytes());
        }
        out
    }

    pub fn from_snapshot_bytes(bytes: &[u8]) -> Result<CacheStore, StoreError> {
        let bad = |m: &str| StoreError::BadPreload(m.to_string());
        if bytes.len() < 24 || &bytes[..4] != SNAPSHOT_MAGIC {
            return Err(bad("bad magic"));
        }
        let capacity = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let per_intent_cap = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let clock = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        if capacity == 0 || per_intent_cap == 0 {
            return Err(bad("zero capacity or cap"));
        }
        let mut pos = 20usize;
        let n_l1 = u32::from_le_bytes(
            bytes
                .get(pos..pos + 4)
                .ok_or_else(|| bad("truncated"))?
                .try_into()
                .unwrap(),
        ) as usize;
        pos += 4;
        let mut l1 = Vec::with_capacity(n_l1);
        for _ in 0..n_l1 {
            let (e, used) =
                L1Entry::from_bytes(&bytes[pos..]).map_err(|e| bad(&format!("l1 entry: {e}")))?;
            pos += used;
            l1.push(e);
        }
        let n_l2 = u32::from_le_bytes(
            bytes
                .get(pos..pos + 4)
                .ok_or_else(|| bad("truncated"))?
                .try_into()
                .unwrap(),
        ) as usize;
        pos += 4;
        let mut l2 = Vec::with_capacity(n_l2);
        for _ in 0..n_l2 {
            let (e, used) =
                L2Entry::from_bytes(&bytes[pos..]).map_err(|e| bad(&format!("l2 entry: {e}")))?;
            pos += used;
            l2.push(e);
        }
        let store = CacheStore {
            capacity,
            per_intent_cap,
            l1,
            l2,
            clock,
        };
        store
            .check_invariants()
            .map_err(|m| bad(&format!("invariant violated: {m}")))?;
        Ok(store)
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<(), StoreError> {
        std::fs::write(path, self.to_snapshot_bytes())?;
        Ok(())
    }

    pub fn load_snapshot(path: &Path) -> Result<CacheStore, StoreError> {
        Self::from_snapshot_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::LabelSequence;
    use crate::l1::CentroidSet;

    fn l1_entry(intent: u32, tag: u16) -> L1Entry {
        L1Entry {
            centroids: CentroidSet {
                centroids: vec![vec![tag as f32, 0.0], vec![0.0, 1.0 + tag as f32]],
                utterance_id: format!("u{tag}"),
            },
            key: LabelSequence::new(vec![0, 1]),
            intent,
            transcript_id: intent,
            created_at: 0,
            last_hit: 0,
        }
    }

    fn l2_entry(intent: u32, tag: u16) -> L2Entry {
        L2Entry {
            key: LabelSequence::new(vec![tag % 40, (tag + 1) % 40]),
            word_lens: vec![2],
            intent,
            transcript_id: intent,
            created_at: 0,
            last_hit: 0,
        }
    }

    #[test]
    fn insert_at_capacity_evicts_lru() {
        let mut s = CacheStore::new(3, 8);
        s.install_l1(l1_entry(0, 0));
        s.install_l1(l1_entry(1, 1));
        s.install_l1(l1_entry(2, 2));
        assert_eq!(s.len(), 3);
        // entry 0 is oldest; inserting a fourth evicts it
        s.install_l2(l2_entry(3, 3));
        assert_eq!(s.len(), 3);
        assert!(s.l1_entries().iter().all(|e| e.intent != 0));
        s.check_invariants().unwrap();
    }

    #[test]
    fn per_intent_cap_holds() {
        let mut s = CacheStore::new(60, 8);
        for i in 0..9u16 {
            s.install_l2(l2_entry(7, i));
        }
        let count = s.l2_entries().iter().filter(|e| e.intent == 7).count();
        assert_eq!(count, 8);
        s.check_invariants().unwrap();
    }

    #[test]
    fn hit_refreshes_recency_and_survives_eviction() {
        let mut s = CacheStore::new(3, 8);
        s.install_l1(l1_entry(0, 0));
        s.install_l1(l1_entry(1, 1));
        s.install_l1(l1_entry(2, 2));
        s.touch_l1(0); // refresh the oldest
        s.install_l1(l1_entry(3, 3)); // evicts intent 1 now
        assert!(s.l1_entries().iter().any(|e| e.intent == 0));
        assert!(s.l1_entries().iter().all(|e| e.intent != 1));
    }

    #[test]
    fn touch_changes_only_recency() {
        let mut s = CacheStore::new(4, 8);
        s.install_l1(l1_entry(0, 0));
        s.install_l2(l2_entry(1, 1));
        let digest = s.content_digest();
        s.touch_l1(0);
        s.touch_l2(0);
        assert_eq!(s.content_digest(), digest);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut s = CacheStore::new(10, 4);
        for i in 0..3u16 {
            s.install_l1(l1_entry(i as u32, i));
            s.install_l2(l2_entry(i as u32, i + 10));
        }
        let bytes = s.to_snapshot_bytes();
        let back = CacheStore::from_snapshot_bytes(&bytes).unwrap();
        assert_eq!(back.len(), s.len());
        assert_eq!(back.content_digest(), s.content_digest());
        assert_eq!(back.clock(), s.clock());
    }

    #[test]
    fn malformed_snapshot_is_bad_preload() {
        let err = CacheStore::from_snapshot_bytes(b"garbage").unwrap_err();
        assert!(matches!(err, StoreError::BadPreload(_)));
        let mut s = CacheStore::new(4, 2);
        s.install_l2(l2_entry(0, 0));
        let mut bytes = s.to_snapshot_bytes();
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(
            CacheStore::from_snapshot_bytes(&bytes),
            Err(StoreError::BadPreload(_))
        ));
    }
}
