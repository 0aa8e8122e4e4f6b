//! Identity-keyed track histories with lifespan bookkeeping.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// One object's state vector at one frame.
pub type Embedding = Vec<f64>;

/// Embeddings with object probability at or below this are never stored.
pub const RETENTION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub identity: u64,
    /// First frame the track was appended at.
    pub start: u32,
    /// Last appended frame once the track has been terminated.
    pub end: Option<u32>,
    /// `(frame, embedding)`, strictly increasing frames, at most
    /// `alignment_width` entries.
    pub history: VecDeque<(u32, Embedding)>,
    /// Consecutive frames without an append.
    pub misses: u32,
    last_frame: u32,
}

impl Track {
    pub fn is_open(&self) -> bool {
        self.end.is_none()
    }

    pub fn last_frame(&self) -> u32 {
        self.last_frame
    }

    pub fn latest(&self) -> Option<&Embedding> {
        self.history.back().map(|(_, e)| e)
    }
}

/// The set of all tracks of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackSet {
    tracks: BTreeMap<u64, Track>,
    alignment_width: usize,
    next_identity: u64,
}

/// Row of a right-aligned view: column `j` holds the embedding of absolute
/// frame `first_frame + j`, or `None` (padding).
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedRow {
    pub identity: u64,
    pub cells: Vec<Option<Embedding>>,
}

impl AlignedRow {
    pub fn mask(&self) -> Vec<bool> {
        self.cells.iter().map(Option::is_some).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.iter().all(Option::is_none)
    }
}

/// `num_tracks × width` right-aligned history matrix with validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedView {
    pub width: usize,
    /// Absolute frame of column 0; negative before the sequence start.
    pub first_frame: i64,
    pub rows: Vec<AlignedRow>,
}

impl AlignedView {
    pub fn column_of(&self, frame: u32) -> Option<usize> {
        let j = frame as i64 - self.first_frame;
        (0..self.width as i64).contains(&j).then_some(j as usize)
    }

    pub fn frame_of(&self, column: usize) -> i64 {
        self.first_frame + column as i64
    }
}

impl TrackSet {
    pub fn new(alignment_width: usize) -> Self {
        assert!(alignment_width >= 1, "alignment width must be at least 1");
        Self {
            tracks: BTreeMap::new(),
            alignment_width,
            next_identity: 1,
        }
    }

    pub fn alignment_width(&self) -> usize {
        self.alignment_width
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn get(&self, identity: u64) -> Option<&Track> {
        self.tracks.get(&identity)
    }

    pub fn tracks(&self) -> impl Iterator<Item = &Track> {
        self.tracks.values()
    }

    /// Open tracks in identity order.
    pub fn active(&self) -> impl Iterator<Item = &Track> {
        self.tracks.values().filter(|t| t.is_open())
    }

    /// Next unused identity; identities are never reused.
    pub fn peek_identity(&self) -> u64 {
        self.next_identity
    }

    /// Stores `embedding` for `identity` at `frame` when
    /// `class_prob > 0.5`; an unseen identity opens a new track starting at
    /// `frame`. Returns whether anything was stored.
    pub fn append(&mut self, identity: u64, frame: u32, embedding: Embedding, class_prob: f64) -> Result<bool> {
        if let Some(track) = self.tracks.get(&identity) {
            if !track.is_open() {
                return Err(Error::Lookup(identity));
            }
            if frame <= track.last_frame {
                return Err(Error::Ordering {
                    identity,
                    frame,
                    latest: track.last_frame,
                });
            }
        }
        if class_prob <= RETENTION_THRESHOLD {
            return Ok(false);
        }
        let width = self.alignment_width;
        let track = self.tracks.entry(identity).or_insert_with(|| Track {
            identity,
            start: frame,
            end: None,
            history: VecDeque::new(),
            misses: 0,
            last_frame: frame,
        });
        track.history.push_back((frame, embedding));
        track.last_frame = frame;
        track.misses = 0;
        while track.history.len() > width {
            track.history.pop_front();
        }
        self.next_identity = self.next_identity.max(identity + 1);
        Ok(true)
    }

    /// Opens a track under a fresh identity when `class_prob > 0.5`.
    pub fn spawn(&mut self, frame: u32, embedding: Embedding, class_prob: f64) -> Option<u64> {
        let identity = self.next_identity;
        match self.append(identity, frame, embedding, class_prob) {
            Ok(true) => Some(identity),
            _ => None,
        }
    }

    /// Counts a frame without an append; terminates the track once `patience`
    /// consecutive misses accumulate. Returns whether it was terminated.
    pub fn record_miss(&mut self, identity: u64, frame: u32, patience: u32) -> Result<bool> {
        let track = self
            .tracks
            .get_mut(&identity)
            .filter(|t| t.is_open())
            .ok_or(Error::Lookup(identity))?;
        track.misses += 1;
        if track.misses >= patience {
            self.terminate(identity, frame)?;
            return Ok(true);
        }
        Ok(false)
    }

    /// Closes a track; its end is the last frame it was appended at.
    pub fn terminate(&mut self, identity: u64, _frame: u32) -> Result<()> {
        let track = self
            .tracks
            .get_mut(&identity)
            .filter(|t| t.is_open())
            .ok_or(Error::Lookup(identity))?;
        track.end = Some(track.last_frame);
        Ok(())
    }

    /// Removes history entries, e.g. for augmentation. Tracks left without
    /// history are dropped entirely.
    pub fn retain_entries(&mut self, mut keep: impl FnMut(u64, u32) -> bool) {
        for track in self.tracks.values_mut() {
            let id = track.identity;
            track.history.retain(|(f, _)| keep(id, *f));
        }
        self.tracks.retain(|_, t| !t.history.is_empty());
    }

    /// Inserts an entry at its time-sorted position (frames need not be the
    /// latest). Replaces an existing entry at the same frame.
    pub fn insert_entry(&mut self, identity: u64, frame: u32, embedding: Embedding) {
        let width = self.alignment_width;
        let track = self.tracks.entry(identity).or_insert_with(|| Track {
            identity,
            start: frame,
            end: None,
            history: VecDeque::new(),
            misses: 0,
            last_frame: frame,
        });
        match track.history.binary_search_by_key(&frame, |(f, _)| *f) {
            Ok(i) => track.history[i].1 = embedding,
            Err(i) => track.history.insert(i, (frame, embedding)),
        }
        while track.history.len() > width {
            track.history.pop_front();
        }
        track.start = track.start.min(frame);
        track.last_frame = track.last_frame.max(frame);
        self.next_identity = self.next_identity.max(identity + 1);
    }

    /// Open tracks laid out so that column `j` of every row holds the entry of
    /// frame `current_frame − width + j`.
    pub fn right_align(&self, current_frame: u32) -> AlignedView {
        let width = self.alignment_width;
        let first_frame = current_frame as i64 - width as i64;
        let rows = self
            .active()
            .map(|track| {
                let mut cells = alloc::vec![None; width];
                for (frame, emb) in &track.history {
                    let j = *frame as i64 - first_frame;
                    if (0..width as i64).contains(&j) {
                        cells[j as usize] = Some(emb.clone());
                    }
                }
                AlignedRow {
                    identity: track.identity,
                    cells,
                }
            })
            .collect();
        AlignedView {
            width,
            first_frame,
            rows,
        }
    }
}
