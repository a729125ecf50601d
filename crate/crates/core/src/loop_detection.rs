//! Place-recognition descriptor store and the consecutive-match loop rule.

use thiserror::Error;

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"VDSC";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoopError {
    #[error("frame {0} already has a descriptor")]
    DuplicateFrame(u32),
    #[error("descriptor has dimension {got}, store expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("descriptor for frame {0} has zero or non-finite norm")]
    InvalidVector(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub frame_id: u32,
    pub vector: Vec<f32>,
}

impl Descriptor {
    /// Unit-norm copy (computed in double precision).
    pub fn normalized(&self) -> Option<Descriptor> {
        let n = self.vector.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return None;
        }
        Some(Descriptor { frame_id: self.frame_id, vector: self.vector.iter().map(|&v| (v as f64 / n) as f32).collect() })
    }

    pub fn dot(&self, other: &Descriptor) -> f64 {
        self.vector.iter().zip(&other.vector).map(|(&a, &b)| a as f64 * b as f64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopCandidate {
    pub query_frame: u32,
    pub match_frame: u32,
    pub similarity: f64,
    pub streak: u32,
}

/// Flat store scanned linearly on every query.
#[derive(Debug, Clone)]
pub struct DescriptorStore {
    pub threshold: f64,
    entries: Vec<Descriptor>,
    dim: Option<usize>,
}

impl Default for DescriptorStore {
    fn default() -> Self {
        Self::new(0.9)
    }
}

impl DescriptorStore {
    pub fn new(threshold: f64) -> Self {
        Self { threshold, entries: Vec::new(), dim: None }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, frame_id: u32) -> Option<&Descriptor> {
        self.entries.iter().find(|d| d.frame_id == frame_id)
    }

    pub fn add(&mut self, descriptor: &Descriptor) -> Result<(), LoopError> {
        if let Some(dim) = self.dim {
            if descriptor.vector.len() != dim {
                return Err(LoopError::DimensionMismatch { expected: dim, got: descriptor.vector.len() });
            }
        }
        if self.get(descriptor.frame_id).is_some() {
            return Err(LoopError::DuplicateFrame(descriptor.frame_id));
        }
        let d = descriptor.normalized().ok_or(LoopError::InvalidVector(descriptor.frame_id))?;
        self.dim = Some(d.vector.len());
        self.entries.push(d);
        Ok(())
    }

    /// Best stored frame with `match + temporal_exclusion <= query` and similarity at or above the threshold.
    /// Ties go to the earliest frame.
    pub fn query(&self, descriptor: &Descriptor, temporal_exclusion: u32) -> Option<LoopCandidate> {
        let q = descriptor.normalized()?;
        let mut best: Option<(u32, f64)> = None;
        for e in &self.entries {
            if e.vector.len() != q.vector.len() || e.frame_id as u64 + temporal_exclusion as u64 > q.frame_id as u64 {
                continue;
            }
            let s = e.dot(&q);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((e.frame_id, s));
            }
        }
        let (match_frame, similarity) = best?;
        (similarity >= self.threshold).then_some(LoopCandidate {
            query_frame: q.frame_id,
            match_frame,
            similarity,
            streak: 1,
        })
    }
}

/// Emits a loop when `required` consecutive query frames match frames that advance
/// consistently (each match within `tolerance` of the previous match plus the query step).
#[derive(Debug, Clone)]
pub struct LoopConfirmer {
    pub required: u32,
    pub tolerance: u32,
    /// Minimum number of frames between two emitted loops.
    pub cooldown: u32,
    last: Option<LoopCandidate>,
    last_emitted: Option<u32>,
}

impl Default for LoopConfirmer {
    fn default() -> Self {
        Self::new(3, 2, 50)
    }
}

impl LoopConfirmer {
    pub fn new(required: u32, tolerance: u32, cooldown: u32) -> Self {
        Self { required, tolerance, cooldown, last: None, last_emitted: None }
    }

    /// Feed the query result of `query_frame` (frames in increasing order).
    pub fn push(&mut self, query_frame: u32, candidate: Option<LoopCandidate>) -> Option<LoopCandidate> {
        let Some(mut c) = candidate else {
            self.last = None;
            return None;
        };
        debug_assert_eq!(c.query_frame, query_frame);
        c.streak = match self.last {
            Some(prev) if prev.query_frame + 1 == c.query_frame => {
                let predicted = prev.match_frame as i64 + 1;
                if (c.match_frame as i64 - predicted).unsigned_abs() <= self.tolerance as u64 {
                    prev.streak + 1
                } else {
                    1
                }
            }
            _ => 1,
        };
        self.last = Some(c);
        let cooled = self.last_emitted.is_none_or(|t| c.query_frame >= t + self.cooldown);
        if c.streak == self.required && cooled {
            self.last_emitted = Some(c.query_frame);
            return Some(c);
        }
        None
    }
}

/// Run a confirmer over a stream of per-frame query results.
pub fn confirm(stream: &[(u32, Option<LoopCandidate>)]) -> Vec<LoopCandidate> {
    let mut c = LoopConfirmer::default();
    stream.iter().filter_map(|(f, cand)| c.push(*f, *cand)).collect()
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("descriptor data at byte {offset}: {message}")]
pub struct DecodeError {
    pub offset: usize,
    pub message: String,
}

/// `magic(4) D(u32) count(u32)` then `count × (frame_id u64, D × f32)`, little-endian.
pub fn encode_descriptors(descriptors: &[Descriptor]) -> Vec<u8> {
    let dim = descriptors.first().map(|d| d.vector.len()).unwrap_or(0);
    let mut out = Vec::with_capacity(12 + descriptors.len() * (8 + 4 * dim));
    out.extend_from_slice(DESCRIPTOR_MAGIC);
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(descriptors.len() as u32).to_le_bytes());
    for d in descriptors {
        assert_eq!(d.vector.len(), dim, "descriptors must share one dimension");
        out.extend_from_slice(&(d.frame_id as u64).to_le_bytes());
        for v in &d.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_descriptors(data: &[u8]) -> Result<Vec<Descriptor>, DecodeError> {
    let err = |offset: usize, message: &str| DecodeError { offset, message: message.to_string() };
    let take = |pos: usize, n: usize| -> Result<&[u8], DecodeError> {
        data.get(pos..pos + n).ok_or_else(|| err(data.len(), &format!("truncated, needed {n} bytes at {pos}")))
    };
    if take(0, 4)? != DESCRIPTOR_MAGIC {
        return Err(err(0, "bad magic"));
    }
    let dim = u32::from_le_bytes(take(4, 4)?.try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(take(8, 4)?.try_into().unwrap()) as usize;
    let mut pos = 12;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let id = u64::from_le_bytes(take(pos, 8)?.try_into().unwrap());
        let frame_id = u32::try_from(id).map_err(|_| err(pos, "frame id exceeds 32 bits"))?;
        pos += 8;
        let raw = take(pos, 4 * dim)?;
        let vector = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        pos += 4 * dim;
        out.push(Descriptor { frame_id, vector });
    }
    if pos != data.len() {
        return Err(err(pos, "trailing bytes"));
    }
    Ok(out)
}
