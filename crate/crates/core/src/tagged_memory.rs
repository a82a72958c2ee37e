//! Physical frames with one validity tag per 16-byte granule.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::capability::{Capability, Region};

pub const PAGE_SIZE: u64 = 4096;
pub const GRANULE: u64 = 16;
pub const GRANULES_PER_PAGE: usize = (PAGE_SIZE / GRANULE) as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameId(pub u64);

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "frame#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MemError {
    #[error("range {offset}+{len} exceeds the page")]
    OutOfFrame { offset: usize, len: usize },
    #[error("granule {0} out of range")]
    BadGranule(usize),
    #[error("width {0} is not a valid integer load")]
    BadWidth(usize),
    #[error("{0} is not allocated")]
    NoSuchFrame(FrameId),
}

/// Result of a relocation scan over one frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScanOutcome {
    /// Granules rewritten with a translated capability.
    pub relocated: usize,
    /// Granules whose capability targeted neither region and lost its tag.
    pub invalidated: usize,
}

impl ScanOutcome {
    pub fn rewritten(&self) -> usize {
        self.relocated + self.invalidated
    }
}

/// One physical page.
///
/// The tag bit of a granule is the presence of an entry in `caps`, which also
/// holds the out-of-band capability metadata. The 16 data bytes hold the
/// integer image of the capability (cursor, then base, little endian).
#[derive(Clone)]
pub struct TaggedFrame {
    id: FrameId,
    data: Box<[u8]>,
    caps: BTreeMap<u16, Capability>,
    origin: Region,
}

impl fmt::Debug for TaggedFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TaggedFrame")
            .field("id", &self.id)
            .field("tagged", &self.caps.len())
            .field("origin", &self.origin)
            .finish()
    }
}

fn image(cap: &Capability) -> [u8; GRANULE as usize] {
    let mut out = [0u8; GRANULE as usize];
    out[..8].copy_from_slice(&cap.cursor().to_le_bytes());
    out[8..].copy_from_slice(&cap.base().to_le_bytes());
    out
}

impl TaggedFrame {
    /// A zero-filled, untagged frame whose capabilities are relative to `origin`.
    pub fn new(id: FrameId, origin: Region) -> TaggedFrame {
        TaggedFrame {
            id,
            data: vec![0u8; PAGE_SIZE as usize].into_boxed_slice(),
            caps: BTreeMap::new(),
            origin,
        }
    }

    pub fn id(&self) -> FrameId {
        self.id
    }

    /// The region whose addresses the stored capabilities are expressed in.
    pub fn origin(&self) -> Region {
        self.origin
    }

    pub fn set_origin(&mut self, origin: Region) {
        self.origin = origin;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_tagged(&self, granule: usize) -> bool {
        granule < GRANULES_PER_PAGE && self.caps.contains_key(&(granule as u16))
    }

    pub fn tag_count(&self) -> usize {
        self.caps.len()
    }

    pub fn has_tags(&self) -> bool {
        !self.caps.is_empty()
    }

    /// Tagged granules with their capabilities, in granule order.
    pub fn tagged(&self) -> impl Iterator<Item = (usize, &Capability)> {
        self.caps.iter().map(|(g, c)| (*g as usize, c))
    }

    fn check_range(offset: usize, len: usize) -> Result<(), MemError> {
        match offset.checked_add(len) {
            Some(end) if end <= PAGE_SIZE as usize => Ok(()),
            _ => Err(MemError::OutOfFrame { offset, len }),
        }
    }

    /// Byte store. Every granule the range overlaps loses its tag.
    pub fn store_bytes(&mut self, offset: usize, payload: &[u8]) -> Result<(), MemError> {
        Self::check_range(offset, payload.len())?;
        if payload.is_empty() {
            return Ok(());
        }
        self.data[offset..offset + payload.len()].copy_from_slice(payload);
        let first = offset / GRANULE as usize;
        let last = (offset + payload.len() - 1) / GRANULE as usize;
        for g in first..=last {
            self.caps.remove(&(g as u16));
        }
        Ok(())
    }

    /// Whole-granule capability store; the tag follows the capability's tag.
    pub fn store_capability(&mut self, granule: usize, cap: &Capability) -> Result<(), MemError> {
        if granule >= GRANULES_PER_PAGE {
            return Err(MemError::BadGranule(granule));
        }
        let at = granule * GRANULE as usize;
        self.data[at..at + GRANULE as usize].copy_from_slice(&image(cap));
        if cap.is_tagged() {
            self.caps.insert(granule as u16, *cap);
        } else {
            self.caps.remove(&(granule as u16));
        }
        Ok(())
    }

    pub fn load_bytes(&self, offset: usize, len: usize) -> Result<&[u8], MemError> {
        Self::check_range(offset, len)?;
        Ok(&self.data[offset..offset + len])
    }

    /// Little-endian integer load of `width` bytes. Never carries a tag.
    pub fn load_value(&self, offset: usize, width: usize) -> Result<u64, MemError> {
        if width == 0 || width > 8 {
            return Err(MemError::BadWidth(width));
        }
        let bytes = self.load_bytes(offset, width)?;
        let mut buf = [0u8; 8];
        buf[..width].copy_from_slice(bytes);
        Ok(u64::from_le_bytes(buf))
    }

    pub fn load_capability(&self, granule: usize) -> Result<Capability, MemError> {
        if granule >= GRANULES_PER_PAGE {
            return Err(MemError::BadGranule(granule));
        }
        if let Some(cap) = self.caps.get(&(granule as u16)) {
            debug_assert_eq!(
                &self.data[granule * 16..granule * 16 + 16],
                &image(cap)[..],
                "tagged granule bytes diverged from its capability"
            );
            return Ok(*cap);
        }
        let at = granule * GRANULE as usize;
        let word = |o: usize| u64::from_le_bytes(self.data[o..o + 8].try_into().unwrap());
        Ok(Capability::from_parts(
            word(at + 8),
            0,
            word(at),
            crate::capability::Perms::empty(),
            None,
            false,
        ))
    }

    /// Walk every granule; rewrite tagged capabilities that can reach outside
    /// `child` with their rebased form. Untagged granules are never touched.
    pub fn scan_and_relocate(&mut self, parent: &Region, child: &Region) -> ScanOutcome {
        let mut outcome = ScanOutcome::default();
        let rewrites: Vec<(usize, Capability)> = self
            .tagged()
            .filter(|(_, c)| !c.bounds_within(child))
            .filter_map(|(g, c)| {
                let r = c.rebase_for_child(parent, child);
                (r != *c).then_some((g, r))
            })
            .collect();
        for (g, cap) in rewrites {
            if cap.is_tagged() {
                outcome.relocated += 1;
            } else {
                outcome.invalidated += 1;
            }
            self.store_capability(g, &cap)
                .expect("granule index from scan");
        }
        outcome
    }

    /// Bytes and tags copied into a new frame.
    pub fn duplicate(&self, id: FrameId, origin: Region) -> TaggedFrame {
        TaggedFrame {
            id,
            data: self.data.clone(),
            caps: self.caps.clone(),
            origin,
        }
    }
}

/// Backing store for all frames plus their mapping counts.
#[derive(Debug, Clone, Default)]
pub struct FrameTable {
    frames: BTreeMap<FrameId, TaggedFrame>,
    refcount: BTreeMap<FrameId, u32>,
    next: u64,
}

impl FrameTable {
    pub fn new() -> FrameTable {
        FrameTable::default()
    }

    /// A fresh zeroed frame with refcount 0. It becomes live once mapped.
    pub fn alloc(&mut self, origin: Region) -> FrameId {
        let id = FrameId(self.next);
        self.next += 1;
        self.frames.insert(id, TaggedFrame::new(id, origin));
        self.refcount.insert(id, 0);
        id
    }

    /// Copy bytes and tags of `src` into a fresh frame.
    pub fn duplicate(&mut self, src: FrameId, origin: Region) -> Result<FrameId, MemError> {
        let id = FrameId(self.next);
        let copy = self
            .frames
            .get(&src)
            .ok_or(MemError::NoSuchFrame(src))?
            .duplicate(id, origin);
        self.next += 1;
        self.frames.insert(id, copy);
        self.refcount.insert(id, 0);
        Ok(id)
    }

    pub fn get(&self, id: FrameId) -> Option<&TaggedFrame> {
        self.frames.get(&id)
    }

    pub fn get_mut(&mut self, id: FrameId) -> Option<&mut TaggedFrame> {
        self.frames.get_mut(&id)
    }

    pub fn refcount(&self, id: FrameId) -> u32 {
        self.refcount.get(&id).copied().unwrap_or(0)
    }

    pub(crate) fn incref(&mut self, id: FrameId) {
        *self.refcount.entry(id).or_insert(0) += 1;
    }

    /// Drop one reference; frees the frame when none remain. Returns the new count.
    pub(crate) fn decref(&mut self, id: FrameId) -> u32 {
        let rc = self.refcount.get_mut(&id).expect("decref of unknown frame");
        *rc = rc.saturating_sub(1);
        let left = *rc;
        if left == 0 {
            self.refcount.remove(&id);
            self.frames.remove(&id);
        }
        left
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn total_bytes(&self) -> u64 {
        self.frames.len() as u64 * PAGE_SIZE
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FrameId, &TaggedFrame)> {
        self.frames.iter()
    }
}
