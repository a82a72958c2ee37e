//! The single global page table and the access-check pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::capability::{Capability, Perms, Region};
use crate::tagged_memory::{FrameId, FrameTable, GRANULE, PAGE_SIZE};
use crate::uprocess::Pid;

/// First address handed out by the region allocator.
pub const FIRST_REGION_BASE: u64 = 0x1000_0000;
/// Default ceiling of the simulated virtual address space.
pub const DEFAULT_VA_LIMIT: u64 = 1 << 40;
/// Unmapped pages left between consecutive reservations.
const GUARD_PAGES: u64 = 1;

pub fn page_of(addr: u64) -> u64 {
    addr & !(PAGE_SIZE - 1)
}

/// How a page is shared after a fork.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PageState {
    Private,
    SharedCoW,
    SharedCoA,
    SharedCoPA,
}

/// Which side of a sharing relationship an entry is on.
///
/// `Origin` entries map a frame whose capabilities are already expressed in
/// the entry's own region; `Alias` entries would need relocation first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShareRole {
    Origin,
    Alias,
}

/// Base protection of a page, independent of sharing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PageProt {
    pub read: bool,
    pub write: bool,
    pub exec: bool,
}

impl PageProt {
    pub const RO: PageProt = PageProt {
        read: true,
        write: false,
        exec: false,
    };
    pub const RW: PageProt = PageProt {
        read: true,
        write: true,
        exec: false,
    };
    pub const RX: PageProt = PageProt {
        read: true,
        write: false,
        exec: true,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageTableEntry {
    pub frame: FrameId,
    pub state: PageState,
    pub role: ShareRole,
    pub prot: PageProt,
    pub owner: Pid,
}

impl PageTableEntry {
    pub fn private(frame: FrameId, prot: PageProt, owner: Pid) -> PageTableEntry {
        PageTableEntry {
            frame,
            state: PageState::Private,
            role: ShareRole::Origin,
            prot,
            owner,
        }
    }

    pub fn is_shared(&self) -> bool {
        self.state != PageState::Private
    }

    fn hidden(&self) -> bool {
        self.role == ShareRole::Alias && self.state == PageState::SharedCoA
    }

    pub fn readable(&self) -> bool {
        self.prot.read && !self.hidden()
    }

    pub fn executable(&self) -> bool {
        self.prot.exec && !self.hidden()
    }

    pub fn writable(&self) -> bool {
        self.prot.write && self.state == PageState::Private
    }

    pub fn cap_load_allowed(&self) -> bool {
        if !self.readable() {
            return false;
        }
        match (self.state, self.role) {
            (PageState::Private, _) | (_, ShareRole::Origin) => true,
            (PageState::SharedCoW, ShareRole::Alias) => true,
            (_, ShareRole::Alias) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FaultKind {
    CapTagFault,
    CapSealedFault,
    CapBoundsFault,
    CapPermFault,
    CapAlignFault,
    PageWriteFault,
    PageAccessFault,
    CapLoadFault,
    PrivilegeFault,
}

impl FaultKind {
    pub const ALL: [FaultKind; 9] = [
        FaultKind::CapTagFault,
        FaultKind::CapSealedFault,
        FaultKind::CapBoundsFault,
        FaultKind::CapPermFault,
        FaultKind::CapAlignFault,
        FaultKind::PageWriteFault,
        FaultKind::PageAccessFault,
        FaultKind::CapLoadFault,
        FaultKind::PrivilegeFault,
    ];

    /// Only page-level faults can be fixed up by the fork engine.
    pub fn is_resolvable(self) -> bool {
        matches!(
            self,
            FaultKind::PageWriteFault | FaultKind::PageAccessFault | FaultKind::CapLoadFault
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            FaultKind::CapTagFault => "CapTagFault",
            FaultKind::CapSealedFault => "CapSealedFault",
            FaultKind::CapBoundsFault => "CapBoundsFault",
            FaultKind::CapPermFault => "CapPermFault",
            FaultKind::CapAlignFault => "CapAlignFault",
            FaultKind::PageWriteFault => "PageWriteFault",
            FaultKind::PageAccessFault => "PageAccessFault",
            FaultKind::CapLoadFault => "CapLoadFault",
            FaultKind::PrivilegeFault => "PrivilegeFault",
        }
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AccessKind {
    Read,
    Write,
    CapLoad,
    CapStore,
    Exec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    pub kind: FaultKind,
    pub pid: Pid,
    pub page_va: u64,
    pub access: AccessKind,
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} by pid {} at page {:#x} ({:?})",
            self.kind, self.pid, self.page_va, self.access
        )
    }
}

/// A memory access request, dereferenced through a capability's cursor.
#[derive(Debug, Clone, Copy)]
pub enum Access<'a> {
    Read { len: usize },
    Write(&'a [u8]),
    CapLoad,
    CapStore(Capability),
    Exec,
}

impl Access<'_> {
    pub fn kind(&self) -> AccessKind {
        match self {
            Access::Read { .. } => AccessKind::Read,
            Access::Write(_) => AccessKind::Write,
            Access::CapLoad => AccessKind::CapLoad,
            Access::CapStore(_) => AccessKind::CapStore,
            Access::Exec => AccessKind::Exec,
        }
    }

    fn width(&self) -> u64 {
        match self {
            Access::Read { len } => *len as u64,
            Access::Write(b) => b.len() as u64,
            Access::CapLoad | Access::CapStore(_) => GRANULE,
            Access::Exec => 4,
        }
    }

    fn required_perms(&self) -> Perms {
        match self {
            Access::Read { .. } => Perms::LOAD,
            Access::Write(_) => Perms::STORE,
            Access::CapLoad => Perms::LOAD | Perms::LOAD_CAP,
            Access::CapStore(_) => Perms::STORE | Perms::STORE_CAP,
            Access::Exec => Perms::EXEC,
        }
    }
}

/// What a successful access produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Loaded {
    Bytes(Vec<u8>),
    Cap(Capability),
    Done,
}

impl Loaded {
    pub fn as_u64(&self) -> Option<u64> {
        match self {
            Loaded::Bytes(b) if b.len() <= 8 => {
                let mut buf = [0u8; 8];
                buf[..b.len()].copy_from_slice(b);
                Some(u64::from_le_bytes(buf))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AsError {
    #[error("virtual address space exhausted")]
    AddressSpaceExhausted,
    #[error("region size must be a positive multiple of the page size (got {0:#x})")]
    BadSize(u64),
    #[error("address {0:#x} is not page aligned")]
    Misaligned(u64),
    #[error("address {0:#x} is not inside a reserved region")]
    NotReserved(u64),
    #[error("page {0:#x} is already mapped")]
    DoubleMap(u64),
    #[error("page {0:#x} is not mapped")]
    UnmappedPage(u64),
    #[error("{0} is not allocated")]
    NoSuchFrame(FrameId),
}

/// One virtual address space shared by the kernel and every μprocess.
#[derive(Debug, Clone)]
pub struct AddressSpace {
    frames: FrameTable,
    ptes: BTreeMap<u64, PageTableEntry>,
    rmap: BTreeMap<FrameId, BTreeSet<u64>>,
    live: BTreeMap<u64, Region>,
    next_base: u64,
    limit: u64,
    peak_frames: usize,
}

impl Default for AddressSpace {
    fn default() -> Self {
        AddressSpace::new(DEFAULT_VA_LIMIT)
    }
}

impl AddressSpace {
    pub fn new(limit: u64) -> AddressSpace {
        AddressSpace {
            frames: FrameTable::new(),
            ptes: BTreeMap::new(),
            rmap: BTreeMap::new(),
            live: BTreeMap::new(),
            next_base: FIRST_REGION_BASE,
            limit,
            peak_frames: 0,
        }
    }

    pub fn frames(&self) -> &FrameTable {
        &self.frames
    }

    pub(crate) fn frames_mut(&mut self) -> &mut FrameTable {
        &mut self.frames
    }

    pub fn peak_frame_bytes(&self) -> u64 {
        self.peak_frames as u64 * PAGE_SIZE
    }

    /// Bump-allocate a fresh region. Released ranges are never reused.
    pub fn reserve_region(&mut self, size: u64) -> Result<Region, AsError> {
        if size == 0 || !size.is_multiple_of(PAGE_SIZE) {
            return Err(AsError::BadSize(size));
        }
        let base = self.next_base;
        let end = base
            .checked_add(size)
            .filter(|end| *end <= self.limit)
            .ok_or(AsError::AddressSpaceExhausted)?;
        let region = Region::new(base, size).map_err(|_| AsError::BadSize(size))?;
        self.next_base = end + GUARD_PAGES * PAGE_SIZE;
        self.live.insert(base, region);
        Ok(region)
    }

    /// Forget a region. Its mappings must already be gone.
    pub fn release_region(&mut self, region: &Region) {
        debug_assert!(self
            .ptes
            .range(region.base()..region.end())
            .next()
            .is_none());
        self.live.remove(&region.base());
    }

    pub fn live_regions(&self) -> impl Iterator<Item = &Region> {
        self.live.values()
    }

    pub fn region_containing(&self, addr: u64) -> Option<Region> {
        self.live
            .range(..=addr)
            .next_back()
            .map(|(_, r)| *r)
            .filter(|r| r.contains(addr))
    }

    pub fn map(&mut self, page_va: u64, entry: PageTableEntry) -> Result<(), AsError> {
        if !page_va.is_multiple_of(PAGE_SIZE) {
            return Err(AsError::Misaligned(page_va));
        }
        if self.region_containing(page_va).is_none() {
            return Err(AsError::NotReserved(page_va));
        }
        if self.ptes.contains_key(&page_va) {
            return Err(AsError::DoubleMap(page_va));
        }
        if self.frames.get(entry.frame).is_none() {
            return Err(AsError::NoSuchFrame(entry.frame));
        }
        self.frames.incref(entry.frame);
        self.rmap.entry(entry.frame).or_default().insert(page_va);
        self.ptes.insert(page_va, entry);
        self.peak_frames = self.peak_frames.max(self.frames.len());
        Ok(())
    }

    /// Remove a mapping. Returns the frame's remaining refcount (0 means freed).
    pub fn unmap(&mut self, page_va: u64) -> Result<u32, AsError> {
        let entry = self
            .ptes
            .remove(&page_va)
            .ok_or(AsError::UnmappedPage(page_va))?;
        if let Some(set) = self.rmap.get_mut(&entry.frame) {
            set.remove(&page_va);
            if set.is_empty() {
                self.rmap.remove(&entry.frame);
            }
        }
        Ok(self.frames.decref(entry.frame))
    }

    /// Replace the entry at `page_va`, moving refcounts if the frame changes.
    pub(crate) fn replace(&mut self, page_va: u64, entry: PageTableEntry) -> Result<u32, AsError> {
        let old = *self
            .ptes
            .get(&page_va)
            .ok_or(AsError::UnmappedPage(page_va))?;
        if old.frame == entry.frame {
            self.ptes.insert(page_va, entry);
            return Ok(self.frames.refcount(entry.frame));
        }
        let left = self.unmap(page_va)?;
        self.map(page_va, entry)?;
        Ok(left)
    }

    pub fn pte(&self, page_va: u64) -> Option<&PageTableEntry> {
        self.ptes.get(&page_va)
    }

    pub fn ptes_in(&self, region: &Region) -> impl Iterator<Item = (&u64, &PageTableEntry)> {
        self.ptes.range(region.base()..region.end())
    }

    pub fn ptes(&self) -> impl Iterator<Item = (&u64, &PageTableEntry)> {
        self.ptes.iter()
    }

    pub fn mappers_of(&self, frame: FrameId) -> impl Iterator<Item = &u64> {
        self.rmap.get(&frame).into_iter().flatten()
    }

    /// Recount mappings per frame and compare with the stored refcounts.
    pub fn refcount_mismatches(&self) -> Vec<String> {
        let mut counted: BTreeMap<FrameId, u32> = BTreeMap::new();
        for e in self.ptes.values() {
            *counted.entry(e.frame).or_default() += 1;
        }
        let mut out = Vec::new();
        for (id, _) in self.frames.iter() {
            let want = counted.get(id).copied().unwrap_or(0);
            if self.frames.refcount(*id) != want {
                out.push(format!(
                    "{id}: refcount {} but {want} mappings",
                    self.frames.refcount(*id)
                ));
            }
        }
        for id in counted.keys() {
            if self.frames.get(*id).is_none() {
                out.push(format!("{id} mapped but not allocated"));
            }
        }
        out
    }

    /// Run the access pipeline without resolving faults.
    ///
    /// Checks run in a fixed order: tag, seal, bounds, permissions, alignment,
    /// then the page-table state of every page the access touches.
    pub fn check_and_access(
        &mut self,
        pid: Pid,
        cap: &Capability,
        access: Access<'_>,
    ) -> Result<Loaded, Fault> {
        let kind = access.kind();
        let fault = |k: FaultKind, va: u64| Fault {
            kind: k,
            pid,
            page_va: page_of(va),
            access: kind,
        };
        let at = cap.cursor();
        if !cap.is_tagged() {
            return Err(fault(FaultKind::CapTagFault, at));
        }
        if cap.is_sealed() {
            return Err(fault(FaultKind::CapSealedFault, at));
        }
        let width = access.width();
        if !cap.in_bounds(width) {
            return Err(fault(FaultKind::CapBoundsFault, at));
        }
        if !cap.perms().contains(access.required_perms()) {
            return Err(fault(FaultKind::CapPermFault, at));
        }
        if matches!(access, Access::CapLoad | Access::CapStore(_)) && !at.is_multiple_of(GRANULE) {
            return Err(fault(FaultKind::CapAlignFault, at));
        }

        let mut pages = Vec::new();
        if width > 0 {
            let mut page = page_of(at);
            while page < at + width {
                pages.push(page);
                page += PAGE_SIZE;
            }
        }
        for &page in &pages {
            let Some(pte) = self.ptes.get(&page) else {
                return Err(fault(FaultKind::PageAccessFault, page));
            };
            let verdict = match access {
                Access::Read { .. } if !pte.readable() => Some(FaultKind::PageAccessFault),
                Access::Exec if !pte.executable() => Some(FaultKind::PageAccessFault),
                Access::Write(_) | Access::CapStore(_) if !pte.readable() => {
                    Some(FaultKind::PageAccessFault)
                }
                Access::Write(_) | Access::CapStore(_) if !pte.writable() => {
                    Some(FaultKind::PageWriteFault)
                }
                Access::CapLoad if !pte.readable() => Some(FaultKind::PageAccessFault),
                Access::CapLoad if !pte.cap_load_allowed() => {
                    // Only loading a valid capability traps; plain data passes.
                    let granule = ((at - page) / GRANULE) as usize;
                    let tagged = self
                        .frames
                        .get(pte.frame)
                        .is_some_and(|f| f.is_tagged(granule));
                    tagged.then_some(FaultKind::CapLoadFault)
                }
                _ => None,
            };
            if let Some(k) = verdict {
                return Err(fault(k, page));
            }
        }

        Ok(self.perform(at, &pages, access))
    }

    fn perform(&mut self, at: u64, pages: &[u64], access: Access<'_>) -> Loaded {
        let frame_of = |s: &Self, page: u64| s.ptes[&page].frame;
        match access {
            Access::Read { len } => {
                let mut out = Vec::with_capacity(len);
                for &page in pages {
                    let lo = at.max(page);
                    let hi = (at + len as u64).min(page + PAGE_SIZE);
                    let f = self.frames.get(frame_of(self, page)).expect("mapped frame");
                    out.extend_from_slice(
                        f.load_bytes((lo - page) as usize, (hi - lo) as usize)
                            .expect("in-page range"),
                    );
                }
                Loaded::Bytes(out)
            }
            Access::Write(bytes) => {
                for &page in pages {
                    let lo = at.max(page);
                    let hi = (at + bytes.len() as u64).min(page + PAGE_SIZE);
                    let id = frame_of(self, page);
                    let f = self.frames.get_mut(id).expect("mapped frame");
                    f.store_bytes(
                        (lo - page) as usize,
                        &bytes[(lo - at) as usize..(hi - at) as usize],
                    )
                    .expect("in-page range");
                }
                Loaded::Done
            }
            Access::CapLoad => {
                let page = pages[0];
                let f = self.frames.get(frame_of(self, page)).expect("mapped frame");
                Loaded::Cap(
                    f.load_capability(((at - page) / GRANULE) as usize)
                        .expect("aligned granule"),
                )
            }
            Access::CapStore(value) => {
                let page = pages[0];
                let id = frame_of(self, page);
                let f = self.frames.get_mut(id).expect("mapped frame");
                f.store_capability(((at - page) / GRANULE) as usize, &value)
                    .expect("aligned granule");
                Loaded::Done
            }
            Access::Exec => Loaded::Done,
        }
    }
}
