//! μprocess state: identity, region layout, registers and file descriptors.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::address_space::{AsError, PageProt, PageTableEntry};
use crate::capability::{Capability, Perms, Region};
use crate::kernel_gateway::Syscall;
use crate::system::System;
use crate::tagged_memory::{GRANULE, PAGE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pid(pub u32);

/// The kernel's own identity in page-table ownership and metrics.
pub const KERNEL_PID: Pid = Pid(0);

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// GOT slots populated at process creation.
pub const GOT_CODE: u64 = 0;
pub const GOT_ALLOC_META: u64 = 1;
pub const GOT_HEAP: u64 = 2;
pub const GOT_STACK: u64 = 3;
pub const GOT_TLS: u64 = 4;

/// Allocator metadata granule holding the heap capability; its cursor is the break.
pub const META_HEAP_SLOT: u64 = 0;
/// First allocator metadata granule used for per-allocation capabilities.
pub const META_FIRST_CHUNK: u64 = 1;

/// Page counts of each sub-region, in layout order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutSpec {
    pub code_pages: u64,
    pub got_pages: u64,
    pub alloc_meta_pages: u64,
    pub stack_pages: u64,
    pub tls_pages: u64,
    pub heap_pages: u64,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        LayoutSpec {
            code_pages: 2,
            got_pages: 1,
            alloc_meta_pages: 1,
            stack_pages: 2,
            tls_pages: 0,
            heap_pages: 4,
        }
    }
}

impl LayoutSpec {
    pub fn total_pages(&self) -> u64 {
        self.code_pages
            + self.got_pages
            + self.alloc_meta_pages
            + self.stack_pages
            + self.tls_pages
            + self.heap_pages
    }
}

/// Sub-regions of a μprocess region. The heap comes last so the heap end is
/// the region end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub code_ro: Region,
    pub got: Region,
    pub alloc_meta: Region,
    pub stack: Region,
    pub tls: Region,
    pub heap: Region,
}

impl Layout {
    pub fn carve(region: &Region, spec: &LayoutSpec) -> Layout {
        let mut at = region.base();
        let mut next = |pages: u64| {
            let r = Region::new(at, pages * PAGE_SIZE).expect("page-aligned layout");
            at += pages * PAGE_SIZE;
            r
        };
        let layout = Layout {
            code_ro: next(spec.code_pages),
            got: next(spec.got_pages),
            alloc_meta: next(spec.alloc_meta_pages),
            stack: next(spec.stack_pages),
            tls: next(spec.tls_pages),
            heap: next(spec.heap_pages),
        };
        debug_assert!(at <= region.end());
        layout
    }

    pub fn translate(&self, from: &Region, to: &Region) -> Layout {
        let t = |r: &Region| Region::new(from.translate(r.base(), to), r.size()).unwrap();
        Layout {
            code_ro: t(&self.code_ro),
            got: t(&self.got),
            alloc_meta: t(&self.alloc_meta),
            stack: t(&self.stack),
            tls: t(&self.tls),
            heap: t(&self.heap),
        }
    }

    pub fn prot_of(&self, va: u64) -> PageProt {
        if self.code_ro.contains(va) {
            PageProt::RX
        } else if self.got.contains(va) {
            PageProt::RO
        } else {
            PageProt::RW
        }
    }

    /// Pages that are copied eagerly on fork under every lazy strategy.
    pub fn is_eager(&self, va: u64) -> bool {
        self.got.contains(va) || self.alloc_meta.contains(va)
    }

    pub fn all(&self) -> [(&'static str, Region); 6] {
        [
            ("code", self.code_ro),
            ("got", self.got),
            ("alloc_meta", self.alloc_meta),
            ("stack", self.stack),
            ("tls", self.tls),
            ("heap", self.heap),
        ]
    }
}

/// A register value. Integers never carry a tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegisterValue {
    Int(u64),
    Cap(Capability),
}

impl RegisterValue {
    pub fn tagged_cap(&self) -> Option<&Capability> {
        match self {
            RegisterValue::Cap(c) if c.is_tagged() => Some(c),
            _ => None,
        }
    }
}

pub const GPR_COUNT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RegisterSlot {
    Pcc,
    Sp,
    Cgp,
    Gpr(usize),
    Entry(Syscall),
}

impl fmt::Display for RegisterSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegisterSlot::Pcc => f.write_str("pcc"),
            RegisterSlot::Sp => f.write_str("sp"),
            RegisterSlot::Cgp => f.write_str("cgp"),
            RegisterSlot::Gpr(i) => write!(f, "r{i}"),
            RegisterSlot::Entry(s) => write!(f, "entry.{}", s.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisterFile {
    pub pcc: RegisterValue,
    pub sp: RegisterValue,
    /// Capability to the GOT.
    pub cgp: RegisterValue,
    pub gpr: [RegisterValue; GPR_COUNT],
    /// Sealed kernel entry capabilities handed out at creation.
    pub entries: BTreeMap<Syscall, Capability>,
}

impl RegisterFile {
    pub fn slots(&self) -> Vec<(RegisterSlot, RegisterValue)> {
        let mut out = vec![
            (RegisterSlot::Pcc, self.pcc),
            (RegisterSlot::Sp, self.sp),
            (RegisterSlot::Cgp, self.cgp),
        ];
        out.extend(
            self.gpr
                .iter()
                .enumerate()
                .map(|(i, v)| (RegisterSlot::Gpr(i), *v)),
        );
        out.extend(
            self.entries
                .iter()
                .map(|(s, c)| (RegisterSlot::Entry(*s), RegisterValue::Cap(*c))),
        );
        out
    }

    /// Apply `f` to every capability held in a register.
    pub fn map_caps(&self, mut f: impl FnMut(&Capability) -> Capability) -> RegisterFile {
        let mut g = |v: &RegisterValue| match v {
            RegisterValue::Cap(c) => RegisterValue::Cap(f(c)),
            other => *other,
        };
        let pcc = g(&self.pcc);
        let sp = g(&self.sp);
        let cgp = g(&self.cgp);
        let gpr = self.gpr.map(|v| g(&v));
        let entries = self
            .entries
            .iter()
            .map(|(s, c)| {
                (
                    *s,
                    match g(&RegisterValue::Cap(*c)) {
                        RegisterValue::Cap(c) => c,
                        RegisterValue::Int(_) => unreachable!(),
                    },
                )
            })
            .collect();
        RegisterFile {
            pcc,
            sp,
            cgp,
            gpr,
            entries,
        }
    }

    pub fn pcc_cap(&self) -> Capability {
        match self.pcc {
            RegisterValue::Cap(c) => c,
            RegisterValue::Int(_) => Capability::null(),
        }
    }

    pub fn cgp_cap(&self) -> Capability {
        match self.cgp {
            RegisterValue::Cap(c) => c,
            RegisterValue::Int(_) => Capability::null(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcessStatus {
    Running,
    Exited(i32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FileId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FileKind {
    /// Open description of a named in-memory file.
    MemFile {
        path: String,
    },
    Pipe {
        buffer: Vec<u8>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileObject {
    pub id: FileId,
    pub kind: FileKind,
    pub offset: usize,
    pub refcount: u32,
}

/// Open file descriptions and the in-memory file namespace.
#[derive(Debug, Clone, Default)]
pub struct FileTable {
    objects: BTreeMap<FileId, FileObject>,
    contents: BTreeMap<String, Vec<u8>>,
    next: u64,
}

impl FileTable {
    pub fn open(&mut self, path: &str) -> FileId {
        self.contents.entry(path.to_string()).or_default();
        self.insert(FileKind::MemFile {
            path: path.to_string(),
        })
    }

    pub fn pipe(&mut self) -> FileId {
        self.insert(FileKind::Pipe { buffer: Vec::new() })
    }

    fn insert(&mut self, kind: FileKind) -> FileId {
        let id = FileId(self.next);
        self.next += 1;
        self.objects.insert(
            id,
            FileObject {
                id,
                kind,
                offset: 0,
                refcount: 0,
            },
        );
        id
    }

    pub fn get(&self, id: FileId) -> Option<&FileObject> {
        self.objects.get(&id)
    }

    pub fn contents(&self, path: &str) -> Option<&[u8]> {
        self.contents.get(path).map(Vec::as_slice)
    }

    pub(crate) fn incref(&mut self, id: FileId) {
        if let Some(o) = self.objects.get_mut(&id) {
            o.refcount += 1;
        }
    }

    pub(crate) fn decref(&mut self, id: FileId) {
        if let Some(o) = self.objects.get_mut(&id) {
            o.refcount = o.refcount.saturating_sub(1);
            if o.refcount == 0 {
                self.objects.remove(&id);
            }
        }
    }

    pub fn write(&mut self, id: FileId, bytes: &[u8]) -> usize {
        let Some(obj) = self.objects.get_mut(&id) else {
            return 0;
        };
        match &mut obj.kind {
            FileKind::Pipe { buffer } => buffer.extend_from_slice(bytes),
            FileKind::MemFile { path } => {
                let data = self.contents.entry(path.clone()).or_default();
                let end = obj.offset + bytes.len();
                if data.len() < end {
                    data.resize(end, 0);
                }
                data[obj.offset..end].copy_from_slice(bytes);
                obj.offset = end;
            }
        }
        bytes.len()
    }

    pub fn read(&mut self, id: FileId, len: usize) -> Vec<u8> {
        let Some(obj) = self.objects.get_mut(&id) else {
            return Vec::new();
        };
        match &mut obj.kind {
            FileKind::Pipe { buffer } => {
                let n = len.min(buffer.len());
                buffer.drain(..n).collect()
            }
            FileKind::MemFile { path } => {
                let data = self
                    .contents
                    .get(path.as_str())
                    .map(Vec::as_slice)
                    .unwrap_or(&[]);
                let start = obj.offset.min(data.len());
                let end = (start + len).min(data.len());
                obj.offset = end;
                data[start..end].to_vec()
            }
        }
    }

    pub fn live_objects(&self) -> impl Iterator<Item = &FileObject> {
        self.objects.values()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MicroProcess {
    pub pid: Pid,
    pub region: Region,
    pub layout: Layout,
    pub registers: RegisterFile,
    pub fd_table: BTreeMap<i32, FileId>,
    pub parent: Option<Pid>,
    pub status: ProcessStatus,
    pub children: Vec<Pid>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProcError {
    #[error(transparent)]
    AddressSpace(#[from] AsError),
    #[error("bad file descriptor {0}")]
    BadFd(i32),
    #[error("no such process {0}")]
    NoSuchProcess(Pid),
    #[error("layout needs at least one page of code, GOT, allocator metadata and heap")]
    BadLayout,
}

/// Lowest fd number handed out; 0-2 are left for stdio by convention.
pub const FIRST_FD: i32 = 3;

impl System {
    /// Boot-time creation of the first μprocess.
    pub fn create_initial_process(&mut self, spec: &LayoutSpec) -> Result<Pid, ProcError> {
        if spec.code_pages == 0
            || spec.got_pages == 0
            || spec.alloc_meta_pages == 0
            || spec.heap_pages == 0
        {
            return Err(ProcError::BadLayout);
        }
        let region = self.mem.reserve_region(spec.total_pages() * PAGE_SIZE)?;
        let layout = Layout::carve(&region, spec);
        let pid = self.allocate_pid();

        for page in 0..region.pages() {
            let va = region.base() + page * PAGE_SIZE;
            let frame = self.mem.frames_mut().alloc(region);
            self.mem
                .map(va, PageTableEntry::private(frame, layout.prot_of(va), pid))?;
        }

        let code = Capability::new_root(layout.code_ro.base(), layout.code_ro.size(), Perms::CODE);
        let data = |r: &Region| Capability::new_root(r.base(), r.size(), Perms::DATA);
        let mut got = vec![
            (GOT_CODE, code),
            (GOT_ALLOC_META, data(&layout.alloc_meta)),
            (GOT_HEAP, data(&layout.heap)),
            (GOT_STACK, data(&layout.stack)),
        ];
        if layout.tls.size() > 0 {
            got.push((GOT_TLS, data(&layout.tls)));
        }
        for (slot, cap) in got {
            self.kernel_store_cap(layout.got.base() + slot * GRANULE, &cap);
        }
        self.kernel_store_cap(
            layout.alloc_meta.base() + META_HEAP_SLOT * GRANULE,
            &data(&layout.heap),
        );

        let stack = data(&layout.stack)
            .set_cursor(layout.stack.end())
            .expect("fresh capability");
        let cgp = Capability::new_root(layout.got.base(), layout.got.size(), Perms::READ_CAPS);
        let registers = RegisterFile {
            pcc: RegisterValue::Cap(code),
            sp: RegisterValue::Cap(stack),
            cgp: RegisterValue::Cap(cgp),
            gpr: [RegisterValue::Int(0); GPR_COUNT],
            entries: self.gateway.entries().collect(),
        };
        self.procs.insert(
            pid,
            MicroProcess {
                pid,
                region,
                layout,
                registers,
                fd_table: BTreeMap::new(),
                parent: None,
                status: ProcessStatus::Running,
                children: Vec::new(),
            },
        );
        self.metrics.register(pid);
        Ok(pid)
    }

    /// Child fd table referencing the same open descriptions.
    pub fn dup_fd_table(&mut self, src: Pid) -> Result<BTreeMap<i32, FileId>, ProcError> {
        let table = self
            .procs
            .get(&src)
            .ok_or(ProcError::NoSuchProcess(src))?
            .fd_table
            .clone();
        for id in table.values() {
            self.files.incref(*id);
        }
        Ok(table)
    }

    pub fn close_fd(&mut self, pid: Pid, fd: i32) -> Result<(), ProcError> {
        let proc = self
            .procs
            .get_mut(&pid)
            .ok_or(ProcError::NoSuchProcess(pid))?;
        let id = proc.fd_table.remove(&fd).ok_or(ProcError::BadFd(fd))?;
        self.files.decref(id);
        Ok(())
    }

    pub(crate) fn install_fd(&mut self, pid: Pid, id: FileId) -> Result<i32, ProcError> {
        let proc = self
            .procs
            .get_mut(&pid)
            .ok_or(ProcError::NoSuchProcess(pid))?;
        let fd = (FIRST_FD..)
            .find(|n| !proc.fd_table.contains_key(n))
            .expect("fd space");
        proc.fd_table.insert(fd, id);
        self.files.incref(id);
        Ok(fd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::SystemConfig;

    fn boot() -> (System, Pid) {
        let mut sys = System::boot(SystemConfig::default());
        let pid = sys.create_initial_process(&LayoutSpec::default()).unwrap();
        (sys, pid)
    }

    #[test]
    fn default_layout_maps_ten_private_pages() {
        let (sys, pid) = boot();
        let p = sys.process(pid).unwrap();
        // Oracle: sweep the page table for entries inside the region.
        let private = sys
            .memory()
            .ptes()
            .filter(|(va, e)| p.region.contains(**va) && !e.is_shared() && e.owner == pid)
            .count();
        assert_eq!(private, 10);
    }

    #[test]
    fn got_entries_are_tagged_and_in_region() {
        let (sys, pid) = boot();
        let p = sys.process(pid).unwrap();
        let got = sys.memory().pte(p.layout.got.base()).unwrap().frame;
        let frame = sys.memory().frames().get(got).unwrap();
        assert!(frame.tag_count() >= 4);
        for (_, cap) in frame.tagged() {
            assert!(cap.bounds_within(&p.region));
        }
    }

    #[test]
    fn pcc_is_executable_and_unprivileged() {
        let (sys, pid) = boot();
        let pcc = sys.process(pid).unwrap().registers.pcc_cap();
        assert!(pcc.perms().contains(Perms::EXEC));
        assert!(!pcc.perms().contains(Perms::SYSTEM));
    }

    #[test]
    fn fd_dup_and_close_are_independent() {
        let (mut sys, pid) = boot();
        let id = sys.files.open("f");
        let fd = sys.install_fd(pid, id).unwrap();
        assert_eq!(fd, FIRST_FD);
        let dup = sys.dup_fd_table(pid).unwrap();
        assert_eq!(dup.get(&fd), Some(&id));
        assert_eq!(sys.files.get(id).unwrap().refcount, 2);
        sys.close_fd(pid, fd).unwrap();
        assert_eq!(sys.close_fd(pid, fd), Err(ProcError::BadFd(fd)));
        assert_eq!(sys.files.get(id).unwrap().refcount, 1);
    }

    #[test]
    fn empty_heap_layout_is_rejected() {
        let mut sys = System::boot(SystemConfig::default());
        let spec = LayoutSpec {
            heap_pages: 0,
            ..LayoutSpec::default()
        };
        assert_eq!(sys.create_initial_process(&spec), Err(ProcError::BadLayout));
    }
}
