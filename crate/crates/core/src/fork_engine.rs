//! Fork inside one address space, lazy copy strategies, and the page-fault
//! handler that copies and relocates shared pages on demand.
//!
//! A child is placed in a fresh region the size of its parent. Pages are
//! either copied up front or aliased with the parent; aliased pages carry a
//! sharing state that decides which accesses fault:
//!
//! | strategy   | parent side          | child side                     |
//! |------------|----------------------|--------------------------------|
//! | FullCopy   | untouched            | private copy                   |
//! | CoA        | read + cap-load      | no access                      |
//! | CoPA       | read + cap-load      | read, cap-load of a tag faults |
//! | UnsafeCoW  | read + cap-load      | read + cap-load                |
//!
//! Writes fault on both sides. GOT and allocator metadata pages are always
//! copied at fork time so the child resolves symbols and allocates inside its
//! own region.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::address_space::{
    AccessKind, AsError, Fault, FaultKind, PageState, PageTableEntry, ShareRole,
};
use crate::capability::Region;
use crate::system::{AuditEvent, System};
use crate::tagged_memory::{FrameId, GRANULES_PER_PAGE, PAGE_SIZE};
use crate::uprocess::{MicroProcess, Pid, ProcError, ProcessStatus};

/// Weight of one eagerly copied page in the synthetic fork cost.
pub const COST_PER_PAGE: u64 = 512;
/// Weight of one page-table entry written during fork.
pub const COST_PER_PTE: u64 = 1;
/// Weight of one granule scanned during fork.
pub const COST_PER_GRANULE: u64 = 1;

/// Exit code reported for a μprocess killed by a capability or page fault.
pub const FAULT_EXIT_CODE: i32 = 139;
/// Exit code reported for a μprocess killed by a privileged instruction.
pub const PRIVILEGE_EXIT_CODE: i32 = 132;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ForkStrategy {
    FullCopy,
    CoA,
    CoPA,
    /// Plain copy-on-write. Lets children load stale parent references; only
    /// accepted when the auditor is armed.
    UnsafeCoW,
}

impl ForkStrategy {
    pub const SAFE: [ForkStrategy; 3] = [
        ForkStrategy::FullCopy,
        ForkStrategy::CoA,
        ForkStrategy::CoPA,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ForkStrategy::FullCopy => "full",
            ForkStrategy::CoA => "coa",
            ForkStrategy::CoPA => "copa",
            ForkStrategy::UnsafeCoW => "unsafe-cow",
        }
    }

    fn shared_state(self) -> PageState {
        match self {
            ForkStrategy::FullCopy => PageState::Private,
            ForkStrategy::CoA => PageState::SharedCoA,
            ForkStrategy::CoPA => PageState::SharedCoPA,
            ForkStrategy::UnsafeCoW => PageState::SharedCoW,
        }
    }
}

impl fmt::Display for ForkStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ForkStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(ForkStrategy::FullCopy),
            "coa" => Ok(ForkStrategy::CoA),
            "copa" => Ok(ForkStrategy::CoPA),
            "unsafe-cow" => Ok(ForkStrategy::UnsafeCoW),
            other => Err(format!(
                "unknown strategy `{other}` (expected full, coa, copa or unsafe-cow)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CopyCause {
    EagerGot,
    EagerAllocMeta,
    EagerFull,
    WriteFault,
    AccessFault,
    CapLoadFault,
}

impl CopyCause {
    pub fn is_eager(self) -> bool {
        matches!(
            self,
            CopyCause::EagerGot | CopyCause::EagerAllocMeta | CopyCause::EagerFull
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            CopyCause::EagerGot => "eager_got",
            CopyCause::EagerAllocMeta => "eager_alloc_meta",
            CopyCause::EagerFull => "eager_full",
            CopyCause::WriteFault => "write_fault",
            CopyCause::AccessFault => "access_fault",
            CopyCause::CapLoadFault => "cap_load_fault",
        }
    }
}

/// One page made private to a μprocess.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CopyEvent {
    /// Owner of the page that became private.
    pub pid: Pid,
    pub page_va: u64,
    pub cause: CopyCause,
    /// Capabilities rewritten by the relocation scan.
    pub relocations: usize,
    /// False when the page was the last mapping of its frame and was
    /// relocated in place instead of copied.
    pub copied: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ForkError {
    #[error(transparent)]
    AddressSpace(#[from] AsError),
    #[error(transparent)]
    Process(#[from] ProcError),
    #[error("process {0} is not running")]
    ProcessNotRunning(Pid),
    #[error("fault cannot be resolved: {0}")]
    UnresolvableFault(Fault),
    #[error("process {0} has no children")]
    NoChildren(Pid),
    #[error("unsafe copy-on-write requires the auditor to be armed")]
    UnsafeStrategyDisarmed,
}

impl System {
    /// Fork `parent`. Returns the child's PID; the child observes 0 through
    /// the syscall layer.
    pub fn fork(&mut self, parent_pid: Pid, strategy: ForkStrategy) -> Result<Pid, ForkError> {
        if strategy == ForkStrategy::UnsafeCoW && !self.config.arm_audit {
            return Err(ForkError::UnsafeStrategyDisarmed);
        }
        let parent = match self.procs.get(&parent_pid) {
            Some(p) if p.status == ProcessStatus::Running => p.clone(),
            _ => return Err(ForkError::ProcessNotRunning(parent_pid)),
        };
        let child_region = self.mem.reserve_region(parent.region.size())?;
        let child_pid = self.allocate_pid();
        self.metrics.register(child_pid);
        self.metrics.set_parent(child_pid, parent_pid);

        let mut pte_writes = 0u64;
        let mut eager = 0u64;
        let mut scanned = 0u64;
        let pages: Vec<(u64, PageTableEntry)> = self
            .mem
            .ptes_in(&parent.region)
            .map(|(va, e)| (*va, *e))
            .collect();
        for (va, entry) in pages {
            let child_va = parent.region.translate(va, &child_region);
            let eager_cause = if strategy == ForkStrategy::FullCopy {
                Some(CopyCause::EagerFull)
            } else if parent.layout.got.contains(va) {
                Some(CopyCause::EagerGot)
            } else if parent.layout.alloc_meta.contains(va) {
                Some(CopyCause::EagerAllocMeta)
            } else {
                None
            };
            match eager_cause {
                Some(cause) => {
                    let origin = self
                        .mem
                        .frames()
                        .get(entry.frame)
                        .expect("mapped frame")
                        .origin();
                    let frame = self
                        .mem
                        .frames_mut()
                        .duplicate(entry.frame, origin)
                        .expect("mapped frame");
                    let (relocated, did_scan) =
                        self.relocate_frame(frame, child_pid, child_va, &child_region);
                    if did_scan {
                        scanned += GRANULES_PER_PAGE as u64;
                    }
                    self.mem.map(
                        child_va,
                        PageTableEntry::private(frame, entry.prot, child_pid),
                    )?;
                    pte_writes += 1;
                    eager += 1;
                    self.record_copy(CopyEvent {
                        pid: child_pid,
                        page_va: child_va,
                        cause,
                        relocations: relocated,
                        copied: true,
                    });
                }
                None => {
                    let state = strategy.shared_state();
                    if entry.state == PageState::Private {
                        self.mem.replace(
                            va,
                            PageTableEntry {
                                state,
                                role: ShareRole::Origin,
                                ..entry
                            },
                        )?;
                        pte_writes += 1;
                    }
                    self.mem.map(
                        child_va,
                        PageTableEntry {
                            frame: entry.frame,
                            state,
                            role: ShareRole::Alias,
                            prot: entry.prot,
                            owner: child_pid,
                        },
                    )?;
                    pte_writes += 1;
                }
            }
        }

        let (from, to) = (parent.region, child_region);
        let registers = parent
            .registers
            .map_caps(|c| c.rebase_for_child(&from, &to));
        let fd_table = self.dup_fd_table(parent_pid)?;
        let child = MicroProcess {
            pid: child_pid,
            region: child_region,
            layout: parent.layout.translate(&from, &to),
            registers,
            fd_table,
            parent: Some(parent_pid),
            status: ProcessStatus::Running,
            children: Vec::new(),
        };
        self.procs.insert(child_pid, child);
        self.procs
            .get_mut(&parent_pid)
            .expect("parent")
            .children
            .push(child_pid);

        let cost = COST_PER_PAGE * eager + COST_PER_PTE * pte_writes + COST_PER_GRANULE * scanned;
        self.metrics.record_fork(parent_pid, cost);
        if self.config.debug_checks {
            self.debug_sweep();
        }
        Ok(child_pid)
    }

    /// Relocate a frame into `owner_region` if its capabilities are expressed
    /// relative to some other region. Returns (rewritten, scanned).
    fn relocate_frame(
        &mut self,
        frame: FrameId,
        owner: Pid,
        page_va: u64,
        owner_region: &Region,
    ) -> (usize, bool) {
        let f = self.mem.frames_mut().get_mut(frame).expect("frame");
        let origin = f.origin();
        if origin == *owner_region {
            return (0, false);
        }
        f.set_origin(*owner_region);
        if !f.has_tags() {
            return (0, false);
        }
        let outcome = f.scan_and_relocate(&origin, owner_region);
        if outcome.invalidated > 0 {
            self.audit_log.push(AuditEvent {
                pid: owner,
                page_va,
                invalidated: outcome.invalidated,
            });
        }
        self.metrics.record_scan(owner, &outcome);
        if self.config.debug_checks {
            let f = self.mem.frames().get(frame).expect("frame");
            for (g, cap) in f.tagged() {
                if !cap.bounds_within(owner_region) && !self.gateway.is_entry(cap) {
                    self.violations.push(format!(
                        "relocated page {page_va:#x} granule {g} still holds {cap}"
                    ));
                }
            }
        }
        (outcome.rewritten(), true)
    }

    fn record_copy(&mut self, event: CopyEvent) {
        self.metrics.record_copy(event);
    }

    /// Make the faulting page private to its owner.
    ///
    /// The owner's entry is pointed at a fresh frame, the contents and tags
    /// are copied, and the copy is scanned and relocated when the frame's
    /// capabilities belong to another region. A page that is the last
    /// mapping of its frame is relocated in place instead of copied.
    pub fn resolve_fault(&mut self, fault: &Fault) -> Result<CopyEvent, ForkError> {
        let unresolvable = || ForkError::UnresolvableFault(*fault);
        if !fault.kind.is_resolvable() {
            return Err(unresolvable());
        }
        let entry = *self.mem.pte(fault.page_va).ok_or_else(unresolvable)?;
        let sharing_fault = match (fault.kind, entry.state, entry.role) {
            (_, PageState::Private, _) => false,
            (FaultKind::PageWriteFault, _, _) => entry.prot.write,
            (FaultKind::PageAccessFault, PageState::SharedCoA, ShareRole::Alias) => {
                entry.prot.write || fault.access != AccessKind::Write
            }
            (FaultKind::CapLoadFault, PageState::SharedCoPA, ShareRole::Alias) => true,
            _ => false,
        };
        if !sharing_fault {
            return Err(unresolvable());
        }
        let owner_region = self.region_of(entry.owner).ok_or_else(unresolvable)?;
        let cause = match fault.kind {
            FaultKind::PageWriteFault => CopyCause::WriteFault,
            FaultKind::CapLoadFault => CopyCause::CapLoadFault,
            _ => CopyCause::AccessFault,
        };

        let old = entry.frame;
        let copied = self.mem.frames().refcount(old) > 1;
        let target = if copied {
            let origin = self.mem.frames().get(old).expect("frame").origin();
            self.mem
                .frames_mut()
                .duplicate(old, origin)
                .expect("mapped frame")
        } else {
            old
        };
        // The entry is retargeted before the copy is relocated; nothing else
        // runs in between, so the page is never observable half-copied.
        let private = PageTableEntry::private(target, entry.prot, entry.owner);
        self.mem.replace(fault.page_va, private)?;
        let (relocations, _) =
            self.relocate_frame(target, entry.owner, fault.page_va, &owner_region);
        if copied {
            self.promote_sole_mapping(old);
        }
        let event = CopyEvent {
            pid: entry.owner,
            page_va: fault.page_va,
            cause,
            relocations,
            copied,
        };
        self.record_copy(event);
        if self.config.debug_checks {
            self.debug_sweep();
        }
        Ok(event)
    }

    /// A frame left with one mapping goes back to private if that mapping is
    /// in the region its capabilities already target.
    pub(crate) fn promote_sole_mapping(&mut self, frame: FrameId) {
        if self.mem.frames().refcount(frame) != 1 {
            return;
        }
        let Some(&va) = self.mem.mappers_of(frame).next() else {
            return;
        };
        let origin = self.mem.frames().get(frame).expect("frame").origin();
        if self.mem.region_containing(va) != Some(origin) {
            return;
        }
        let entry = *self.mem.pte(va).expect("mapped");
        if entry.is_shared() {
            self.mem
                .replace(va, PageTableEntry::private(frame, entry.prot, entry.owner))
                .expect("mapped");
        }
    }

    /// Terminate a μprocess: tear down its mappings and descriptors.
    pub fn exit(&mut self, pid: Pid, code: i32) -> Result<(), ForkError> {
        match self.procs.get(&pid) {
            Some(p) if p.status == ProcessStatus::Running => {}
            _ => return Err(ForkError::ProcessNotRunning(pid)),
        }
        let prs = self.prs_of(pid);
        self.metrics.record_exit(pid, prs);

        let proc = self.procs.get(&pid).expect("checked").clone();
        let pages: Vec<u64> = self.mem.ptes_in(&proc.region).map(|(va, _)| *va).collect();
        for va in pages {
            let frame = self.mem.pte(va).expect("listed").frame;
            if self.mem.unmap(va)? == 1 {
                self.promote_sole_mapping(frame);
            }
        }
        self.mem.release_region(&proc.region);
        for id in proc.fd_table.values() {
            self.files.decref(*id);
        }
        let p = self.procs.get_mut(&pid).expect("checked");
        p.fd_table.clear();
        p.status = ProcessStatus::Exited(code);

        // Orphans have nobody to reap them.
        for child in proc.children.clone() {
            if let Some(c) = self.procs.get_mut(&child) {
                c.parent = None;
            }
            if self.zombies.contains(&child) {
                self.reap(child);
            }
        }
        self.procs.get_mut(&pid).expect("checked").children.clear();
        let has_parent = proc
            .parent
            .and_then(|pp| self.procs.get(&pp))
            .is_some_and(|pp| pp.status == ProcessStatus::Running);
        if has_parent {
            self.zombies.push(pid);
        } else {
            self.procs.remove(&pid);
        }
        if self.config.debug_checks {
            self.debug_sweep();
        }
        Ok(())
    }

    /// Kill a μprocess after a terminal fault.
    pub fn kill(&mut self, pid: Pid, kind: FaultKind) -> Result<(), ForkError> {
        let code = if kind == FaultKind::PrivilegeFault {
            PRIVILEGE_EXIT_CODE
        } else {
            FAULT_EXIT_CODE
        };
        self.exit(pid, code)
    }

    fn reap(&mut self, pid: Pid) -> Option<i32> {
        self.zombies.retain(|z| *z != pid);
        let proc = self.procs.remove(&pid)?;
        if let Some(parent) = proc.parent.and_then(|pp| self.procs.get_mut(&pp)) {
            parent.children.retain(|c| *c != pid);
        }
        match proc.status {
            ProcessStatus::Exited(code) => Some(code),
            ProcessStatus::Running => None,
        }
    }

    /// Reap the earliest exited child. `Ok(None)` means children exist but
    /// none has exited yet.
    pub fn wait(&mut self, parent: Pid) -> Result<Option<(Pid, i32)>, ForkError> {
        self.wait_for(parent, None)
    }

    /// Like `wait` but only for `child`.
    pub fn wait_pid(&mut self, parent: Pid, child: Pid) -> Result<Option<(Pid, i32)>, ForkError> {
        self.wait_for(parent, Some(child))
    }

    fn wait_for(
        &mut self,
        parent: Pid,
        only: Option<Pid>,
    ) -> Result<Option<(Pid, i32)>, ForkError> {
        let p = self
            .procs
            .get(&parent)
            .filter(|p| p.status == ProcessStatus::Running)
            .ok_or(ForkError::ProcessNotRunning(parent))?;
        let candidates: Vec<Pid> = p
            .children
            .iter()
            .copied()
            .filter(|c| only.is_none_or(|o| o == *c))
            .collect();
        if candidates.is_empty() {
            return Err(ForkError::NoChildren(parent));
        }
        let ready = self
            .zombies
            .iter()
            .copied()
            .find(|z| candidates.contains(z));
        Ok(ready.and_then(|pid| self.reap(pid).map(|code| (pid, code))))
    }

    /// Sum over the pages `pid` maps of PAGE_SIZE divided by the frame's mapping count.
    pub(crate) fn prs_of(&self, pid: Pid) -> crate::metrics::Prs {
        let mut total = crate::metrics::Prs::from_integer(0);
        let region = match self.region_of(pid) {
            Some(r) => r,
            None => return total,
        };
        for (_, e) in self.mem.ptes_in(&region) {
            let rc = self.mem.frames().refcount(e.frame) as u64;
            total += crate::metrics::Prs::new(PAGE_SIZE, rc);
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::address_space::Access;
    use crate::capability::{Capability, Perms};
    use crate::system::SystemConfig;
    use crate::uprocess::LayoutSpec;
    use std::collections::BTreeMap;

    fn boot(strategy: ForkStrategy) -> (System, Pid) {
        let mut sys = System::boot(SystemConfig {
            strategy,
            debug_checks: true,
            arm_audit: true,
            ..SystemConfig::default()
        });
        let pid = sys.create_initial_process(&LayoutSpec::default()).unwrap();
        (sys, pid)
    }

    /// Sweep oracle: per-frame mapping counts for frames touched by `region`.
    fn sweep(sys: &System, region: &Region) -> (usize, usize) {
        let mut counts: BTreeMap<FrameId, usize> = BTreeMap::new();
        for (_, e) in sys.memory().ptes() {
            *counts.entry(e.frame).or_default() += 1;
        }
        let mut private = 0;
        let mut shared = 0;
        for (_, e) in sys.memory().ptes_in(region) {
            match counts[&e.frame] {
                1 => private += 1,
                _ => shared += 1,
            }
        }
        (private, shared)
    }

    fn heap_cap(sys: &System, pid: Pid) -> Capability {
        let p = sys.process(pid).unwrap();
        Capability::new_root(p.layout.heap.base(), p.layout.heap.size(), Perms::DATA)
    }

    #[test]
    fn copa_fork_copies_only_got_and_meta() {
        let (mut sys, parent) = boot(ForkStrategy::CoPA);
        let child = sys.fork(parent, ForkStrategy::CoPA).unwrap();
        let cregion = sys.process(child).unwrap().region;
        assert_eq!(sweep(&sys, &cregion), (2, 8));
        let report = sys.snapshot(Some(child)).unwrap();
        assert_eq!(report.pids[0].eager_pages_copied, 2);
        assert!(sys.violations().is_empty(), "{:?}", sys.violations());
    }

    #[test]
    fn full_copy_shares_nothing() {
        let (mut sys, parent) = boot(ForkStrategy::FullCopy);
        let child = sys.fork(parent, ForkStrategy::FullCopy).unwrap();
        let cregion = sys.process(child).unwrap().region;
        let pregion = sys.process(parent).unwrap().region;
        assert_eq!(sweep(&sys, &cregion), (10, 0));
        assert_eq!(sweep(&sys, &pregion), (10, 0));
        let r = sys.snapshot(Some(child)).unwrap();
        assert_eq!(r.pids[0].eager_pages_copied, 10);
        // GOT and alloc_meta are the only pages with tags.
        assert_eq!(r.pids[0].granules_scanned, 2 * GRANULES_PER_PAGE as u64);
    }

    #[test]
    fn child_pcc_keeps_its_offset() {
        let (mut sys, parent) = boot(ForkStrategy::CoPA);
        let child = sys.fork(parent, ForkStrategy::CoPA).unwrap();
        let p = sys.process(parent).unwrap();
        let c = sys.process(child).unwrap();
        let (ppcc, cpcc) = (p.registers.pcc_cap(), c.registers.pcc_cap());
        assert!(cpcc.bounds_within(&c.region));
        assert_eq!(
            ppcc.cursor() - p.region.base(),
            cpcc.cursor() - c.region.base()
        );
        assert_eq!(p.registers.entries, c.registers.entries);
    }

    #[test]
    fn child_cap_load_copies_and_relocates() {
        let (mut sys, parent) = boot(ForkStrategy::CoPA);
        let heap = heap_cap(&sys, parent);
        let target = heap.derive(heap.base() + 0x100, 0x40).unwrap();
        for g in [0u64, 1] {
            let slot = heap.set_cursor(heap.base() + g * 16).unwrap();
            sys.access(parent, &slot, Access::CapStore(target)).unwrap();
        }
        let child = sys.fork(parent, ForkStrategy::CoPA).unwrap();
        let cregion = sys.process(child).unwrap().region;
        let cheap = heap.rebase_for_child(&sys.process(parent).unwrap().region, &cregion);

        // plain read: no fault, no copy
        let before = sys.snapshot(Some(child)).unwrap().pids[0].lazy_pages_copied();
        sys.access(
            child,
            &cheap.set_cursor(cheap.base() + 0x200).unwrap(),
            Access::Read { len: 8 },
        )
        .unwrap();
        assert_eq!(
            sys.snapshot(Some(child)).unwrap().pids[0].lazy_pages_copied(),
            before
        );

        let fault = sys
            .memory()
            .clone()
            .check_and_access(child, &cheap, Access::CapLoad)
            .unwrap_err();
        assert_eq!(fault.kind, FaultKind::CapLoadFault);
        let ev = sys.resolve_fault(&fault).unwrap();
        assert_eq!(
            (ev.cause, ev.relocations, ev.copied),
            (CopyCause::CapLoadFault, 2, true)
        );
        let loaded = sys.access(child, &cheap, Access::CapLoad).unwrap();
        match loaded {
            crate::address_space::Loaded::Cap(c) => {
                assert!(c.is_tagged());
                assert!(c.bounds_within(&cregion));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parent_write_copies_without_relocation() {
        let (mut sys, parent) = boot(ForkStrategy::CoPA);
        let heap = heap_cap(&sys, parent);
        sys.access(parent, &heap, Access::CapStore(heap)).unwrap();
        let _child = sys.fork(parent, ForkStrategy::CoPA).unwrap();
        let fault = sys
            .memory()
            .clone()
            .check_and_access(parent, &heap, Access::Write(&[1; 8]))
            .unwrap_err();
        assert_eq!(fault.kind, FaultKind::PageWriteFault);
        let ev = sys.resolve_fault(&fault).unwrap();
        assert_eq!((ev.cause, ev.relocations), (CopyCause::WriteFault, 0));
        sys.access(parent, &heap, Access::Write(&[1; 8])).unwrap();
    }

    #[test]
    fn coa_child_read_faults_and_copies() {
        let (mut sys, parent) = boot(ForkStrategy::CoA);
        let child = sys.fork(parent, ForkStrategy::CoA).unwrap();
        let c = sys.process(child).unwrap();
        let cheap = Capability::new_root(c.layout.heap.base(), PAGE_SIZE, Perms::DATA);
        let fault = sys
            .memory()
            .clone()
            .check_and_access(child, &cheap, Access::Read { len: 8 })
            .unwrap_err();
        assert_eq!(fault.kind, FaultKind::PageAccessFault);
        sys.access(child, &cheap, Access::Read { len: 8 }).unwrap();
        let r = sys.snapshot(Some(child)).unwrap();
        assert_eq!(r.pids[0].lazy_pages_copied(), 1);
        // The parent's page was promoted back to private.
        let ppage = sys.process(parent).unwrap().layout.heap.base();
        assert!(!sys.memory().pte(ppage).unwrap().is_shared());
    }

    #[test]
    fn private_faults_are_unresolvable() {
        let (mut sys, parent) = boot(ForkStrategy::CoPA);
        let p = sys.process(parent).unwrap();
        let got = Capability::new_root(p.layout.got.base(), PAGE_SIZE, Perms::DATA);
        let fault = sys
            .memory()
            .clone()
            .check_and_access(parent, &got, Access::Write(&[0]))
            .unwrap_err();
        assert!(matches!(
            sys.resolve_fault(&fault),
            Err(ForkError::UnresolvableFault(_))
        ));
    }

    #[test]
    fn exit_wait_and_reap_free_everything() {
        let (mut sys, parent) = boot(ForkStrategy::CoPA);
        let frames_before = sys.memory().frames().len();
        assert!(matches!(sys.wait(parent), Err(ForkError::NoChildren(_))));
        let child = sys.fork(parent, ForkStrategy::CoPA).unwrap();
        assert_eq!(sys.wait(parent).unwrap(), None);
        sys.exit(child, 7).unwrap();
        assert_eq!(sys.wait(parent).unwrap(), Some((child, 7)));
        assert_eq!(sys.memory().frames().len(), frames_before);
        assert!(sys.memory().refcount_mismatches().is_empty());
        let pregion = sys.process(parent).unwrap().region;
        assert_eq!(sweep(&sys, &pregion), (10, 0));
        assert!(sys.violations().is_empty(), "{:?}", sys.violations());
    }

    #[test]
    fn unsafe_cow_requires_armed_audit() {
        let mut sys = System::boot(SystemConfig::default());
        let pid = sys.create_initial_process(&LayoutSpec::default()).unwrap();
        assert_eq!(
            sys.fork(pid, ForkStrategy::UnsafeCoW),
            Err(ForkError::UnsafeStrategyDisarmed)
        );
    }

    #[test]
    fn eager_copies_independent_of_heap_size() {
        for heap_pages in [4u64, 64, 512] {
            let mut sys = System::boot(SystemConfig::default());
            let pid = sys
                .create_initial_process(&LayoutSpec {
                    heap_pages,
                    ..LayoutSpec::default()
                })
                .unwrap();
            let child = sys.fork(pid, ForkStrategy::CoPA).unwrap();
            assert_eq!(
                sys.snapshot(Some(child)).unwrap().pids[0].eager_pages_copied,
                2
            );
        }
    }

    #[test]
    fn nested_fork_relocates_against_frame_origin() {
        let (mut sys, root) = boot(ForkStrategy::CoPA);
        let heap = heap_cap(&sys, root);
        let target = heap.derive(heap.base() + 0x80, 0x10).unwrap();
        sys.access(root, &heap, Access::CapStore(target)).unwrap();
        let child = sys.fork(root, ForkStrategy::CoPA).unwrap();
        let grandchild = sys.fork(child, ForkStrategy::CoPA).unwrap();
        let gregion = sys.process(grandchild).unwrap().region;
        let rregion = sys.process(root).unwrap().region;
        let gheap = heap.rebase_for_child(&rregion, &gregion);
        let got = sys.access(grandchild, &gheap, Access::CapLoad).unwrap();
        let crate::address_space::Loaded::Cap(c) = got else {
            panic!()
        };
        assert!(c.bounds_within(&gregion));
        assert_eq!(c.base() - gregion.base(), target.base() - rregion.base());
        assert!(sys.violations().is_empty(), "{:?}", sys.violations());
    }
}
