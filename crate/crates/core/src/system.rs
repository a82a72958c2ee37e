//! The simulator core: owns all mutable state and funnels every memory access
//! through the check pipeline plus fault resolution.

use std::collections::{BTreeMap, BTreeSet};

use crate::address_space::{
    Access, AddressSpace, Fault, Loaded, PageProt, PageTableEntry, DEFAULT_VA_LIMIT,
};
use crate::capability::{Capability, DeriveMode, Perms, Region};
use crate::fork_engine::ForkStrategy;
use crate::kernel_gateway::{Gateway, IsolationLevel};
use crate::metrics::Metrics;
use crate::tagged_memory::{GRANULE, PAGE_SIZE};
use crate::uprocess::{FileTable, MicroProcess, Pid, KERNEL_PID};

/// Pages of kernel memory used to stage copied-in syscall buffers.
pub const BOUNCE_PAGES: u64 = 4;
pub const BOUNCE_BYTES: usize = (BOUNCE_PAGES * PAGE_SIZE) as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SystemConfig {
    /// Strategy used by the fork syscall.
    pub strategy: ForkStrategy,
    pub isolation: IsolationLevel,
    /// Arms the auditor. Required before `UnsafeCoW` forks are accepted.
    pub arm_audit: bool,
    /// Sweep refcounts and relocation results after every mutation.
    pub debug_checks: bool,
    pub derive_mode: DeriveMode,
    pub va_limit: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            strategy: ForkStrategy::CoPA,
            isolation: IsolationLevel::FullIsolation,
            arm_audit: false,
            debug_checks: false,
            derive_mode: DeriveMode::Strict,
            va_limit: DEFAULT_VA_LIMIT,
        }
    }
}

/// Kernel memory and the kernel's own capabilities.
#[derive(Debug, Clone)]
pub struct KernelState {
    pub region: Region,
    pub pcc: Capability,
    pub code: Region,
    pub bounce: Capability,
}

/// A capability rewritten by relocation that lost its tag because it pointed
/// at neither the parent nor the child.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEvent {
    pub pid: Pid,
    pub page_va: u64,
    pub invalidated: usize,
}

#[derive(Debug, Clone)]
pub struct System {
    pub(crate) mem: AddressSpace,
    pub(crate) procs: BTreeMap<Pid, MicroProcess>,
    pub(crate) files: FileTable,
    pub(crate) gateway: Gateway,
    pub(crate) kernel: KernelState,
    pub(crate) metrics: Metrics,
    pub(crate) config: SystemConfig,
    pub(crate) audit_log: Vec<AuditEvent>,
    pub(crate) violations: Vec<String>,
    /// Exited, unreaped children in exit order.
    pub(crate) zombies: Vec<Pid>,
    next_pid: u32,
}

impl System {
    /// Reserve kernel memory and register every syscall entry.
    pub fn boot(config: SystemConfig) -> System {
        let mut mem = AddressSpace::new(config.va_limit);
        let region = mem
            .reserve_region((1 + BOUNCE_PAGES) * PAGE_SIZE)
            .expect("kernel region fits");
        for page in 0..region.pages() {
            let va = region.base() + page * PAGE_SIZE;
            let frame = mem.frames_mut().alloc(region);
            let prot = if page == 0 {
                PageProt::RX
            } else {
                PageProt::RW
            };
            mem.map(va, PageTableEntry::private(frame, prot, KERNEL_PID))
                .expect("kernel mapping");
        }
        let code = Region::new(region.base(), PAGE_SIZE).unwrap();
        let kernel = KernelState {
            region,
            pcc: Capability::new_root(code.base(), code.size(), Perms::CODE | Perms::SYSTEM),
            code,
            bounce: Capability::new_root(
                region.base() + PAGE_SIZE,
                BOUNCE_PAGES * PAGE_SIZE,
                Perms::DATA,
            ),
        };
        let mut sys = System {
            mem,
            procs: BTreeMap::new(),
            files: FileTable::default(),
            gateway: Gateway::default(),
            kernel,
            metrics: Metrics::default(),
            config,
            audit_log: Vec::new(),
            violations: Vec::new(),
            zombies: Vec::new(),
            next_pid: 1,
        };
        sys.register_boot_entries();
        sys
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn memory(&self) -> &AddressSpace {
        &self.mem
    }

    pub fn kernel(&self) -> &KernelState {
        &self.kernel
    }

    pub fn files(&self) -> &FileTable {
        &self.files
    }

    pub fn process(&self, pid: Pid) -> Option<&MicroProcess> {
        self.procs.get(&pid)
    }

    pub fn processes(&self) -> impl Iterator<Item = &MicroProcess> {
        self.procs.values()
    }

    pub fn audit_log(&self) -> &[AuditEvent] {
        &self.audit_log
    }

    /// Invariant breaches noticed by debug checks.
    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    /// Overwrite a register. Stands in for a compromised or buggy μprocess
    /// that obtained a capability by other means.
    pub fn set_register(
        &mut self,
        pid: Pid,
        index: usize,
        value: crate::uprocess::RegisterValue,
    ) -> bool {
        match self.procs.get_mut(&pid) {
            Some(p) if index < p.registers.gpr.len() => {
                p.registers.gpr[index] = value;
                true
            }
            _ => false,
        }
    }

    pub(crate) fn allocate_pid(&mut self) -> Pid {
        let pid = Pid(self.next_pid);
        self.next_pid += 1;
        pid
    }

    pub(crate) fn region_of(&self, pid: Pid) -> Option<Region> {
        if pid == KERNEL_PID {
            Some(self.kernel.region)
        } else {
            self.procs.get(&pid).map(|p| p.region)
        }
    }

    /// Raw capability store used by boot and fork code; bypasses page state.
    pub(crate) fn kernel_store_cap(&mut self, va: u64, cap: &Capability) {
        let page = crate::address_space::page_of(va);
        let frame = self.mem.pte(page).expect("mapped kernel target").frame;
        self.mem
            .frames_mut()
            .get_mut(frame)
            .expect("frame")
            .store_capability(((va - page) / GRANULE) as usize, cap)
            .expect("aligned");
    }

    /// Perform an access as `pid`, resolving page faults and retrying.
    ///
    /// Each page may be resolved once per access; a second fault on the same
    /// page is reported as an invariant breach and returned.
    pub fn access(
        &mut self,
        pid: Pid,
        cap: &Capability,
        access: Access<'_>,
    ) -> Result<Loaded, Fault> {
        let mut resolved = BTreeSet::new();
        loop {
            match self.mem.check_and_access(pid, cap, access) {
                Ok(v) => {
                    if self.config.debug_checks
                        && pid != KERNEL_PID
                        && self.config.strategy != ForkStrategy::UnsafeCoW
                    {
                        self.check_access_containment(pid, cap);
                    }
                    return Ok(v);
                }
                Err(fault) => {
                    self.metrics.record_fault(&fault);
                    if !fault.kind.is_resolvable() {
                        return Err(fault);
                    }
                    if !resolved.insert(fault.page_va) {
                        self.violations
                            .push(format!("repeated fault after resolution: {fault}"));
                        return Err(fault);
                    }
                    if self.resolve_fault(&fault).is_err() {
                        return Err(fault);
                    }
                }
            }
        }
    }

    fn check_access_containment(&mut self, pid: Pid, cap: &Capability) {
        if let Some(region) = self.region_of(pid) {
            if !cap.bounds_within(&region) {
                self.violations.push(format!(
                    "pid {pid} accessed through {cap} outside its region {region}"
                ));
            }
        }
    }

    /// Sweep page-table invariants. Cheap enough to run after every step of
    /// small workloads.
    pub fn debug_sweep(&mut self) {
        let mut found = self.mem.refcount_mismatches();
        for (va, e) in self.mem.ptes() {
            if e.is_shared() {
                continue;
            }
            let Some(region) = self.mem.region_containing(*va) else {
                found.push(format!("mapping at {va:#x} outside any region"));
                continue;
            };
            let frame = self.mem.frames().get(e.frame).expect("mapped frame");
            if frame.origin() != region {
                found.push(format!(
                    "private page {va:#x} holds a frame relative to {}",
                    frame.origin()
                ));
            }
            if e.owner != KERNEL_PID && self.mem.frames().refcount(e.frame) != 1 {
                found.push(format!("private page {va:#x} shares its frame"));
            }
        }
        self.violations.extend(found);
    }
}
