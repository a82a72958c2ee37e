//! Sealed syscall entries, isolation levels and the containment auditor.
//!
//! Every syscall is reached by invoking a sealed capability pointing into the
//! kernel code page. The isolation level decides how by-reference arguments
//! are handled:
//!
//! * `FullIsolation` copies user buffers into kernel bounce pages before
//!   validating them and copies results back out afterwards.
//! * `FaultIsolation` validates user buffers in place.
//! * `NoIsolation` uses whatever capability it was handed.
//!
//! A TOCTTOU hook runs between validation and use, which is the only point
//! where another party can interleave with a handler.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::address_space::{Access, Fault, FaultKind, Loaded};
use crate::capability::{CapError, Capability, GatewayKey, InvokeContext, OType, Perms, Region};
use crate::fork_engine::ForkError;
use crate::system::{System, BOUNCE_BYTES};
use crate::tagged_memory::GRANULE;
use crate::uprocess::{
    Pid, ProcessStatus, RegisterSlot, RegisterValue, KERNEL_PID, META_HEAP_SLOT,
};

/// Object types handed to syscall entries start here.
pub const ENTRY_OTYPE_BASE: u32 = 0x100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Syscall {
    Fork,
    Exit,
    Wait,
    Getpid,
    Open,
    Close,
    Read,
    Write,
    Brk,
    Yield,
    Pipe,
}

impl Syscall {
    pub const ALL: [Syscall; 11] = [
        Syscall::Fork,
        Syscall::Exit,
        Syscall::Wait,
        Syscall::Getpid,
        Syscall::Open,
        Syscall::Close,
        Syscall::Read,
        Syscall::Write,
        Syscall::Brk,
        Syscall::Yield,
        Syscall::Pipe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Syscall::Fork => "fork",
            Syscall::Exit => "exit",
            Syscall::Wait => "wait",
            Syscall::Getpid => "getpid",
            Syscall::Open => "open",
            Syscall::Close => "close",
            Syscall::Read => "read",
            Syscall::Write => "write",
            Syscall::Brk => "brk",
            Syscall::Yield => "yield",
            Syscall::Pipe => "pipe",
        }
    }

    pub fn from_name(name: &str) -> Option<Syscall> {
        Syscall::ALL.into_iter().find(|s| s.name() == name)
    }

    fn index(self) -> u32 {
        Syscall::ALL
            .iter()
            .position(|s| *s == self)
            .expect("listed") as u32
    }
}

impl fmt::Display for Syscall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum IsolationLevel {
    NoIsolation,
    FaultIsolation,
    #[default]
    FullIsolation,
}

impl IsolationLevel {
    pub const ALL: [IsolationLevel; 3] = [
        IsolationLevel::NoIsolation,
        IsolationLevel::FaultIsolation,
        IsolationLevel::FullIsolation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IsolationLevel::NoIsolation => "none",
            IsolationLevel::FaultIsolation => "fault",
            IsolationLevel::FullIsolation => "full",
        }
    }
}

impl fmt::Display for IsolationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IsolationLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(IsolationLevel::NoIsolation),
            "fault" => Ok(IsolationLevel::FaultIsolation),
            "full" => Ok(IsolationLevel::FullIsolation),
            other => Err(format!(
                "unknown isolation level `{other}` (expected none, fault or full)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error)]
pub enum Errno {
    #[error("EFAULT")]
    Efault,
    #[error("ENOSYS")]
    Enosys,
    #[error("EBADF")]
    Ebadf,
    #[error("ECHILD")]
    Echild,
    #[error("ENOMEM")]
    Enomem,
    #[error("EINVAL")]
    Einval,
}

impl Errno {
    pub fn code(self) -> i64 {
        match self {
            Errno::Efault => -14,
            Errno::Enosys => -38,
            Errno::Ebadf => -9,
            Errno::Echild => -10,
            Errno::Enomem => -12,
            Errno::Einval => -22,
        }
    }
}

/// Arguments of one syscall. Paths are passed by value; data buffers are
/// passed as capabilities into the caller's memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SyscallArgs {
    None,
    Exit(i32),
    WaitPid(Pid),
    Open(String),
    Close(i32),
    Io {
        fd: i32,
        buf: Capability,
        len: usize,
    },
    Brk(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyscallRet {
    Value(i64),
    Reaped {
        pid: Pid,
        code: i32,
    },
    /// Children exist but none has exited; the caller should retry later.
    WouldBlock,
    Pair(i32, i32),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("syscall entry for {0} is already registered")]
    DuplicateEntry(Syscall),
    #[error("entry registration is closed after boot")]
    RegistrationClosed,
    #[error("entry capability rejected: {0}")]
    BadEntry(CapError),
    #[error("capability is not a registered kernel entry")]
    ForgedEntry,
    #[error("process {0} is not running")]
    NotRunning(Pid),
    #[error("{0}")]
    Errno(#[from] Errno),
}

impl GatewayError {
    pub fn errno(&self) -> Option<Errno> {
        match self {
            GatewayError::Errno(e) => Some(*e),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToctouOutcome {
    Protected,
    Vulnerable,
}

impl fmt::Display for ToctouOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToctouOutcome::Protected => "Protected",
            ToctouOutcome::Vulnerable => "Vulnerable",
        })
    }
}

/// Runs between argument validation and use.
pub type Hook<'h> = &'h mut dyn FnMut(&mut System, Pid);

/// Registered syscall entries.
#[derive(Debug, Clone, Default)]
pub struct Gateway {
    entries: BTreeMap<Syscall, Capability>,
    closed: bool,
    /// Bytes written by probe syscalls that target no descriptor.
    sink: Vec<u8>,
}

impl Gateway {
    pub fn entries(&self) -> impl Iterator<Item = (Syscall, Capability)> + '_ {
        self.entries.iter().map(|(s, c)| (*s, *c))
    }

    pub fn entry(&self, syscall: Syscall) -> Option<Capability> {
        self.entries.get(&syscall).copied()
    }

    pub fn is_entry(&self, cap: &Capability) -> bool {
        cap.is_sealed() && self.entries.values().any(|e| e == cap)
    }

    fn lookup(&self, cap: &Capability) -> Option<Syscall> {
        self.entries
            .iter()
            .find(|(_, e)| *e == cap)
            .map(|(s, _)| *s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationSite {
    Register(RegisterSlot),
    Memory { page_va: u64, granule: usize },
}

impl fmt::Display for ViolationSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationSite::Register(r) => write!(f, "register {r}"),
            ViolationSite::Memory { page_va, granule } => {
                write!(f, "{:#x}", page_va + *granule as u64 * GRANULE)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub pid: Pid,
    pub site: ViolationSite,
    pub cap: Capability,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "pid {} at {}: {} ({})",
            self.pid, self.site, self.cap, self.reason
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub violations: Vec<Violation>,
    /// Tagged capabilities inspected.
    pub inspected: usize,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "inspected={}", self.inspected)?;
        writeln!(f, "violations={}", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "violation {v}")?;
        }
        Ok(())
    }
}

impl System {
    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub(crate) fn register_boot_entries(&mut self) {
        for s in Syscall::ALL {
            self.register_entry(s).expect("fresh gateway");
        }
        self.gateway.closed = true;
    }

    /// Mint the sealed entry for `syscall`. Only possible during boot.
    pub fn register_entry(&mut self, syscall: Syscall) -> Result<Capability, GatewayError> {
        if self.gateway.closed {
            return Err(GatewayError::RegistrationClosed);
        }
        if self.gateway.entries.contains_key(&syscall) {
            return Err(GatewayError::DuplicateEntry(syscall));
        }
        let idx = syscall.index();
        let code = self.kernel.code;
        let entry = self
            .kernel
            .pcc
            .derive_with(
                code.base(),
                code.size(),
                Perms::EXEC | Perms::LOAD,
                self.config.derive_mode,
            )
            .and_then(|c| c.set_cursor(code.base() + idx as u64 * GRANULE))
            .and_then(|c| c.seal(OType(ENTRY_OTYPE_BASE + idx)))
            .expect("entry derives from kernel pcc");
        self.gateway.entries.insert(syscall, entry);
        Ok(entry)
    }

    /// Invoke a syscall through the entry capability the caller holds.
    pub fn invoke(
        &mut self,
        pid: Pid,
        entry: &Capability,
        args: SyscallArgs,
    ) -> Result<SyscallRet, GatewayError> {
        self.invoke_hooked(pid, entry, args, None)
    }

    /// Like `invoke`, with a hook run after argument checks and before use.
    pub fn invoke_hooked(
        &mut self,
        pid: Pid,
        entry: &Capability,
        args: SyscallArgs,
        hook: Option<Hook<'_>>,
    ) -> Result<SyscallRet, GatewayError> {
        if !self
            .procs
            .get(&pid)
            .is_some_and(|p| p.status == ProcessStatus::Running)
        {
            return Err(GatewayError::NotRunning(pid));
        }
        let key = GatewayKey::mint();
        let target = entry
            .unseal_invoke(InvokeContext::Gateway(&key))
            .map_err(GatewayError::BadEntry)?;
        let syscall = self
            .gateway
            .lookup(entry)
            .ok_or(GatewayError::ForgedEntry)?;
        debug_assert!(self.kernel.code.contains(target.cursor()));
        self.dispatch(pid, syscall, args, hook)
            .map_err(GatewayError::Errno)
    }

    /// Invoke using the entry held in the caller's register file.
    pub fn syscall(
        &mut self,
        pid: Pid,
        syscall: Syscall,
        args: SyscallArgs,
    ) -> Result<SyscallRet, GatewayError> {
        let entry = self
            .procs
            .get(&pid)
            .and_then(|p| p.registers.entries.get(&syscall).copied())
            .ok_or(GatewayError::NotRunning(pid))?;
        self.invoke(pid, &entry, args)
    }

    /// Invoke by name; unknown names give ENOSYS.
    pub fn syscall_named(
        &mut self,
        pid: Pid,
        name: &str,
        args: SyscallArgs,
    ) -> Result<SyscallRet, GatewayError> {
        let s = Syscall::from_name(name).ok_or(GatewayError::Errno(Errno::Enosys))?;
        self.syscall(pid, s, args)
    }

    fn dispatch(
        &mut self,
        pid: Pid,
        syscall: Syscall,
        args: SyscallArgs,
        hook: Option<Hook<'_>>,
    ) -> Result<SyscallRet, Errno> {
        use SyscallArgs as A;
        match (syscall, args) {
            (Syscall::Fork, A::None) => match self.fork(pid, self.config.strategy) {
                Ok(child) => Ok(SyscallRet::Value(child.0 as i64)),
                Err(ForkError::AddressSpace(_)) => Err(Errno::Enomem),
                Err(_) => Err(Errno::Einval),
            },
            (Syscall::Exit, A::Exit(code)) => {
                self.exit(pid, code).map_err(|_| Errno::Einval)?;
                Ok(SyscallRet::Value(0))
            }
            (Syscall::Wait, a @ (A::None | A::WaitPid(_))) => {
                let r = match a {
                    A::WaitPid(child) => self.wait_pid(pid, child),
                    _ => self.wait(pid),
                };
                match r {
                    Ok(Some((pid, code))) => Ok(SyscallRet::Reaped { pid, code }),
                    Ok(None) => Ok(SyscallRet::WouldBlock),
                    Err(_) => Err(Errno::Echild),
                }
            }
            (Syscall::Getpid, A::None) => Ok(SyscallRet::Value(pid.0 as i64)),
            (Syscall::Yield, A::None) => Ok(SyscallRet::Value(0)),
            (Syscall::Open, A::Open(path)) => {
                let id = self.files.open(&path);
                let fd = self.install_fd(pid, id).map_err(|_| Errno::Einval)?;
                Ok(SyscallRet::Value(fd as i64))
            }
            (Syscall::Pipe, A::None) => {
                let id = self.files.pipe();
                let r = self.install_fd(pid, id).map_err(|_| Errno::Einval)?;
                let w = self.install_fd(pid, id).map_err(|_| Errno::Einval)?;
                Ok(SyscallRet::Pair(r, w))
            }
            (Syscall::Close, A::Close(fd)) => {
                self.close_fd(pid, fd).map_err(|_| Errno::Ebadf)?;
                Ok(SyscallRet::Value(0))
            }
            (Syscall::Write, A::Io { fd, buf, len }) => {
                let id = self.fd_lookup(pid, fd)?;
                let bytes = self.copy_in(pid, &buf, len, hook)?;
                Ok(SyscallRet::Value(self.files.write(id, &bytes) as i64))
            }
            (Syscall::Read, A::Io { fd, buf, len }) => {
                let id = self.fd_lookup(pid, fd)?;
                self.copy_out(pid, &buf, len, hook, |sys| sys.files.read(id, len))
            }
            (Syscall::Brk, A::Brk(incr)) => self.brk(pid, incr).map(SyscallRet::Value),
            _ => Err(Errno::Einval),
        }
    }

    fn fd_lookup(&self, pid: Pid, fd: i32) -> Result<crate::uprocess::FileId, Errno> {
        self.procs
            .get(&pid)
            .and_then(|p| p.fd_table.get(&fd).copied())
            .ok_or(Errno::Ebadf)
    }

    /// In-place validation of a user buffer: tagged, unsealed, bounded inside
    /// the caller's region, large enough, and carrying `perms`.
    fn validate_user_buffer(
        &self,
        pid: Pid,
        buf: &Capability,
        len: usize,
        perms: Perms,
    ) -> Result<(), Errno> {
        let region = self.region_of(pid).ok_or(Errno::Efault)?;
        let ok = buf.is_tagged()
            && !buf.is_sealed()
            && buf.bounds_within(&region)
            && buf.in_bounds(len as u64)
            && buf.perms().contains(perms);
        ok.then_some(()).ok_or(Errno::Efault)
    }

    fn user_read(&mut self, pid: Pid, buf: &Capability, len: usize) -> Result<Vec<u8>, Errno> {
        if len == 0 {
            return Ok(Vec::new());
        }
        match self.access(pid, buf, Access::Read { len }) {
            Ok(Loaded::Bytes(b)) => Ok(b),
            _ => Err(Errno::Efault),
        }
    }

    fn user_write(&mut self, pid: Pid, buf: &Capability, bytes: &[u8]) -> Result<(), Errno> {
        if bytes.is_empty() {
            return Ok(());
        }
        self.access(pid, buf, Access::Write(bytes))
            .map(|_| ())
            .map_err(|_| Errno::Efault)
    }

    fn bounce_cap(&self, len: usize) -> Result<Capability, Errno> {
        if len > BOUNCE_BYTES {
            return Err(Errno::Einval);
        }
        Ok(self.kernel.bounce)
    }

    /// Bring `len` bytes of a user buffer into the kernel.
    fn copy_in(
        &mut self,
        pid: Pid,
        buf: &Capability,
        len: usize,
        hook: Option<Hook<'_>>,
    ) -> Result<Vec<u8>, Errno> {
        match self.config.isolation {
            IsolationLevel::FullIsolation => {
                let bounce = self.bounce_cap(len)?;
                let bytes = self.user_read(pid, buf, len)?;
                if len > 0 {
                    self.access(KERNEL_PID, &bounce, Access::Write(&bytes))
                        .map_err(|_| Errno::Efault)?;
                }
                self.validate_user_buffer(pid, buf, len, Perms::LOAD)?;
                if let Some(h) = hook {
                    h(self, pid);
                }
                self.user_read(KERNEL_PID, &bounce, len)
            }
            IsolationLevel::FaultIsolation => {
                self.validate_user_buffer(pid, buf, len, Perms::LOAD)?;
                if let Some(h) = hook {
                    h(self, pid);
                }
                self.user_read(pid, buf, len)
            }
            IsolationLevel::NoIsolation => {
                if let Some(h) = hook {
                    h(self, pid);
                }
                self.user_read(pid, buf, len)
            }
        }
    }

    /// Produce kernel data with `produce` and deliver it into a user buffer.
    fn copy_out(
        &mut self,
        pid: Pid,
        buf: &Capability,
        len: usize,
        hook: Option<Hook<'_>>,
        produce: impl FnOnce(&mut System) -> Vec<u8>,
    ) -> Result<SyscallRet, Errno> {
        let level = self.config.isolation;
        if level != IsolationLevel::NoIsolation {
            self.validate_user_buffer(pid, buf, len, Perms::STORE)?;
        }
        if let Some(h) = hook {
            h(self, pid);
        }
        let bounce = match level {
            IsolationLevel::FullIsolation => Some(self.bounce_cap(len)?),
            _ => None,
        };
        let data = produce(self);
        let data = match bounce {
            Some(b) if !data.is_empty() => {
                self.access(KERNEL_PID, &b, Access::Write(&data))
                    .map_err(|_| Errno::Efault)?;
                self.user_read(KERNEL_PID, &b, data.len())?
            }
            _ => data,
        };
        self.user_write(pid, buf, &data)?;
        Ok(SyscallRet::Value(data.len() as i64))
    }

    /// Move the heap break kept in the allocator metadata. Returns the new
    /// break as an offset from the start of the heap.
    pub(crate) fn brk(&mut self, pid: Pid, incr: i64) -> Result<i64, Errno> {
        let p = self.procs.get(&pid).ok_or(Errno::Einval)?;
        let meta = Capability::new_root(
            p.layout.alloc_meta.base(),
            p.layout.alloc_meta.size(),
            Perms::DATA,
        )
        .set_cursor(p.layout.alloc_meta.base() + META_HEAP_SLOT * GRANULE)
        .expect("fresh capability");
        let heap = p.layout.heap;
        let cap = match self.access(pid, &meta, Access::CapLoad) {
            Ok(Loaded::Cap(c)) if c.is_tagged() => c,
            _ => return Err(Errno::Efault),
        };
        let next = cap.cursor() as i128 + incr as i128;
        if next < heap.base() as i128 || next > heap.end() as i128 {
            return Err(Errno::Enomem);
        }
        let moved = cap.set_cursor(next as u64).map_err(|_| Errno::Efault)?;
        self.access(pid, &meta, Access::CapStore(moved))
            .map_err(|_| Errno::Efault)?;
        Ok((next as u64 - heap.base()) as i64)
    }

    /// Check whether the kernel acts on a buffer as it was when checked.
    ///
    /// The buffer is written to an internal sink while `hook` mutates it
    /// between check and use; the sink is then compared with a snapshot taken
    /// before the call.
    pub fn toctou_probe(
        &mut self,
        pid: Pid,
        buf: &Capability,
        len: usize,
        hook: Hook<'_>,
    ) -> Result<ToctouOutcome, Errno> {
        let before = self.user_read(pid, buf, len)?;
        let got = self.copy_in(pid, buf, len, Some(hook))?;
        self.gateway.sink.extend_from_slice(&got);
        Ok(if got == before {
            ToctouOutcome::Protected
        } else {
            ToctouOutcome::Vulnerable
        })
    }

    /// Execute the simulated privileged instruction as `pid`.
    pub fn attempt_privileged(&mut self, pid: Pid) -> Result<(), Fault> {
        let pcc = if pid == KERNEL_PID {
            self.kernel.pcc
        } else {
            self.procs
                .get(&pid)
                .map(|p| p.registers.pcc_cap())
                .unwrap_or_else(Capability::null)
        };
        if pcc.is_tagged() && pcc.perms().contains(Perms::SYSTEM) {
            return Ok(());
        }
        let fault = Fault {
            kind: FaultKind::PrivilegeFault,
            pid,
            page_va: crate::address_space::page_of(pcc.cursor()),
            access: crate::address_space::AccessKind::Exec,
        };
        self.metrics.record_fault(&fault);
        Err(fault)
    }

    /// Privileged operation in kernel context.
    pub fn kernel_privileged(&mut self) -> Result<(), Fault> {
        self.attempt_privileged(KERNEL_PID)
    }

    /// Every tagged capability a running μprocess can obtain without faulting
    /// must be bounded inside its region or be a registered kernel entry.
    pub fn audit(&self) -> AuditReport {
        let mut report = AuditReport::default();
        let check = |report: &mut AuditReport,
                     pid: Pid,
                     region: &Region,
                     site: ViolationSite,
                     cap: &Capability| {
            report.inspected += 1;
            if cap.bounds_within(region) || self.gateway.is_entry(cap) {
                return;
            }
            let reason = match self.memory().region_containing(cap.base()) {
                Some(r) if r == self.kernel.region => "reaches kernel memory".to_string(),
                Some(r) => format!("bounded in foreign region {r}"),
                None => "bounded outside any live region".to_string(),
            };
            report.violations.push(Violation {
                pid,
                site,
                cap: *cap,
                reason,
            });
        };
        for p in self.procs.values() {
            if p.status != ProcessStatus::Running {
                continue;
            }
            for (slot, v) in p.registers.slots() {
                if let RegisterValue::Cap(c) = v {
                    if c.is_tagged() {
                        check(
                            &mut report,
                            p.pid,
                            &p.region,
                            ViolationSite::Register(slot),
                            &c,
                        );
                    }
                }
            }
            for (va, e) in self.mem.ptes_in(&p.region) {
                if !e.cap_load_allowed() {
                    continue;
                }
                let frame = self.mem.frames().get(e.frame).expect("mapped frame");
                for (g, c) in frame.tagged() {
                    let site = ViolationSite::Memory {
                        page_va: *va,
                        granule: g,
                    };
                    check(&mut report, p.pid, &p.region, site, c);
                }
            }
        }
        report
    }
}
