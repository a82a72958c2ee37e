use std::collections::{BTreeMap, VecDeque};
use std::rc::Rc;

use thiserror::Error;

use super::ast::{Loc, Script, Stmt};
use super::trace::{render_cap, Trace, TraceEntry};
use crate::address_space::{Access, FaultKind, Loaded};
use crate::capability::{CapError, Capability};
use crate::fork_engine::{CopyEvent, ForkStrategy};
use crate::kernel_gateway::{
    AuditReport, GatewayError, IsolationLevel, Syscall, SyscallArgs, SyscallRet,
};
use crate::metrics::MetricsReport;
use crate::system::{System, SystemConfig};
use crate::tagged_memory::GRANULE;
use crate::uprocess::{
    Pid, ProcError, RegisterValue, GOT_ALLOC_META, META_FIRST_CHUNK, META_HEAP_SLOT,
};

/// Exit code of a μprocess whose allocation could not be satisfied.
pub const ENOMEM_EXIT_CODE: i32 = 134;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunConfig {
    pub strategy: ForkStrategy,
    pub isolation: IsolationLevel,
    /// Recorded for reproducibility; scheduling never depends on it.
    pub seed: u64,
    /// Sweep page-table invariants after every mutation.
    pub debug_checks: bool,
    /// Audit after every statement instead of only before each exit.
    pub audit_every_step: bool,
    pub max_steps: u64,
}

impl RunConfig {
    pub fn new(strategy: ForkStrategy) -> RunConfig {
        RunConfig {
            strategy,
            isolation: IsolationLevel::FullIsolation,
            seed: 0,
            debug_checks: false,
            audit_every_step: false,
            max_steps: 10_000_000,
        }
    }

    pub fn isolation(mut self, isolation: IsolationLevel) -> RunConfig {
        self.isolation = isolation;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RunError {
    #[error("cannot create the first process: {0}")]
    Boot(#[from] ProcError),
    #[error("gave up after {0} steps")]
    StepLimit(u64),
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: Trace,
    pub report: MetricsReport,
    /// Violations found by the audits taken during the run.
    pub audit: AuditReport,
    pub assertion_failures: Vec<String>,
    pub copy_events: Vec<CopyEvent>,
    /// Invariant breaches noticed by debug checks.
    pub violations: Vec<String>,
    pub exit_codes: BTreeMap<Pid, i32>,
}

impl RunOutcome {
    pub fn trace_hash(&self) -> String {
        self.trace.hash()
    }
}

struct Task {
    pid: Pid,
    stmts: Rc<Vec<Stmt>>,
    pc: usize,
    symbols: BTreeMap<String, u64>,
    next_slot: u64,
    last: Option<String>,
    join: Option<(String, Pid)>,
}

enum Flow {
    Next,
    Yield,
    Block,
    Done,
}

fn cursor(cap: &Capability, addr: u64) -> Result<Capability, FaultKind> {
    cap.set_cursor(addr).map_err(|e| match e {
        CapError::SealedMutation => FaultKind::CapSealedFault,
        _ => FaultKind::CapTagFault,
    })
}

fn gateway_outcome(e: GatewayError) -> String {
    match e.errno() {
        Some(errno) => errno.to_string(),
        None => format!("error({e})"),
    }
}

struct Interp<'o> {
    sys: System,
    trace: Trace,
    audit: AuditReport,
    assertion_failures: Vec<String>,
    exit_codes: BTreeMap<Pid, i32>,
    audit_every_step: bool,
    observer: &'o mut dyn FnMut(&System, &TraceEntry),
}

impl Interp<'_> {
    fn mem(&mut self, pid: Pid, cap: &Capability, access: Access<'_>) -> Result<Loaded, FaultKind> {
        self.sys.access(pid, cap, access).map_err(|f| f.kind)
    }

    fn load_cap(&mut self, pid: Pid, at: &Capability) -> Result<Capability, FaultKind> {
        match self.mem(pid, at, Access::CapLoad)? {
            Loaded::Cap(c) => Ok(c),
            _ => unreachable!("capability load returns a capability"),
        }
    }

    /// GOT slot 1 holds the allocator metadata capability.
    fn meta_cap(&mut self, pid: Pid) -> Result<Capability, FaultKind> {
        let cgp = self.sys.process(pid).expect("running").registers.cgp_cap();
        let slot = cursor(&cgp, cgp.base() + GOT_ALLOC_META * GRANULE)?;
        self.load_cap(pid, &slot)
    }

    fn resolve(&mut self, task: &Task, loc: &Loc) -> Result<Capability, FaultKind> {
        let slot = task.symbols[&loc.name];
        let meta = self.meta_cap(task.pid)?;
        let at = cursor(&meta, meta.base() + (META_FIRST_CHUNK + slot) * GRANULE)?;
        let chunk = self.load_cap(task.pid, &at)?;
        cursor(&chunk, chunk.base().wrapping_add(loc.off))
    }

    fn render(&self, pid: Pid, cap: &Capability) -> String {
        render_cap(cap, &self.sys.process(pid).expect("running").region)
    }

    fn merge_audit(&mut self) {
        let r = self.sys.audit();
        self.audit.inspected += r.inspected;
        for v in r.violations {
            if !self.audit.violations.contains(&v) {
                self.audit.violations.push(v);
            }
        }
    }

    fn exit(&mut self, pid: Pid, code: i32) {
        self.merge_audit();
        self.sys.exit(pid, code).expect("running process exits");
        self.exit_codes.insert(pid, code);
    }

    fn kill(&mut self, pid: Pid, kind: FaultKind) {
        self.merge_audit();
        self.sys.kill(pid, kind).expect("running process exits");
        let code = match kind {
            FaultKind::PrivilegeFault => crate::fork_engine::PRIVILEGE_EXIT_CODE,
            _ => crate::fork_engine::FAULT_EXIT_CODE,
        };
        self.exit_codes.insert(pid, code);
    }

    fn record(&mut self, pid: Pid, stmt: String, outcome: String) {
        self.trace.push(pid, stmt, outcome);
        if self.audit_every_step {
            self.merge_audit();
        }
        (self.observer)(&self.sys, self.trace.last().expect("just pushed"));
    }

    fn alloc(
        &mut self,
        task: &mut Task,
        name: &str,
        bytes: u64,
    ) -> Result<Option<Capability>, FaultKind> {
        let pid = task.pid;
        let meta = self.meta_cap(pid)?;
        let heap_at = cursor(&meta, meta.base() + META_HEAP_SLOT * GRANULE)?;
        let heap = self.load_cap(pid, &heap_at)?;
        let size = bytes.div_ceil(GRANULE) * GRANULE;
        let slots = meta.length() / GRANULE - META_FIRST_CHUNK;
        let fits = heap
            .cursor()
            .checked_add(size)
            .is_some_and(|end| end <= heap.top());
        if task.next_slot >= slots || !fits || !heap.is_tagged() {
            return Ok(None);
        }
        let chunk = heap
            .derive(heap.cursor(), size)
            .map_err(|_| FaultKind::CapTagFault)?;
        let chunk_at = cursor(
            &meta,
            meta.base() + (META_FIRST_CHUNK + task.next_slot) * GRANULE,
        )?;
        self.mem(pid, &chunk_at, Access::CapStore(chunk))?;
        let bumped = cursor(&heap, heap.cursor() + size)?;
        self.mem(pid, &heap_at, Access::CapStore(bumped))?;
        task.symbols.insert(name.to_string(), task.next_slot);
        task.next_slot += 1;
        Ok(Some(chunk))
    }

    /// Execute one statement of `task`. New child tasks are appended to `spawned`.
    fn step(&mut self, task: &mut Task, spawned: &mut Vec<Task>) -> Flow {
        let pid = task.pid;
        if let Some((label, child)) = task.join.clone() {
            return match self
                .sys
                .syscall(pid, Syscall::Wait, SyscallArgs::WaitPid(child))
            {
                Ok(SyscallRet::WouldBlock) => Flow::Block,
                Ok(SyscallRet::Reaped { pid: c, code }) => {
                    task.join = None;
                    let out = format!("reaped({c},{code})");
                    task.last = Some(out.clone());
                    self.record(pid, format!("join {label}"), out);
                    Flow::Next
                }
                other => {
                    task.join = None;
                    let out = match other {
                        Err(e) => gateway_outcome(e),
                        Ok(r) => format!("{r:?}"),
                    };
                    self.record(pid, format!("join {label}"), out);
                    Flow::Next
                }
            };
        }
        let Some(stmt) = task.stmts.get(task.pc).cloned() else {
            self.exit(pid, 0);
            return Flow::Done;
        };

        let result: Result<(String, Flow), FaultKind> = (|| {
            let ok = |s: String| Ok((s, Flow::Next));
            match &stmt {
                Stmt::Alloc { name, bytes } => match self.alloc(task, name, *bytes)? {
                    Some(c) => ok(self.render(pid, &c)),
                    None => {
                        self.exit(pid, ENOMEM_EXIT_CODE);
                        Ok(("ENOMEM".to_string(), Flow::Done))
                    }
                },
                Stmt::StoreInt { loc, value } => {
                    let at = self.resolve(task, loc)?;
                    self.mem(pid, &at, Access::Write(&value.to_le_bytes()))?;
                    ok("ok".into())
                }
                Stmt::LoadInt { loc } => {
                    let at = self.resolve(task, loc)?;
                    let v = self.mem(pid, &at, Access::Read { len: 8 })?;
                    ok(v.as_u64().expect("8-byte read").to_string())
                }
                Stmt::StoreRef { loc, target } => {
                    let value = self.resolve(task, target)?;
                    let at = self.resolve(task, loc)?;
                    self.mem(pid, &at, Access::CapStore(value))?;
                    ok("ok".into())
                }
                Stmt::LoadRef { loc } => {
                    let at = self.resolve(task, loc)?;
                    let c = self.load_cap(pid, &at)?;
                    self.sys.set_register(pid, 0, RegisterValue::Cap(c));
                    ok(self.render(pid, &c))
                }
                Stmt::Deref { off } => {
                    let reg = self.sys.process(pid).expect("running").registers.gpr[0];
                    let RegisterValue::Cap(c) = reg else {
                        return Err(FaultKind::CapTagFault);
                    };
                    let at = cursor(&c, c.cursor().wrapping_add(*off))?;
                    let v = self.mem(pid, &at, Access::Read { len: 8 })?;
                    ok(v.as_u64().expect("8-byte read").to_string())
                }
                Stmt::Fork {
                    label,
                    nowait,
                    body,
                } => {
                    match self.sys.syscall(pid, Syscall::Fork, SyscallArgs::None) {
                        Ok(SyscallRet::Value(child)) => {
                            let child = Pid(child as u32);
                            self.trace.push(pid, stmt.head(), child.to_string());
                            (self.observer)(&self.sys, self.trace.last().expect("pushed"));
                            self.record(child, stmt.head(), "0".into());
                            spawned.push(Task {
                                pid: child,
                                stmts: Rc::new(body.clone()),
                                pc: 0,
                                symbols: task.symbols.clone(),
                                next_slot: task.next_slot,
                                last: Some("0".into()),
                                join: None,
                            });
                            if !nowait {
                                task.join = Some((label.clone(), child));
                            }
                            task.last = Some(child.to_string());
                            // Both entries are already in the trace.
                            Ok((String::new(), Flow::Next))
                        }
                        Ok(other) => ok(format!("{other:?}")),
                        Err(e) => ok(gateway_outcome(e)),
                    }
                }
                Stmt::Exit { code } => {
                    self.exit(pid, *code);
                    Ok((format!("exited({code})"), Flow::Done))
                }
                Stmt::Wait => match self.sys.syscall(pid, Syscall::Wait, SyscallArgs::None) {
                    Ok(SyscallRet::WouldBlock) => Ok((String::new(), Flow::Block)),
                    Ok(SyscallRet::Reaped { pid: c, code }) => ok(format!("reaped({c},{code})")),
                    Ok(other) => ok(format!("{other:?}")),
                    Err(e) => ok(gateway_outcome(e)),
                },
                Stmt::Getpid => ok(self.simple(pid, Syscall::Getpid, SyscallArgs::None)),
                Stmt::Open { path } => {
                    ok(self.simple(pid, Syscall::Open, SyscallArgs::Open(path.clone())))
                }
                Stmt::Pipe => ok(self.simple(pid, Syscall::Pipe, SyscallArgs::None)),
                Stmt::Close { fd } => {
                    let out = self.simple(pid, Syscall::Close, SyscallArgs::Close(*fd));
                    ok(if out == "0" { "ok".into() } else { out })
                }
                Stmt::Read { fd, loc, len } | Stmt::Write { fd, loc, len } => {
                    let buf = self.resolve(task, loc)?;
                    let call = if matches!(stmt, Stmt::Read { .. }) {
                        Syscall::Read
                    } else {
                        Syscall::Write
                    };
                    let args = SyscallArgs::Io {
                        fd: *fd,
                        buf,
                        len: *len as usize,
                    };
                    ok(self.simple(pid, call, args))
                }
                Stmt::Brk { incr } => ok(self.simple(pid, Syscall::Brk, SyscallArgs::Brk(*incr))),
                Stmt::Yield => {
                    self.simple(pid, Syscall::Yield, SyscallArgs::None);
                    Ok(("ok".into(), Flow::Yield))
                }
                Stmt::Priv => match self.sys.attempt_privileged(pid) {
                    Ok(()) => ok("ok".into()),
                    Err(f) => Err(f.kind),
                },
                Stmt::Expect { text } => {
                    let got = task.last.clone().unwrap_or_default();
                    if got == *text {
                        ok("pass".into())
                    } else {
                        self.assertion_failures
                            .push(format!("pid {pid}: expected `{text}`, got `{got}`"));
                        ok(format!("FAIL({got})"))
                    }
                }
                Stmt::Toctou { loc, len, byte } => {
                    let buf = self.resolve(task, loc)?;
                    let fill = vec![*byte; *len as usize];
                    let mut hook = |s: &mut System, p: Pid| {
                        let _ = s.access(p, &buf, Access::Write(&fill));
                    };
                    ok(
                        match self.sys.toctou_probe(pid, &buf, *len as usize, &mut hook) {
                            Ok(v) => v.to_string(),
                            Err(e) => e.to_string(),
                        },
                    )
                }
                Stmt::Kjump => {
                    let pcc = self.sys.process(pid).expect("running").registers.pcc_cap();
                    let target = cursor(&pcc, self.sys.kernel().code.base())?;
                    self.mem(pid, &target, Access::Exec)?;
                    ok("ok".into())
                }
                Stmt::Kload { syscall } => {
                    let s = Syscall::from_name(syscall).expect("checked by the parser");
                    let entry = self.sys.process(pid).expect("running").registers.entries[&s];
                    let c = self.load_cap(pid, &entry)?;
                    ok(self.render(pid, &c))
                }
            }
        })();

        match result {
            Ok((_, Flow::Block)) => Flow::Block,
            Ok((out, flow)) => {
                task.pc += 1;
                if !matches!(stmt, Stmt::Fork { .. }) {
                    if !matches!(stmt, Stmt::Expect { .. }) {
                        task.last = Some(out.clone());
                    }
                    self.record(pid, stmt.head(), out);
                }
                flow
            }
            Err(kind) => {
                let out = format!("fault:{}", kind.name());
                self.trace.push(pid, stmt.head(), out);
                self.kill(pid, kind);
                (self.observer)(&self.sys, self.trace.last().expect("pushed"));
                Flow::Done
            }
        }
    }

    /// Syscalls whose result is a single number or fd pair.
    fn simple(&mut self, pid: Pid, call: Syscall, args: SyscallArgs) -> String {
        match self.sys.syscall(pid, call, args) {
            Ok(SyscallRet::Value(v)) => v.to_string(),
            Ok(SyscallRet::Pair(r, w)) => format!("fds({r},{w})"),
            Ok(other) => format!("{other:?}"),
            Err(e) => gateway_outcome(e),
        }
    }
}

/// Run a script to completion.
pub fn run(script: &Script, cfg: &RunConfig) -> Result<RunOutcome, RunError> {
    run_observed(script, cfg, &mut |_, _| {})
}

/// Run a script, calling `observer` after every trace entry.
pub fn run_observed(
    script: &Script,
    cfg: &RunConfig,
    observer: &mut dyn FnMut(&System, &TraceEntry),
) -> Result<RunOutcome, RunError> {
    let mut sys = System::boot(SystemConfig {
        strategy: cfg.strategy,
        isolation: cfg.isolation,
        arm_audit: true,
        debug_checks: cfg.debug_checks,
        ..SystemConfig::default()
    });
    let root = sys.create_initial_process(&script.layout_spec())?;
    let mut it = Interp {
        sys,
        trace: Trace::default(),
        audit: AuditReport::default(),
        assertion_failures: Vec::new(),
        exit_codes: BTreeMap::new(),
        audit_every_step: cfg.audit_every_step,
        observer,
    };
    let mut tasks: BTreeMap<Pid, Task> = BTreeMap::new();
    tasks.insert(
        root,
        Task {
            pid: root,
            stmts: Rc::new(script.stmts.clone()),
            pc: 0,
            symbols: BTreeMap::new(),
            next_slot: 0,
            last: None,
            join: None,
        },
    );
    let mut queue = VecDeque::from([root]);
    let mut steps = 0u64;
    let mut spawned = Vec::new();
    while let Some(pid) = queue.pop_front() {
        let mut task = tasks.remove(&pid).expect("queued task");
        let done = loop {
            steps += 1;
            if steps > cfg.max_steps {
                return Err(RunError::StepLimit(cfg.max_steps));
            }
            let flow = it.step(&mut task, &mut spawned);
            for child in spawned.drain(..) {
                queue.push_back(child.pid);
                tasks.insert(child.pid, child);
            }
            match flow {
                Flow::Next => continue,
                Flow::Yield | Flow::Block => break false,
                Flow::Done => break true,
            }
        };
        if !done {
            tasks.insert(pid, task);
            queue.push_back(pid);
        }
    }

    let report = it.sys.snapshot(None).expect("all pids");
    Ok(RunOutcome {
        trace: it.trace,
        report,
        audit: it.audit,
        assertion_failures: it.assertion_failures,
        copy_events: it.sys.metrics().events().to_vec(),
        violations: it.sys.violations().to_vec(),
        exit_codes: it.exit_codes,
    })
}
