//! Copy, scan, fault and memory counters, plus the reports built from them.

use std::collections::BTreeMap;
use std::fmt;

use num_rational::Ratio;
use serde::Serialize;
use thiserror::Error;

use crate::address_space::{Fault, FaultKind};
use crate::fork_engine::{CopyCause, CopyEvent, ForkStrategy};
use crate::kernel_gateway::IsolationLevel;
use crate::system::System;
use crate::tagged_memory::{ScanOutcome, GRANULES_PER_PAGE};
use crate::uprocess::{Pid, KERNEL_PID};

/// Proportional resident set in bytes. Kept as an exact fraction so that
/// contributions of a shared frame always add back up to one page.
pub type Prs = Ratio<u64>;

pub fn format_prs(p: &Prs) -> String {
    if p.is_integer() {
        p.to_integer().to_string()
    } else {
        format!("{}/{}", p.numer(), p.denom())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PidCounters {
    pub parent: Option<Pid>,
    pub eager_pages_copied: u64,
    pub lazy_copies: BTreeMap<CopyCause, u64>,
    pub in_place_relocations: u64,
    pub granules_scanned: u64,
    pub caps_relocated: u64,
    pub caps_invalidated: u64,
    pub faults: BTreeMap<FaultKind, u64>,
    pub forks: u64,
    pub fork_cost: u64,
    pub prs_at_exit: Option<Prs>,
}

/// Counters owned by the simulator core.
#[derive(Debug, Clone, Default)]
pub struct Metrics {
    pids: BTreeMap<Pid, PidCounters>,
    events: Vec<CopyEvent>,
}

impl Metrics {
    pub fn register(&mut self, pid: Pid) {
        self.pids.entry(pid).or_default();
    }

    pub(crate) fn set_parent(&mut self, pid: Pid, parent: Pid) {
        self.pids.entry(pid).or_default().parent = Some(parent);
    }

    fn at(&mut self, pid: Pid) -> &mut PidCounters {
        self.pids.entry(pid).or_default()
    }

    pub fn record_fault(&mut self, fault: &Fault) {
        *self.at(fault.pid).faults.entry(fault.kind).or_default() += 1;
    }

    pub(crate) fn record_copy(&mut self, event: CopyEvent) {
        let c = self.at(event.pid);
        if event.cause.is_eager() {
            c.eager_pages_copied += 1;
        } else if event.copied {
            *c.lazy_copies.entry(event.cause).or_default() += 1;
        } else {
            c.in_place_relocations += 1;
        }
        self.events.push(event);
    }

    pub(crate) fn record_scan(&mut self, pid: Pid, outcome: &ScanOutcome) {
        let c = self.at(pid);
        c.granules_scanned += GRANULES_PER_PAGE as u64;
        c.caps_relocated += outcome.relocated as u64;
        c.caps_invalidated += outcome.invalidated as u64;
    }

    pub(crate) fn record_fork(&mut self, pid: Pid, cost: u64) {
        let c = self.at(pid);
        c.forks += 1;
        c.fork_cost += cost;
    }

    pub(crate) fn record_exit(&mut self, pid: Pid, prs: Prs) {
        self.at(pid).prs_at_exit = Some(prs);
    }

    pub fn counters(&self, pid: Pid) -> Option<&PidCounters> {
        self.pids.get(&pid)
    }

    /// Every page made private, in order.
    pub fn events(&self) -> &[CopyEvent] {
        &self.events
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PidReport {
    pub pid: Pid,
    pub parent: Option<Pid>,
    pub running: bool,
    pub eager_pages_copied: u64,
    pub lazy_write_fault: u64,
    pub lazy_access_fault: u64,
    pub lazy_cap_load_fault: u64,
    pub in_place_relocations: u64,
    pub granules_scanned: u64,
    pub caps_relocated: u64,
    pub caps_invalidated: u64,
    pub faults: BTreeMap<FaultKind, u64>,
    pub forks: u64,
    pub fork_cost: u64,
    pub prs_bytes: Prs,
    pub prs_at_exit: Option<Prs>,
}

impl PidReport {
    pub fn lazy_pages_copied(&self) -> u64 {
        self.lazy_write_fault + self.lazy_access_fault + self.lazy_cap_load_fault
    }

    pub fn pages_copied(&self) -> u64 {
        self.eager_pages_copied + self.lazy_pages_copied()
    }

    pub fn fault_count(&self, kind: FaultKind) -> u64 {
        self.faults.get(&kind).copied().unwrap_or(0)
    }

    pub fn faults_total(&self) -> u64 {
        self.faults.values().sum()
    }

    /// Current resident share, or the share held at exit for exited pids.
    pub fn final_prs(&self) -> Prs {
        self.prs_at_exit.unwrap_or(self.prs_bytes)
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("pid", self.pid.to_string()),
            (
                "parent",
                self.parent.map_or("-".to_string(), |p| p.to_string()),
            ),
            (
                "status",
                if self.running { "running" } else { "exited" }.to_string(),
            ),
            ("eager_pages_copied", self.eager_pages_copied.to_string()),
            ("lazy_pages_copied", self.lazy_pages_copied().to_string()),
            ("lazy_write_fault", self.lazy_write_fault.to_string()),
            ("lazy_access_fault", self.lazy_access_fault.to_string()),
            ("lazy_cap_load_fault", self.lazy_cap_load_fault.to_string()),
            (
                "in_place_relocations",
                self.in_place_relocations.to_string(),
            ),
            ("granules_scanned", self.granules_scanned.to_string()),
            ("caps_relocated", self.caps_relocated.to_string()),
            ("caps_invalidated", self.caps_invalidated.to_string()),
            ("forks", self.forks.to_string()),
            ("fork_cost", self.fork_cost.to_string()),
            ("prs_bytes", format_prs(&self.prs_bytes)),
            (
                "prs_at_exit_bytes",
                self.prs_at_exit
                    .as_ref()
                    .map_or("-".to_string(), format_prs),
            ),
        ];
        for k in FaultKind::ALL {
            out.push((fault_field(k), self.fault_count(k).to_string()));
        }
        out
    }
}

fn fault_field(k: FaultKind) -> &'static str {
    match k {
        FaultKind::CapTagFault => "fault_cap_tag",
        FaultKind::CapSealedFault => "fault_cap_sealed",
        FaultKind::CapBoundsFault => "fault_cap_bounds",
        FaultKind::CapPermFault => "fault_cap_perm",
        FaultKind::CapAlignFault => "fault_cap_align",
        FaultKind::PageWriteFault => "fault_page_write",
        FaultKind::PageAccessFault => "fault_page_access",
        FaultKind::CapLoadFault => "fault_cap_load",
        FaultKind::PrivilegeFault => "fault_privilege",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("unknown pid {0}")]
    UnknownPid(Pid),
    #[error("scripts differ between strategies ({0} vs {1})")]
    MismatchedScripts(String, String),
    #[error("csv output failed: {0}")]
    Csv(String),
}

/// Immutable view of the counters plus a fresh refcount sweep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricsReport {
    pub strategy: ForkStrategy,
    pub isolation: IsolationLevel,
    pub pids: Vec<PidReport>,
    pub kernel_prs_bytes: Prs,
    pub total_frame_bytes: u64,
    pub peak_frame_bytes: u64,
}

impl MetricsReport {
    pub fn pid(&self, pid: Pid) -> Option<&PidReport> {
        self.pids.iter().find(|p| p.pid == pid)
    }

    pub fn total_pages_copied(&self) -> u64 {
        self.pids.iter().map(PidReport::pages_copied).sum()
    }

    pub fn total_eager(&self) -> u64 {
        self.pids.iter().map(|p| p.eager_pages_copied).sum()
    }

    pub fn total_faults(&self, kind: FaultKind) -> u64 {
        self.pids.iter().map(|p| p.fault_count(kind)).sum()
    }

    /// Resident share of every μprocess that has a parent, taken at exit.
    pub fn child_prs(&self) -> Prs {
        self.pids
            .iter()
            .filter(|p| p.parent.is_some())
            .map(PidReport::final_prs)
            .sum()
    }

    /// Sum of the live resident shares of every μprocess and the kernel.
    pub fn live_prs(&self) -> Prs {
        self.pids.iter().map(|p| p.prs_bytes).sum::<Prs>() + self.kernel_prs_bytes
    }

    /// `key=value` text, a header block followed by one line per pid.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("strategy={}\n", self.strategy));
        s.push_str(&format!("isolation={}\n", self.isolation));
        s.push_str(&format!("total_frame_bytes={}\n", self.total_frame_bytes));
        s.push_str(&format!("peak_frame_bytes={}\n", self.peak_frame_bytes));
        s.push_str(&format!(
            "kernel_prs_bytes={}\n",
            format_prs(&self.kernel_prs_bytes)
        ));
        s.push_str(&format!(
            "total_pages_copied={}\n",
            self.total_pages_copied()
        ));
        for p in &self.pids {
            let line: Vec<String> = p
                .fields()
                .into_iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    /// One CSV row per pid.
    pub fn to_csv(&self) -> Result<String, MetricsError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.pids {
            w.serialize(CsvRow::new(self, p))
                .map_err(|e| MetricsError::Csv(e.to_string()))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| MetricsError::Csv(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv writes utf-8"))
    }
}

#[derive(Serialize)]
struct CsvRow {
    strategy: &'static str,
    isolation: &'static str,
    pid: u32,
    parent: String,
    status: &'static str,
    eager_pages_copied: u64,
    lazy_pages_copied: u64,
    lazy_write_fault: u64,
    lazy_access_fault: u64,
    lazy_cap_load_fault: u64,
    in_place_relocations: u64,
    granules_scanned: u64,
    caps_relocated: u64,
    caps_invalidated: u64,
    forks: u64,
    fork_cost: u64,
    prs_bytes: String,
    prs_at_exit_bytes: String,
    fault_cap_tag: u64,
    fault_cap_sealed: u64,
    fault_cap_bounds: u64,
    fault_cap_perm: u64,
    fault_cap_align: u64,
    fault_page_write: u64,
    fault_page_access: u64,
    fault_cap_load: u64,
    fault_privilege: u64,
}

impl CsvRow {
    fn new(r: &MetricsReport, p: &PidReport) -> CsvRow {
        let f = |k| p.fault_count(k);
        CsvRow {
            strategy: r.strategy.name(),
            isolation: r.isolation.name(),
            pid: p.pid.0,
            parent: p.parent.map_or(String::new(), |x| x.to_string()),
            status: if p.running { "running" } else { "exited" },
            eager_pages_copied: p.eager_pages_copied,
            lazy_pages_copied: p.lazy_pages_copied(),
            lazy_write_fault: p.lazy_write_fault,
            lazy_access_fault: p.lazy_access_fault,
            lazy_cap_load_fault: p.lazy_cap_load_fault,
            in_place_relocations: p.in_place_relocations,
            granules_scanned: p.granules_scanned,
            caps_relocated: p.caps_relocated,
            caps_invalidated: p.caps_invalidated,
            forks: p.forks,
            fork_cost: p.fork_cost,
            prs_bytes: format_prs(&p.prs_bytes),
            prs_at_exit_bytes: p.prs_at_exit.as_ref().map_or(String::new(), format_prs),
            fault_cap_tag: f(FaultKind::CapTagFault),
            fault_cap_sealed: f(FaultKind::CapSealedFault),
            fault_cap_bounds: f(FaultKind::CapBoundsFault),
            fault_cap_perm: f(FaultKind::CapPermFault),
            fault_cap_align: f(FaultKind::CapAlignFault),
            fault_page_write: f(FaultKind::PageWriteFault),
            fault_page_access: f(FaultKind::PageAccessFault),
            fault_cap_load: f(FaultKind::CapLoadFault),
            fault_privilege: f(FaultKind::PrivilegeFault),
        }
    }
}

impl System {
    /// Report for one pid, or for every pid the system has seen.
    pub fn snapshot(&self, pid: Option<Pid>) -> Result<MetricsReport, MetricsError> {
        let selected: Vec<(&Pid, &PidCounters)> = match pid {
            Some(p) => {
                let c = self
                    .metrics
                    .pids
                    .get_key_value(&p)
                    .ok_or(MetricsError::UnknownPid(p))?;
                vec![c]
            }
            None => self.metrics.pids.iter().collect(),
        };
        let pids = selected
            .into_iter()
            .map(|(pid, c)| {
                let lazy = |cause| c.lazy_copies.get(&cause).copied().unwrap_or(0);
                PidReport {
                    pid: *pid,
                    parent: c.parent,
                    running: self
                        .process(*pid)
                        .is_some_and(|p| p.status == crate::uprocess::ProcessStatus::Running),
                    eager_pages_copied: c.eager_pages_copied,
                    lazy_write_fault: lazy(CopyCause::WriteFault),
                    lazy_access_fault: lazy(CopyCause::AccessFault),
                    lazy_cap_load_fault: lazy(CopyCause::CapLoadFault),
                    in_place_relocations: c.in_place_relocations,
                    granules_scanned: c.granules_scanned,
                    caps_relocated: c.caps_relocated,
                    caps_invalidated: c.caps_invalidated,
                    faults: c.faults.clone(),
                    forks: c.forks,
                    fork_cost: c.fork_cost,
                    prs_bytes: self.prs_of(*pid),
                    prs_at_exit: c.prs_at_exit,
                }
            })
            .collect();
        Ok(MetricsReport {
            strategy: self.config.strategy,
            isolation: self.config.isolation,
            pids,
            kernel_prs_bytes: self.prs_of(KERNEL_PID),
            total_frame_bytes: self.mem.frames().total_bytes(),
            peak_frame_bytes: self.mem.peak_frame_bytes(),
        })
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }
}

/// One strategy's run of a script, as fed to `compare`.
#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub trace_hash: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComparisonRow {
    pub strategy: ForkStrategy,
    pub pages_copied: u64,
    pub eager_pages_copied: u64,
    pub peak_frame_bytes: u64,
    pub child_prs_bytes: Prs,
    pub fork_cost: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub metric: &'static str,
    pub lower: ForkStrategy,
    pub higher: ForkStrategy,
    pub holds: bool,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} <= {} {}",
            self.metric,
            self.lower,
            self.higher,
            if self.holds { "ok" } else { "VIOLATED" }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub verdicts: Vec<Verdict>,
}

impl Comparison {
    pub fn dominance_holds(&self) -> bool {
        self.verdicts.iter().all(|v| v.holds)
    }

    pub fn row(&self, s: ForkStrategy) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.strategy == s)
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<11} {:>12} {:>8} {:>16} {:>16} {:>10}",
            "strategy", "pages_copied", "eager", "peak_frame_bytes", "child_prs_bytes", "fork_cost"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<11} {:>12} {:>8} {:>16} {:>16} {:>10}",
                r.strategy.name(),
                r.pages_copied,
                r.eager_pages_copied,
                r.peak_frame_bytes,
                format_prs(&r.child_prs_bytes),
                r.fork_cost
            )?;
        }
        for v in &self.verdicts {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Tabulate runs of one script under several strategies and check
/// CoPA <= CoA <= FullCopy on copies, peak memory and child resident set.
pub fn compare(runs: &[StrategyRun]) -> Result<Comparison, MetricsError> {
    let mut reference: Option<&StrategyRun> = None;
    for run in runs
        .iter()
        .filter(|r| r.report.strategy != ForkStrategy::UnsafeCoW)
    {
        match reference {
            Some(first) if first.trace_hash != run.trace_hash => {
                return Err(MetricsError::MismatchedScripts(
                    first.trace_hash.clone(),
                    run.trace_hash.clone(),
                ));
            }
            None => reference = Some(run),
            _ => {}
        }
    }
    let rows: Vec<ComparisonRow> = runs
        .iter()
        .map(|r| ComparisonRow {
            strategy: r.report.strategy,
            pages_copied: r.report.total_pages_copied(),
            eager_pages_copied: r.report.total_eager(),
            peak_frame_bytes: r.report.peak_frame_bytes,
            child_prs_bytes: r.report.child_prs(),
            fork_cost: r.report.pids.iter().map(|p| p.fork_cost).sum(),
        })
        .collect();
    let order = [
        ForkStrategy::CoPA,
        ForkStrategy::CoA,
        ForkStrategy::FullCopy,
    ];
    let present: Vec<&ComparisonRow> = order
        .iter()
        .filter_map(|s| rows.iter().find(|r| r.strategy == *s))
        .collect();
    let mut verdicts = Vec::new();
    for pair in present.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        let mut push = |metric, holds| {
            verdicts.push(Verdict {
                metric,
                lower: lo.strategy,
                higher: hi.strategy,
                holds,
            })
        };
        push("pages_copied", lo.pages_copied <= hi.pages_copied);
        push(
            "peak_frame_bytes",
            lo.peak_frame_bytes <= hi.peak_frame_bytes,
        );
        push("child_prs_bytes", lo.child_prs_bytes <= hi.child_prs_bytes);
    }
    Ok(Comparison { rows, verdicts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::address_space::Access;
    use crate::capability::{Capability, Perms};
    use crate::system::SystemConfig;
    use crate::tagged_memory::PAGE_SIZE;
    use crate::uprocess::LayoutSpec;

    fn boot() -> (System, Pid) {
        let mut sys = System::boot(SystemConfig::default());
        let pid = sys.create_initial_process(&LayoutSpec::default()).unwrap();
        (sys, pid)
    }

    #[test]
    fn lone_process_prs_is_its_page_count() {
        let (sys, pid) = boot();
        let r = sys.snapshot(Some(pid)).unwrap();
        assert_eq!(r.pids[0].prs_bytes, Prs::from_integer(10 * PAGE_SIZE));
        assert_eq!(
            sys.snapshot(Some(Pid(99))),
            Err(MetricsError::UnknownPid(Pid(99)))
        );
    }

    #[test]
    fn shared_frames_split_evenly() {
        let (mut sys, parent) = boot();
        let child = sys.fork(parent, ForkStrategy::CoPA).unwrap();
        let r = sys.snapshot(None).unwrap();
        let want = Prs::from_integer(2 * PAGE_SIZE + 8 * PAGE_SIZE / 2);
        assert_eq!(r.pid(parent).unwrap().prs_bytes, want);
        assert_eq!(r.pid(child).unwrap().prs_bytes, want);
        assert_eq!(r.live_prs(), Prs::from_integer(r.total_frame_bytes));

        // three child writes to shared heap pages
        let heap = sys.process(child).unwrap().layout.heap;
        for i in 0..3 {
            let c = Capability::new_root(heap.base() + i * PAGE_SIZE, 8, Perms::DATA);
            sys.access(child, &c, Access::Write(&[1])).unwrap();
        }
        let r = sys.snapshot(Some(child)).unwrap();
        assert_eq!(
            r.pids[0].prs_bytes,
            Prs::from_integer(5 * PAGE_SIZE + 5 * PAGE_SIZE / 2)
        );
        assert_eq!(r.pids[0].lazy_write_fault, 3);
        let all = sys.snapshot(None).unwrap();
        assert_eq!(all.live_prs(), Prs::from_integer(all.total_frame_bytes));
    }

    #[test]
    fn three_way_share_is_exact() {
        let (mut sys, parent) = boot();
        sys.fork(parent, ForkStrategy::CoPA).unwrap();
        sys.fork(parent, ForkStrategy::CoPA).unwrap();
        let r = sys.snapshot(None).unwrap();
        assert!(!r.pids[0].prs_bytes.is_integer());
        assert_eq!(r.live_prs(), Prs::from_integer(r.total_frame_bytes));
    }

    #[test]
    fn text_and_csv_carry_the_same_pids() {
        let (mut sys, parent) = boot();
        sys.fork(parent, ForkStrategy::CoPA).unwrap();
        let r = sys.snapshot(None).unwrap();
        let text = r.to_text();
        assert!(text.contains("strategy=copa"));
        assert_eq!(text.lines().filter(|l| l.starts_with("pid=")).count(), 2);
        let csv = r.to_csv().unwrap();
        let mut rd = csv::Reader::from_reader(csv.as_bytes());
        assert_eq!(rd.records().count(), 2);
    }

    fn run_of(strategy: ForkStrategy, hash: &str, copies: u64) -> StrategyRun {
        let (mut sys, parent) = boot();
        sys.config = SystemConfig {
            strategy,
            ..SystemConfig::default()
        };
        let child = sys.fork(parent, ForkStrategy::CoPA).unwrap();
        let mut report = sys.snapshot(None).unwrap();
        report
            .pids
            .iter_mut()
            .find(|p| p.pid == child)
            .unwrap()
            .eager_pages_copied = copies;
        StrategyRun {
            trace_hash: hash.to_string(),
            report,
        }
    }

    #[test]
    fn compare_checks_order_and_hashes() {
        let ok = compare(&[
            run_of(ForkStrategy::FullCopy, "h", 10),
            run_of(ForkStrategy::CoA, "h", 5),
            run_of(ForkStrategy::CoPA, "h", 2),
        ])
        .unwrap();
        assert!(ok.verdicts.iter().any(|v| v.metric == "pages_copied"));
        assert!(ok
            .verdicts
            .iter()
            .filter(|v| v.metric == "pages_copied")
            .all(|v| v.holds));

        let bad = compare(&[
            run_of(ForkStrategy::CoA, "h", 1),
            run_of(ForkStrategy::CoPA, "h", 9),
        ])
        .unwrap();
        assert!(!bad.dominance_holds());

        assert!(matches!(
            compare(&[
                run_of(ForkStrategy::CoA, "a", 1),
                run_of(ForkStrategy::CoPA, "b", 1)
            ]),
            Err(MetricsError::MismatchedScripts(..))
        ));
        // unsafe rows are exempt from the hash check
        assert!(compare(&[
            run_of(ForkStrategy::CoPA, "a", 1),
            run_of(ForkStrategy::UnsafeCoW, "b", 1)
        ])
        .is_ok());
    }
}
