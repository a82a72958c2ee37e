use std::fmt;

use sha2::{Digest, Sha256};

use crate::capability::{Capability, Region};
use crate::uprocess::Pid;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub pid: Pid,
    pub stmt: String,
    pub outcome: String,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {} -> {}", self.pid, self.stmt, self.outcome)
    }
}

/// Ordered record of what each statement produced.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn push(&mut self, pid: Pid, stmt: impl Into<String>, outcome: impl Into<String>) {
        self.entries.push(TraceEntry {
            pid,
            stmt: stmt.into(),
            outcome: outcome.into(),
        });
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn last(&self) -> Option<&TraceEntry> {
        self.entries.last()
    }

    /// Outcomes of one pid in order.
    pub fn outcomes_of(&self, pid: Pid) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(move |e| e.pid == pid)
            .map(|e| e.outcome.as_str())
    }

    /// SHA-256 over the rendered lines, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.to_string().as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{e}")?;
        }
        Ok(())
    }
}

/// Render a capability relative to the region of the process holding it.
///
/// Tagged values inside the region show as `ref(+OFFSET/LENGTH)`; tagged
/// values elsewhere show the absolute cursor, `ref(@ADDR/LENGTH)`.
pub fn render_cap(cap: &Capability, own: &Region) -> String {
    if !cap.is_tagged() {
        return format!("untagged({:#x})", cap.cursor());
    }
    if own.contains(cap.cursor()) || cap.cursor() == own.end() {
        format!("ref(+{:#x}/{})", cap.cursor() - own.base(), cap.length())
    } else {
        format!("ref(@{:#x}/{})", cap.cursor(), cap.length())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capability::Perms;

    #[test]
    fn hash_is_stable_and_order_sensitive() {
        let mut a = Trace::default();
        a.push(Pid(1), "getpid", "1");
        a.push(Pid(2), "getpid", "2");
        let mut b = Trace::default();
        b.push(Pid(2), "getpid", "2");
        b.push(Pid(1), "getpid", "1");
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn caps_render_relative_to_owner() {
        let r = Region::new(0x1000_0000, 0x10000).unwrap();
        let c = Capability::new_root(0x1000_2000, 64, Perms::DATA);
        assert_eq!(render_cap(&c, &r), "ref(+0x2000/64)");
        assert_eq!(render_cap(&c.cleared(), &r), "untagged(0x10002000)");
        let far = Capability::new_root(0x2000_0000, 16, Perms::DATA);
        assert_eq!(render_cap(&far, &r), "ref(@0x20000000/16)");
    }
}
