use std::fmt;

use crate::uprocess::LayoutSpec;

/// A symbolic address: an allocation name plus a byte offset.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Loc {
    pub name: String,
    pub off: u64,
}

impl Loc {
    pub fn new(name: impl Into<String>, off: u64) -> Loc {
        Loc {
            name: name.into(),
            off,
        }
    }
}

impl fmt::Display for Loc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.name, self.off)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stmt {
    Alloc {
        name: String,
        bytes: u64,
    },
    StoreInt {
        loc: Loc,
        value: u64,
    },
    LoadInt {
        loc: Loc,
    },
    StoreRef {
        loc: Loc,
        target: Loc,
    },
    LoadRef {
        loc: Loc,
    },
    /// Read 8 bytes through the last loaded reference, `off` bytes past its cursor.
    Deref {
        off: u64,
    },
    Fork {
        label: String,
        nowait: bool,
        body: Vec<Stmt>,
    },
    Exit {
        code: i32,
    },
    Wait,
    Getpid,
    Open {
        path: String,
    },
    Pipe,
    Close {
        fd: i32,
    },
    Read {
        fd: i32,
        loc: Loc,
        len: u64,
    },
    Write {
        fd: i32,
        loc: Loc,
        len: u64,
    },
    Brk {
        incr: i64,
    },
    Yield,
    Priv,
    Expect {
        text: String,
    },
    Toctou {
        loc: Loc,
        len: u64,
        byte: u8,
    },
    /// Point the program counter at kernel code and execute.
    Kjump,
    /// Load through a sealed syscall entry as if it were data.
    Kload {
        syscall: String,
    },
}

impl Stmt {
    /// The statement as it appears in a trace: one line, no child block.
    pub fn head(&self) -> String {
        match self {
            Stmt::Fork { label, nowait, .. } => {
                if *nowait {
                    format!("fork {label} nowait")
                } else {
                    format!("fork {label}")
                }
            }
            other => {
                let mut s = String::new();
                other.write(&mut s, 0).expect("string write");
                s.trim_end().to_string()
            }
        }
    }

    fn write(&self, f: &mut impl fmt::Write, depth: usize) -> fmt::Result {
        let pad = "  ".repeat(depth);
        write!(f, "{pad}")?;
        match self {
            Stmt::Alloc { name, bytes } => writeln!(f, "alloc {name} {bytes}"),
            Stmt::StoreInt { loc, value } => writeln!(f, "store_int {loc} {value}"),
            Stmt::LoadInt { loc } => writeln!(f, "load_int {loc}"),
            Stmt::StoreRef { loc, target } => writeln!(f, "store_ref {loc} {target}"),
            Stmt::LoadRef { loc } => writeln!(f, "load_ref {loc}"),
            Stmt::Deref { off } => writeln!(f, "deref {off}"),
            Stmt::Fork {
                label,
                nowait,
                body,
            } => {
                write!(f, "fork {label}")?;
                if *nowait {
                    write!(f, " nowait")?;
                }
                writeln!(f, " {{")?;
                for s in body {
                    s.write(f, depth + 1)?;
                }
                writeln!(f, "{pad}}}")
            }
            Stmt::Exit { code } => writeln!(f, "exit {code}"),
            Stmt::Wait => writeln!(f, "wait"),
            Stmt::Getpid => writeln!(f, "getpid"),
            Stmt::Open { path } => writeln!(f, "open {path}"),
            Stmt::Pipe => writeln!(f, "pipe"),
            Stmt::Close { fd } => writeln!(f, "close {fd}"),
            Stmt::Read { fd, loc, len } => writeln!(f, "read {fd} {loc} {len}"),
            Stmt::Write { fd, loc, len } => writeln!(f, "write {fd} {loc} {len}"),
            Stmt::Brk { incr } => writeln!(f, "brk {incr}"),
            Stmt::Yield => writeln!(f, "yield"),
            Stmt::Priv => writeln!(f, "priv"),
            Stmt::Expect { text } => writeln!(f, "expect {text}"),
            Stmt::Toctou { loc, len, byte } => writeln!(f, "toctou {loc} {len} {byte}"),
            Stmt::Kjump => writeln!(f, "kjump"),
            Stmt::Kload { syscall } => writeln!(f, "kload {syscall}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Script {
    /// Region layout of the first μprocess; the default layout if absent.
    pub layout: Option<LayoutSpec>,
    pub stmts: Vec<Stmt>,
}

impl Script {
    pub fn layout_spec(&self) -> LayoutSpec {
        self.layout.unwrap_or_default()
    }

    /// Number of statements including those inside fork blocks.
    pub fn len(&self) -> usize {
        fn count(stmts: &[Stmt]) -> usize {
            stmts
                .iter()
                .map(|s| match s {
                    Stmt::Fork { body, .. } => 1 + count(body),
                    _ => 1,
                })
                .sum()
        }
        count(&self.stmts)
    }

    pub fn is_empty(&self) -> bool {
        self.stmts.is_empty()
    }
}

impl fmt::Display for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = &self.layout {
            writeln!(
                f,
                "layout code={} got={} meta={} stack={} tls={} heap={}",
                l.code_pages,
                l.got_pages,
                l.alloc_meta_pages,
                l.stack_pages,
                l.tls_pages,
                l.heap_pages
            )?;
        }
        for s in &self.stmts {
            s.write(f, 0)?;
        }
        Ok(())
    }
}
