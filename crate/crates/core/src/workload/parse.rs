use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use super::ast::{Loc, Script, Stmt};
use crate::kernel_gateway::Syscall;
use crate::tagged_memory::GRANULE;
use crate::uprocess::LayoutSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    Syntax,
    Semantic,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub kind: ParseErrorKind,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ParseErrorKind::Syntax => "syntax error",
            ParseErrorKind::Semantic => "error",
        };
        write!(f, "{}:{}: {kind}: {}", self.line, self.column, self.message)
    }
}

/// A whitespace-separated word and its 1-based column.
#[derive(Debug, Clone, Copy)]
struct Tok<'a> {
    text: &'a str,
    col: usize,
}

fn tokenize(line: &str) -> Vec<Tok<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        match (ch.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push(Tok {
                    text: &line[s..i],
                    col: s + 1,
                });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Tok {
            text: &line[s..],
            col: s + 1,
        });
    }
    out
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

struct Block {
    stmts: Vec<Stmt>,
    /// Names visible here, including inherited ones.
    scope: BTreeSet<String>,
    /// Pending fork header: (label, nowait, line).
    fork: Option<(String, bool, usize)>,
}

struct Parser {
    line: usize,
}

impl Parser {
    fn err(&self, col: usize, kind: ParseErrorKind, message: impl Into<String>) -> ParseError {
        ParseError {
            line: self.line,
            column: col,
            kind,
            message: message.into(),
        }
    }

    fn syntax(&self, col: usize, message: impl Into<String>) -> ParseError {
        self.err(col, ParseErrorKind::Syntax, message)
    }

    fn semantic(&self, col: usize, message: impl Into<String>) -> ParseError {
        self.err(col, ParseErrorKind::Semantic, message)
    }

    fn arity(&self, toks: &[Tok<'_>], want: usize) -> Result<(), ParseError> {
        if toks.len() - 1 == want {
            return Ok(());
        }
        let col = toks.get(want + 1).map_or(toks[0].col, |t| t.col);
        Err(self.syntax(
            col,
            format!(
                "`{}` takes {want} argument(s), found {}",
                toks[0].text,
                toks.len() - 1
            ),
        ))
    }

    fn uint(&self, t: Tok<'_>) -> Result<u64, ParseError> {
        let parsed = match t.text.strip_prefix("0x") {
            Some(hex) => u64::from_str_radix(hex, 16),
            None => t.text.parse::<u64>(),
        };
        parsed.map_err(|_| self.syntax(t.col, format!("expected a number, found `{}`", t.text)))
    }

    fn int(&self, t: Tok<'_>) -> Result<i64, ParseError> {
        match t.text.strip_prefix('-') {
            Some(rest) => {
                let v = self.uint(Tok {
                    text: rest,
                    col: t.col,
                })?;
                i64::try_from(v)
                    .map(|v| -v)
                    .map_err(|_| self.syntax(t.col, "number out of range"))
            }
            None => {
                let v = self.uint(t)?;
                i64::try_from(v).map_err(|_| self.syntax(t.col, "number out of range"))
            }
        }
    }

    fn small<T: TryFrom<i64>>(&self, t: Tok<'_>) -> Result<T, ParseError> {
        T::try_from(self.int(t)?).map_err(|_| self.syntax(t.col, "number out of range"))
    }

    fn ident(&self, t: Tok<'_>) -> Result<String, ParseError> {
        let ok = t
            .text
            .chars()
            .next()
            .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
            && t.text
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_');
        if ok {
            Ok(t.text.to_string())
        } else {
            Err(self.syntax(t.col, format!("invalid name `{}`", t.text)))
        }
    }

    fn loc(&self, t: Tok<'_>, scope: &BTreeSet<String>) -> Result<Loc, ParseError> {
        let (name, off) = match t.text.split_once('+') {
            Some((n, o)) => {
                let off_col = t.col + n.len() + 1;
                (
                    n,
                    self.uint(Tok {
                        text: o,
                        col: off_col,
                    })?,
                )
            }
            None => (t.text, 0),
        };
        let name = self.ident(Tok {
            text: name,
            col: t.col,
        })?;
        if !scope.contains(&name) {
            return Err(self.semantic(t.col, format!("`{name}` is not declared")));
        }
        Ok(Loc { name, off })
    }

    fn ref_slot(&self, t: Tok<'_>, scope: &BTreeSet<String>) -> Result<Loc, ParseError> {
        let loc = self.loc(t, scope)?;
        if loc.off % GRANULE != 0 {
            return Err(self.semantic(
                t.col,
                format!(
                    "reference stores must be {GRANULE}-byte aligned (offset {})",
                    loc.off
                ),
            ));
        }
        Ok(loc)
    }

    fn layout(&self, toks: &[Tok<'_>]) -> Result<LayoutSpec, ParseError> {
        let mut spec = LayoutSpec::default();
        for t in &toks[1..] {
            let Some((key, val)) = t.text.split_once('=') else {
                return Err(self.syntax(t.col, format!("expected key=value, found `{}`", t.text)));
            };
            let v = self.uint(Tok {
                text: val,
                col: t.col + key.len() + 1,
            })?;
            let slot = match key {
                "code" => &mut spec.code_pages,
                "got" => &mut spec.got_pages,
                "meta" => &mut spec.alloc_meta_pages,
                "stack" => &mut spec.stack_pages,
                "tls" => &mut spec.tls_pages,
                "heap" => &mut spec.heap_pages,
                other => return Err(self.syntax(t.col, format!("unknown layout key `{other}`"))),
            };
            *slot = v;
        }
        let required = [
            spec.code_pages,
            spec.got_pages,
            spec.alloc_meta_pages,
            spec.heap_pages,
        ];
        if required.contains(&0) {
            return Err(self.semantic(
                toks[0].col,
                "code, got, meta and heap need at least one page",
            ));
        }
        Ok(spec)
    }
}

/// Parse a script, checking syntax and name resolution.
pub fn parse(text: &str) -> Result<Script, ParseError> {
    let mut p = Parser { line: 0 };
    let mut layout = None;
    let mut seen_stmt = false;
    let mut stack = vec![Block {
        stmts: Vec::new(),
        scope: BTreeSet::new(),
        fork: None,
    }];

    for (idx, raw) in text.lines().enumerate() {
        p.line = idx + 1;
        let line = strip_comment(raw);
        let toks = tokenize(line);
        let Some(&head) = toks.first() else { continue };
        let scope = &stack.last().expect("root block").scope;

        let stmt = match head.text {
            "layout" => {
                if seen_stmt || layout.is_some() {
                    return Err(p.syntax(head.col, "`layout` must be the first statement"));
                }
                layout = Some(p.layout(&toks)?);
                continue;
            }
            "}" => {
                p.arity(&toks, 0)?;
                if stack.len() == 1 {
                    return Err(p.syntax(head.col, "unmatched `}`"));
                }
                let block = stack.pop().expect("nested");
                let (label, nowait, _) = block.fork.expect("fork block");
                stack.last_mut().expect("parent").stmts.push(Stmt::Fork {
                    label,
                    nowait,
                    body: block.stmts,
                });
                seen_stmt = true;
                continue;
            }
            "fork" => {
                let (nowait, brace) = match toks.len() {
                    3 => (false, toks[2]),
                    4 if toks[2].text == "nowait" => (true, toks[3]),
                    4 => {
                        return Err(p.syntax(
                            toks[2].col,
                            format!("expected `nowait`, found `{}`", toks[2].text),
                        ))
                    }
                    _ => return Err(p.syntax(head.col, "expected `fork LABEL [nowait] {`")),
                };
                if brace.text != "{" {
                    return Err(p.syntax(brace.col, "expected `{`"));
                }
                let label = p.ident(toks[1])?;
                let inherited = scope.clone();
                stack.push(Block {
                    stmts: Vec::new(),
                    scope: inherited,
                    fork: Some((label, nowait, p.line)),
                });
                seen_stmt = true;
                continue;
            }
            "alloc" => {
                p.arity(&toks, 2)?;
                let name = p.ident(toks[1])?;
                if scope.contains(&name) {
                    return Err(p.semantic(toks[1].col, format!("`{name}` is already declared")));
                }
                let bytes = p.uint(toks[2])?;
                if bytes == 0 {
                    return Err(p.semantic(toks[2].col, "allocation size must be positive"));
                }
                stack.last_mut().expect("block").scope.insert(name.clone());
                Stmt::Alloc { name, bytes }
            }
            "store_int" => {
                p.arity(&toks, 2)?;
                Stmt::StoreInt {
                    loc: p.loc(toks[1], scope)?,
                    value: p.uint(toks[2])?,
                }
            }
            "load_int" => {
                p.arity(&toks, 1)?;
                Stmt::LoadInt {
                    loc: p.loc(toks[1], scope)?,
                }
            }
            "store_ref" => {
                p.arity(&toks, 2)?;
                // Both names resolve before the slot alignment is checked.
                p.loc(toks[1], scope)?;
                let target = p.loc(toks[2], scope)?;
                let loc = p.ref_slot(toks[1], scope)?;
                Stmt::StoreRef { loc, target }
            }
            "load_ref" => {
                p.arity(&toks, 1)?;
                Stmt::LoadRef {
                    loc: p.ref_slot(toks[1], scope)?,
                }
            }
            "deref" => match toks.len() {
                1 => Stmt::Deref { off: 0 },
                2 => Stmt::Deref {
                    off: p.uint(toks[1])?,
                },
                _ => return Err(p.syntax(toks[2].col, "`deref` takes at most one argument")),
            },
            "exit" => {
                p.arity(&toks, 1)?;
                Stmt::Exit {
                    code: p.small(toks[1])?,
                }
            }
            "wait" => {
                p.arity(&toks, 0)?;
                Stmt::Wait
            }
            "getpid" => {
                p.arity(&toks, 0)?;
                Stmt::Getpid
            }
            "open" => {
                p.arity(&toks, 1)?;
                Stmt::Open {
                    path: toks[1].text.to_string(),
                }
            }
            "pipe" => {
                p.arity(&toks, 0)?;
                Stmt::Pipe
            }
            "close" => {
                p.arity(&toks, 1)?;
                Stmt::Close {
                    fd: p.small(toks[1])?,
                }
            }
            "read" | "write" => {
                p.arity(&toks, 3)?;
                let fd = p.small(toks[1])?;
                let loc = p.loc(toks[2], scope)?;
                let len = p.uint(toks[3])?;
                if head.text == "read" {
                    Stmt::Read { fd, loc, len }
                } else {
                    Stmt::Write { fd, loc, len }
                }
            }
            "brk" => {
                p.arity(&toks, 1)?;
                Stmt::Brk {
                    incr: p.int(toks[1])?,
                }
            }
            "yield" => {
                p.arity(&toks, 0)?;
                Stmt::Yield
            }
            "priv" => {
                p.arity(&toks, 0)?;
                Stmt::Priv
            }
            "expect" => {
                if toks.len() < 2 {
                    return Err(p.syntax(head.col, "`expect` needs a value"));
                }
                let start = toks[1].col - 1;
                Stmt::Expect {
                    text: line[start..].trim_end().to_string(),
                }
            }
            "toctou" => {
                p.arity(&toks, 3)?;
                Stmt::Toctou {
                    loc: p.loc(toks[1], scope)?,
                    len: p.uint(toks[2])?,
                    byte: p.small(toks[3])?,
                }
            }
            "kjump" => {
                p.arity(&toks, 0)?;
                Stmt::Kjump
            }
            "kload" => {
                p.arity(&toks, 1)?;
                if Syscall::from_name(toks[1].text).is_none() {
                    return Err(
                        p.semantic(toks[1].col, format!("unknown syscall `{}`", toks[1].text))
                    );
                }
                Stmt::Kload {
                    syscall: toks[1].text.to_string(),
                }
            }
            other => return Err(p.syntax(head.col, format!("unknown statement `{other}`"))),
        };
        seen_stmt = true;
        stack.last_mut().expect("block").stmts.push(stmt);
    }

    if stack.len() > 1 {
        let (label, _, line) = stack.pop().expect("nested").fork.expect("fork block");
        return Err(ParseError {
            line,
            column: 1,
            kind: ParseErrorKind::Syntax,
            message: format!("fork block `{label}` is not closed"),
        });
    }
    Ok(Script {
        layout,
        stmts: stack.pop().expect("root").stmts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_statements() {
        let s = parse("alloc a 4096\nstore_int a+0 42\nload_int a+0").unwrap();
        assert_eq!(s.stmts.len(), 3);
        assert_eq!(
            s.stmts[1],
            Stmt::StoreInt {
                loc: Loc::new("a", 0),
                value: 42
            }
        );
    }

    #[test]
    fn undeclared_target_is_named() {
        let e = parse("alloc a 64\nstore_ref a+8 b+0").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::Semantic);
        assert!(e.message.contains("`b`"), "{e}");
        let e = parse("alloc a 64\nstore_ref a+16 b+0").unwrap_err();
        assert_eq!((e.line, e.column), (2, 16));
    }

    #[test]
    fn misaligned_reference_slot() {
        let e = parse("alloc a 64\nstore_ref a+7 a+0").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::Semantic);
        assert!(e.message.contains("16-byte aligned"));
        assert!(parse("alloc a 64\nload_ref a+24").is_err());
    }

    #[test]
    fn unknown_statement_has_position() {
        let e = parse("alloc a 64\n   jump a").unwrap_err();
        assert_eq!((e.line, e.column, e.kind), (2, 4, ParseErrorKind::Syntax));
    }

    #[test]
    fn fork_blocks_scope_names() {
        let s = parse("alloc a 64\nfork c {\n  alloc b 16\n  store_ref b+0 a+0\n}\nload_int a+0")
            .unwrap();
        assert!(matches!(&s.stmts[1], Stmt::Fork { body, nowait: false, .. } if body.len() == 2));
        let e = parse("alloc a 64\nfork c {\n  alloc b 16\n}\nload_int b+0").unwrap_err();
        assert_eq!(e.line, 5);
        assert!(parse("fork c {\nexit 0\n")
            .unwrap_err()
            .message
            .contains("not closed"));
        assert!(parse("}").is_err());
        assert!(parse("alloc a 16\nfork c {\nalloc a 16\n}").is_err());
    }

    #[test]
    fn comments_layout_and_numbers() {
        let s = parse("# header\nlayout heap=8 meta=2\nalloc a 0x20 # trailing\nbrk -16\nexpect ref(+0x2000/32)").unwrap();
        assert_eq!(s.layout.unwrap().heap_pages, 8);
        assert_eq!(s.layout.unwrap().alloc_meta_pages, 2);
        assert_eq!(
            s.stmts[0],
            Stmt::Alloc {
                name: "a".into(),
                bytes: 32
            }
        );
        assert_eq!(s.stmts[1], Stmt::Brk { incr: -16 });
        assert_eq!(
            s.stmts[2],
            Stmt::Expect {
                text: "ref(+0x2000/32)".into()
            }
        );
        assert!(parse("alloc a 16\nlayout heap=2").is_err());
        assert!(parse("layout heap=0").is_err());
        assert!(parse("kload mmap").is_err());
    }

    #[test]
    fn print_then_parse_is_identity() {
        let src = "layout code=2 got=1 meta=1 stack=2 tls=0 heap=6\nalloc a 64\nalloc b 32\nstore_ref a+16 b+8\nfork kid nowait {\n  load_ref a+16\n  deref 8\n  expect 0\n  fork grand {\n    exit 3\n  }\n}\nwait\nopen out.txt\nwrite 3 a+0 16\ntoctou b+0 16 170\nkload getpid\n";
        let s = parse(src).unwrap();
        assert_eq!(s.to_string(), src);
        assert_eq!(parse(&s.to_string()).unwrap(), s);
    }
}
