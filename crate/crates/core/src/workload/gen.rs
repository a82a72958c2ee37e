//! Seeded script generators.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::ast::{Loc, Script, Stmt};
use crate::tagged_memory::{GRANULE, GRANULES_PER_PAGE, PAGE_SIZE};
use crate::uprocess::LayoutSpec;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenError {
    #[error("--pages must be at least 1")]
    NoPages,
    #[error("{0} must lie in [0, 1]")]
    Fraction(&'static str),
    #[error("{refs} references per index page exceed the {max} granules of a page")]
    IndexTooDense { refs: u64, max: u64 },
}

/// Shape of the key-value store analog.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RedisParams {
    /// Data pages populated by the parent.
    pub pages: u64,
    /// Index pages per data page.
    pub ref_density: f64,
    /// Fraction of index entries the child follows to read data.
    pub child_read_frac: f64,
    /// Output pages written by the child.
    pub write_pages: u64,
    pub seed: u64,
}

impl Default for RedisParams {
    fn default() -> Self {
        RedisParams {
            pages: 64,
            ref_density: 0.0625,
            child_read_frac: 1.0,
            write_pages: 4,
            seed: 1,
        }
    }
}

impl RedisParams {
    pub fn index_pages(&self) -> u64 {
        ((self.pages as f64 * self.ref_density).ceil() as u64).max(1)
    }

    pub fn refs_per_index_page(&self) -> u64 {
        self.pages.div_ceil(self.index_pages())
    }

    fn validate(&self) -> Result<(), GenError> {
        if self.pages == 0 {
            return Err(GenError::NoPages);
        }
        if !(0.0..=1.0).contains(&self.ref_density) {
            return Err(GenError::Fraction("--ref-density"));
        }
        if !(0.0..=1.0).contains(&self.child_read_frac) {
            return Err(GenError::Fraction("--child-read-frac"));
        }
        let refs = self.refs_per_index_page();
        if refs > GRANULES_PER_PAGE as u64 {
            return Err(GenError::IndexTooDense {
                refs,
                max: GRANULES_PER_PAGE as u64,
            });
        }
        Ok(())
    }
}

/// Parent fills `pages` data pages and an index of references to them, then
/// forks a child that walks the index, reads a fraction of the data and
/// writes its own output pages.
pub fn redis_analog(p: &RedisParams) -> Result<Script, GenError> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let index = p.index_pages();
    let per_page = p.refs_per_index_page();
    let layout = LayoutSpec {
        heap_pages: p.pages + index + p.write_pages.max(1),
        ..LayoutSpec::default()
    };
    let slot = |k: u64| {
        Loc::new(
            "index",
            (k / per_page) * PAGE_SIZE + (k % per_page) * GRANULE,
        )
    };
    let page = |k: u64| Loc::new("data", k * PAGE_SIZE);

    let mut stmts = vec![
        Stmt::Alloc {
            name: "data".into(),
            bytes: p.pages * PAGE_SIZE,
        },
        Stmt::Alloc {
            name: "index".into(),
            bytes: index * PAGE_SIZE,
        },
        Stmt::Alloc {
            name: "out".into(),
            bytes: p.write_pages.max(1) * PAGE_SIZE,
        },
    ];
    let values: Vec<u64> = (0..p.pages).map(|_| rng.gen::<u32>() as u64).collect();
    for (k, v) in values.iter().enumerate() {
        stmts.push(Stmt::StoreInt {
            loc: page(k as u64),
            value: *v,
        });
    }
    for k in 0..p.pages {
        stmts.push(Stmt::StoreRef {
            loc: slot(k),
            target: page(k),
        });
    }

    let mut body = Vec::new();
    for (k, v) in values.iter().enumerate() {
        body.push(Stmt::LoadRef {
            loc: slot(k as u64),
        });
        if rng.gen_bool(p.child_read_frac) {
            body.push(Stmt::Deref { off: 0 });
            body.push(Stmt::Expect {
                text: v.to_string(),
            });
        }
    }
    for w in 0..p.write_pages {
        body.push(Stmt::StoreInt {
            loc: Loc::new("out", w * PAGE_SIZE),
            value: w + 1,
        });
    }
    body.push(Stmt::Exit { code: 0 });
    stmts.push(Stmt::Fork {
        label: "snapshot".into(),
        nowait: false,
        body,
    });
    Ok(Script {
        layout: Some(layout),
        stmts,
    })
}

/// What a generated process knows about its own memory.
#[derive(Debug, Clone, Default)]
struct Model {
    /// (name, size) in allocation order.
    chunks: Vec<(String, u64)>,
    /// Tagged granules: chunk index and granule offset.
    tags: BTreeSet<(usize, u64)>,
    /// Reference stored in a tagged granule: target chunk and offset.
    refs: BTreeMap<(usize, u64), (usize, u64)>,
    /// Known 8-byte words. Missing entries are unknown or zero.
    words: BTreeMap<(usize, u64), u64>,
    /// Words whose value cannot be predicted from the script.
    unknown: BTreeSet<(usize, u64)>,
    /// What the last `load_ref` produced.
    reg: Option<(usize, u64)>,
    fds: BTreeSet<i32>,
    heap_used: u64,
    nowait_children: u32,
}

impl Model {
    fn tagged_in(&self, chunk: usize, lo: u64, hi: u64) -> bool {
        self.tags
            .range((chunk, lo / GRANULE * GRANULE)..(chunk, hi))
            .next()
            .is_some()
    }

    fn clear_range(&mut self, chunk: usize, lo: u64, hi: u64) {
        let first = lo / GRANULE * GRANULE;
        let gs: Vec<_> = self
            .tags
            .range((chunk, first)..(chunk, hi))
            .copied()
            .collect();
        for g in gs {
            self.tags.remove(&g);
            self.refs.remove(&g);
            // The rest of the granule keeps the capability's integer image.
            self.unknown.insert((g.0, g.1));
            self.unknown.insert((g.0, g.1 + 8));
        }
    }

    fn word(&self, chunk: usize, off: u64) -> Option<u64> {
        if self.unknown.contains(&(chunk, off)) {
            return None;
        }
        Some(self.words.get(&(chunk, off)).copied().unwrap_or(0))
    }

    fn fd_next(&self) -> i32 {
        (crate::uprocess::FIRST_FD..)
            .find(|n| !self.fds.contains(n))
            .expect("fd space")
    }
}

struct Fuzzer {
    rng: ChaCha8Rng,
    heap_bytes: u64,
    labels: u32,
    files: u32,
}

impl Fuzzer {
    fn loc(&self, m: &Model, chunk: usize, off: u64) -> Loc {
        Loc::new(m.chunks[chunk].0.clone(), off)
    }

    fn pick_chunk(&mut self, m: &Model) -> Option<usize> {
        (!m.chunks.is_empty()).then(|| self.rng.gen_range(0..m.chunks.len()))
    }

    fn word_off(&mut self, size: u64) -> u64 {
        self.rng.gen_range(0..size / 8) * 8
    }

    fn granule_off(&mut self, size: u64) -> u64 {
        self.rng.gen_range(0..size / GRANULE) * GRANULE
    }

    fn alloc(&mut self, m: &mut Model, out: &mut Vec<Stmt>) {
        let size = *[16u64, 48, 256, 1024, 4096, 6000, 8192]
            .get(self.rng.gen_range(0..7))
            .expect("index in range");
        let rounded = size.div_ceil(GRANULE) * GRANULE;
        if m.heap_used + rounded > self.heap_bytes || m.chunks.len() >= 200 {
            return;
        }
        let name = format!("m{}", m.chunks.len());
        m.heap_used += rounded;
        m.chunks.push((name.clone(), rounded));
        out.push(Stmt::Alloc { name, bytes: size });
    }

    fn block(&mut self, m: &mut Model, depth: u32, len: usize, out: &mut Vec<Stmt>) {
        for _ in 0..len {
            let roll = self.rng.gen_range(0..100);
            match roll {
                0..=5 => self.alloc(m, out),
                6..=25 => {
                    let Some(c) = self.pick_chunk(m) else {
                        continue;
                    };
                    let off = self.word_off(m.chunks[c].1);
                    let value = self.rng.gen::<u32>() as u64;
                    m.clear_range(c, off, off + 8);
                    m.unknown.remove(&(c, off));
                    m.words.insert((c, off), value);
                    out.push(Stmt::StoreInt {
                        loc: self.loc(m, c, off),
                        value,
                    });
                }
                26..=40 => {
                    let (Some(c), Some(t)) = (self.pick_chunk(m), self.pick_chunk(m)) else {
                        continue;
                    };
                    let off = self.granule_off(m.chunks[c].1);
                    let toff = self.word_off(m.chunks[t].1);
                    m.tags.insert((c, off));
                    m.refs.insert((c, off), (t, toff));
                    out.push(Stmt::StoreRef {
                        loc: self.loc(m, c, off),
                        target: self.loc(m, t, toff),
                    });
                }
                41..=55 => {
                    let Some(c) = self.pick_chunk(m) else {
                        continue;
                    };
                    // Prefer slots that hold references.
                    let tagged: Vec<_> =
                        m.tags.iter().filter(|(tc, _)| *tc == c).copied().collect();
                    let off = if !tagged.is_empty() && self.rng.gen_bool(0.8) {
                        tagged[self.rng.gen_range(0..tagged.len())].1
                    } else {
                        self.granule_off(m.chunks[c].1)
                    };
                    out.push(Stmt::LoadRef {
                        loc: self.loc(m, c, off),
                    });
                    m.reg = m.refs.get(&(c, off)).copied();
                    if let Some((t, toff)) = m.reg.filter(|_| self.rng.gen_bool(0.7)) {
                        let size = m.chunks[t].1;
                        let extra = self.rng.gen_range(0..4u64) * 8;
                        let at = toff + extra;
                        if at + 8 <= size && !m.tagged_in(t, at, at + 8) {
                            out.push(Stmt::Deref { off: extra });
                            if let Some(v) = m.word(t, at) {
                                out.push(Stmt::Expect {
                                    text: v.to_string(),
                                });
                            }
                        }
                    }
                }
                56..=63 => {
                    let Some(c) = self.pick_chunk(m) else {
                        continue;
                    };
                    let off = self.word_off(m.chunks[c].1);
                    if m.tagged_in(c, off, off + 8) {
                        continue;
                    }
                    out.push(Stmt::LoadInt {
                        loc: self.loc(m, c, off),
                    });
                    if let Some(v) = m.word(c, off) {
                        out.push(Stmt::Expect {
                            text: v.to_string(),
                        });
                    }
                }
                64..=71 if depth < 2 => {
                    let label = format!("k{}", self.labels);
                    self.labels += 1;
                    let nowait = self.rng.gen_bool(0.3);
                    let mut child = m.clone();
                    child.nowait_children = 0;
                    let mut body = Vec::new();
                    let n = self.rng.gen_range(3..12);
                    self.block(&mut child, depth + 1, n, &mut body);
                    if self.rng.gen_bool(0.3) {
                        body.push(Stmt::Exit {
                            code: self.rng.gen_range(0..5),
                        });
                    }
                    if nowait {
                        m.nowait_children += 1;
                    }
                    out.push(Stmt::Fork {
                        label,
                        nowait,
                        body,
                    });
                }
                72..=75 => {
                    out.push(Stmt::Wait);
                    m.nowait_children = m.nowait_children.saturating_sub(1);
                }
                76..=78 => out.push(Stmt::Getpid),
                79..=81 => out.push(Stmt::Yield),
                82..=84 => {
                    let path = format!("f{}", self.files % 3);
                    self.files += 1;
                    m.fds.insert(m.fd_next());
                    out.push(Stmt::Open { path });
                }
                85..=88 => {
                    let (Some(&fd), Some(c)) = (m.fds.iter().next(), self.pick_chunk(m)) else {
                        continue;
                    };
                    let size = m.chunks[c].1;
                    let off = self.word_off(size);
                    let len = (self.rng.gen_range(1..=8u64) * 8).min(size - off);
                    if m.tagged_in(c, off, off + len) {
                        continue;
                    }
                    out.push(Stmt::Write {
                        fd,
                        loc: self.loc(m, c, off),
                        len,
                    });
                }
                89..=90 => {
                    let fd = m.fds.iter().next().copied().unwrap_or(3);
                    m.fds.remove(&fd);
                    out.push(Stmt::Close { fd });
                }
                91..=92 => {
                    let r = m.fd_next();
                    m.fds.insert(r);
                    let w = m.fd_next();
                    m.fds.insert(w);
                    out.push(Stmt::Pipe);
                }
                93..=94 => {
                    let (Some(&fd), Some(c)) = (m.fds.iter().next_back(), self.pick_chunk(m))
                    else {
                        continue;
                    };
                    let size = m.chunks[c].1;
                    let off = self.word_off(size);
                    let len = (self.rng.gen_range(1..=4u64) * 8).min(size - off);
                    m.clear_range(c, off, off + len);
                    let mut w = off;
                    while w < off + len {
                        m.unknown.insert((c, w));
                        w += 8;
                    }
                    out.push(Stmt::Read {
                        fd,
                        loc: self.loc(m, c, off),
                        len,
                    });
                }
                _ => {
                    let Some(c) = self.pick_chunk(m) else {
                        continue;
                    };
                    let size = m.chunks[c].1;
                    let off = self.word_off(size);
                    let len = 16.min(size - off);
                    if m.tagged_in(c, off, off + len) {
                        continue;
                    }
                    // Snapshot the region's contents through the kernel.
                    let fd = m.fds.iter().next().copied();
                    if let Some(fd) = fd {
                        out.push(Stmt::Write {
                            fd,
                            loc: self.loc(m, c, off),
                            len,
                        });
                    } else {
                        out.push(Stmt::Getpid);
                    }
                }
            }
        }
    }
}

/// A random mix of allocation, integer and reference traffic, nested forks,
/// file descriptors and scheduling points.
///
/// Integer reads never target granules that currently hold a reference: the
/// integer image of a capability is where it points, which is only the same
/// across strategies once the page has been relocated.
pub fn mixed(seed: u64) -> Script {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heap_pages = rng.gen_range(4..16);
    let mut f = Fuzzer {
        heap_bytes: heap_pages * PAGE_SIZE,
        rng,
        labels: 0,
        files: 0,
    };
    let mut m = Model::default();
    let mut stmts = Vec::new();
    for _ in 0..3 {
        f.alloc(&mut m, &mut stmts);
    }
    let n = f.rng.gen_range(20..60);
    f.block(&mut m, 0, n, &mut stmts);
    Script {
        layout: Some(LayoutSpec {
            heap_pages,
            ..LayoutSpec::default()
        }),
        stmts,
    }
}
