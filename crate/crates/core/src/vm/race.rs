//! Shadow memory for conflicting accesses within a phase.

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaceKind {
    WriteWrite,
    ReadWrite,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaceDiagnostic {
    pub kernel: String,
    pub buffer: String,
    /// Row-major element offset.
    pub offset: usize,
    pub kind: RaceKind,
    pub block: usize,
    pub thread: usize,
    /// The earlier conflicting thread, when a single one is known.
    pub other: Option<(usize, usize)>,
}

const MULTI: u32 = u32::MAX;
const MAX_REPORTED: usize = 32;

/// Last writer and reader of a cell. Stamps identify a (block, phase)
/// pair and are never reused within one kernel execution; 0 means none.
#[derive(Clone, Copy, Default)]
pub(crate) struct Cell {
    w_stamp: u32,
    w_block: u32,
    w_thread: u32,
    r_stamp: u32,
    r_block: u32,
    r_thread: u32,
    r_blocks: bool,
}

pub(crate) struct Access {
    pub block: u32,
    pub thread: u32,
    pub stamp: u32,
}

#[derive(Default)]
pub(crate) struct Shadow {
    pub shared: Vec<Vec<Cell>>,
    pub global: Vec<FxHashMap<usize, Cell>>,
    pub races: Vec<RaceDiagnostic>,
    pub count: usize,
}

type Conflict = Option<(RaceKind, Option<(usize, usize)>)>;

fn known(block: u32, thread: u32) -> Option<(usize, usize)> {
    (thread != MULTI).then_some((block as usize, thread as usize))
}

/// Shared cells belong to one block, so only the stamp and thread matter.
fn shared_write(c: &mut Cell, a: &Access) -> Conflict {
    let r = if c.w_stamp == a.stamp && c.w_thread != a.thread {
        Some((RaceKind::WriteWrite, known(c.w_block, c.w_thread)))
    } else if c.r_stamp == a.stamp && c.r_thread != a.thread {
        Some((RaceKind::ReadWrite, known(c.r_block, c.r_thread)))
    } else {
        None
    };
    c.w_stamp = a.stamp;
    c.w_block = a.block;
    c.w_thread = a.thread;
    r
}

fn shared_read(c: &mut Cell, a: &Access) -> Conflict {
    let r = (c.w_stamp == a.stamp && c.w_thread != a.thread)
        .then(|| (RaceKind::ReadWrite, known(c.w_block, c.w_thread)));
    if c.r_stamp == a.stamp {
        if c.r_thread != a.thread {
            c.r_thread = MULTI;
        }
    } else {
        c.r_stamp = a.stamp;
        c.r_block = a.block;
        c.r_thread = a.thread;
    }
    r
}

/// Blocks are unordered with respect to each other, so any access from
/// another block conflicts regardless of phase.
fn global_write(c: &mut Cell, a: &Access) -> Conflict {
    let r = if c.w_stamp != 0
        && (c.w_block != a.block || (c.w_stamp == a.stamp && c.w_thread != a.thread))
    {
        Some((RaceKind::WriteWrite, known(c.w_block, c.w_thread)))
    } else if c.r_stamp != 0
        && (c.r_blocks
            || c.r_block != a.block
            || (c.r_stamp == a.stamp && c.r_thread != a.thread))
    {
        Some((RaceKind::ReadWrite, known(c.r_block, c.r_thread)))
    } else {
        None
    };
    c.w_stamp = a.stamp;
    c.w_block = a.block;
    c.w_thread = a.thread;
    r
}

fn global_read(c: &mut Cell, a: &Access) -> Conflict {
    let r = (c.w_stamp != 0
        && (c.w_block != a.block || (c.w_stamp == a.stamp && c.w_thread != a.thread)))
        .then(|| (RaceKind::ReadWrite, known(c.w_block, c.w_thread)));
    if c.r_stamp != 0 && c.r_block != a.block {
        c.r_blocks = true;
    }
    if c.r_stamp == a.stamp {
        if c.r_thread != a.thread {
            c.r_thread = MULTI;
        }
    } else {
        c.r_stamp = a.stamp;
        c.r_thread = a.thread;
    }
    c.r_block = a.block;
    r
}

impl Shadow {
    fn record(&mut self, conflict: Conflict, kernel: &str, buffer: &str, offset: usize, a: &Access) {
        if let Some((kind, other)) = conflict {
            self.count += 1;
            if self.races.len() < MAX_REPORTED {
                self.races.push(RaceDiagnostic {
                    kernel: kernel.to_string(),
                    buffer: buffer.to_string(),
                    offset,
                    kind,
                    block: a.block as usize,
                    thread: a.thread as usize,
                    other,
                });
            }
        }
    }

    pub fn shared(&mut self, slot: usize, offset: usize, write: bool, a: &Access, names: (&str, &str)) {
        let c = &mut self.shared[slot][offset];
        let r = if write { shared_write(c, a) } else { shared_read(c, a) };
        if r.is_some() {
            self.record(r, names.0, names.1, offset, a);
        }
    }

    pub fn global(&mut self, slot: usize, offset: usize, write: bool, a: &Access, names: (&str, &str)) {
        let c = self.global[slot].entry(offset).or_default();
        let r = if write { global_write(c, a) } else { global_read(c, a) };
        if r.is_some() {
            self.record(r, names.0, names.1, offset, a);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(block: u32, thread: u32, stamp: u32) -> Access {
        Access {
            block,
            thread,
            stamp,
        }
    }

    #[test]
    fn shared_conflicts_only_within_a_phase() {
        let mut c = Cell::default();
        assert!(shared_write(&mut c, &at(0, 0, 1)).is_none());
        assert_eq!(shared_write(&mut c, &at(0, 1, 1)).unwrap().0, RaceKind::WriteWrite);
        assert!(shared_read(&mut c, &at(0, 2, 2)).is_none());
        assert!(shared_read(&mut c, &at(0, 3, 2)).is_none());
        assert_eq!(shared_write(&mut c, &at(0, 2, 2)).unwrap().0, RaceKind::ReadWrite);
        let mut c = Cell::default();
        shared_read(&mut c, &at(0, 5, 3));
        assert!(shared_write(&mut c, &at(0, 5, 3)).is_none());
    }

    #[test]
    fn global_conflicts_across_blocks() {
        let mut c = Cell::default();
        assert!(global_write(&mut c, &at(0, 0, 1)).is_none());
        assert!(global_read(&mut c, &at(0, 1, 2)).is_none());
        assert!(global_read(&mut c, &at(1, 0, 3)).is_some());
        let mut c = Cell::default();
        global_read(&mut c, &at(0, 4, 1));
        global_read(&mut c, &at(1, 4, 2));
        assert!(global_write(&mut c, &at(1, 4, 2)).is_some());
    }
}
