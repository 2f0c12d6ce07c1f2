//! Per-thread operation counters. Each thread sees only its own counts;
//! harnesses snapshot them inside worker threads before exiting.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounters {
    /// Root-to-leaf descents started by searches.
    pub descents: u64,
    pub finds: u64,
    /// Descents performed inside finds; equals `finds` when no find restarts.
    pub find_descents: u64,
    pub eliminated_inserts: u64,
    pub eliminated_deletes: u64,
    /// Update attempts that found a marked node and started over.
    pub retries: u64,
}

impl OpCounters {
    pub fn eliminated(&self) -> u64 {
        self.eliminated_inserts + self.eliminated_deletes
    }

    pub fn merge(&mut self, other: &OpCounters) {
        self.descents += other.descents;
        self.finds += other.finds;
        self.find_descents += other.find_descents;
        self.eliminated_inserts += other.eliminated_inserts;
        self.eliminated_deletes += other.eliminated_deletes;
        self.retries += other.retries;
    }
}

thread_local! {
    static COUNTERS: Cell<OpCounters> = const {
        Cell::new(OpCounters {
            descents: 0,
            finds: 0,
            find_descents: 0,
            eliminated_inserts: 0,
            eliminated_deletes: 0,
            retries: 0,
        })
    };
}

#[inline]
fn bump(f: impl FnOnce(&mut OpCounters)) {
    COUNTERS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

#[inline]
pub(crate) fn descent() {
    bump(|c| c.descents += 1);
}

#[inline]
pub(crate) fn descents() -> u64 {
    COUNTERS.with(|c| c.get().descents)
}

#[inline]
pub(crate) fn find(descents: u64) {
    bump(|c| {
        c.finds += 1;
        c.find_descents += descents;
    });
}

#[inline]
pub(crate) fn eliminated(is_insert: bool) {
    bump(|c| {
        if is_insert {
            c.eliminated_inserts += 1
        } else {
            c.eliminated_deletes += 1
        }
    });
}

#[inline]
pub(crate) fn retry() {
    bump(|c| c.retries += 1);
}

/// Counters accumulated by the calling thread.
pub fn snapshot() -> OpCounters {
    COUNTERS.with(|c| c.get())
}

/// Zeroes the calling thread's counters and returns the old values.
pub fn take() -> OpCounters {
    COUNTERS.with(|c| c.replace(OpCounters::default()))
}
