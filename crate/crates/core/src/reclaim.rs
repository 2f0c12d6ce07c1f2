//! Epoch-based deferred reclamation.
//!
//! Every dictionary operation pins once. A retired object is freed only after
//! the global epoch has advanced twice past its retirement epoch, which
//! requires every pinned thread to have announced a newer epoch.

use std::cell::{Cell, RefCell, UnsafeCell};
use std::collections::VecDeque;
use std::marker::PhantomData;
use std::sync::atomic::{fence, AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Weak};

#[cfg(debug_assertions)]
use parking_lot::Mutex;
#[cfg(debug_assertions)]
use std::collections::HashSet;

/// Attempt to advance the epoch every this many retirements per thread.
pub const ADVANCE_EVERY: usize = 64;

const MAX_THREADS: usize = 512;
const PINNED: u64 = 1;

static NEXT_MANAGER_ID: AtomicU64 = AtomicU64::new(1);

/// How a retired object is disposed of.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Disposal {
    Free,
    /// Overwrite with a poison pattern and leak. Lets stress tests detect
    /// reads of reclaimed memory without faulting.
    Poison,
}

/// Type-erased disposal routine for a retired object.
pub type Reclaimer = unsafe fn(*mut (), Disposal);

struct Retired {
    ptr: *mut (),
    reclaim: Reclaimer,
    bytes: usize,
    epoch: u64,
}

struct Slot {
    /// `epoch << 1 | PINNED`, or 0 when quiescent.
    announced: AtomicU64,
    in_use: AtomicBool,
    // Owner-only state.
    depth: Cell<usize>,
    since_advance: Cell<usize>,
    limbo: UnsafeCell<VecDeque<Retired>>,
}

impl Slot {
    fn new() -> Self {
        Self {
            announced: AtomicU64::new(0),
            in_use: AtomicBool::new(false),
            depth: Cell::new(0),
            since_advance: Cell::new(0),
            limbo: UnsafeCell::new(VecDeque::new()),
        }
    }
}

struct Inner {
    id: u64,
    epoch: AtomicU64,
    slots: Box<[Slot]>,
    high_water: AtomicUsize,
    disposal: Disposal,
    retired_bytes: AtomicU64,
    reclaimed_bytes: AtomicU64,
    retired_count: AtomicU64,
    reclaimed_count: AtomicU64,
    #[cfg(debug_assertions)]
    outstanding: Mutex<HashSet<usize>>,
}

// SAFETY: per-slot interior state is only touched by the thread that claimed
// the slot (or under `&mut`), shared fields are atomics.
unsafe impl Send for Inner {}
unsafe impl Sync for Inner {}

struct Registration {
    manager: u64,
    slot: usize,
    inner: Weak<Inner>,
}

struct Registry(RefCell<Vec<Registration>>);

impl Drop for Registry {
    fn drop(&mut self) {
        for reg in self.0.borrow_mut().drain(..) {
            if let Some(inner) = reg.inner.upgrade() {
                let slot = &inner.slots[reg.slot];
                slot.announced.store(0, Ordering::Release);
                slot.in_use.store(false, Ordering::Release);
            }
        }
    }
}

thread_local! {
    static REGISTRY: Registry = const { Registry(RefCell::new(Vec::new())) };
}

/// Snapshot of reclamation accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReclaimStats {
    pub epoch: u64,
    pub retired: u64,
    pub reclaimed: u64,
    pub retired_bytes: u64,
    pub reclaimed_bytes: u64,
}

impl ReclaimStats {
    pub fn pending(&self) -> u64 {
        self.retired - self.reclaimed
    }
}

pub struct EpochManager {
    inner: Arc<Inner>,
}

impl Default for EpochManager {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for EpochManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EpochManager")
            .field("id", &self.inner.id)
            .field("stats", &self.stats())
            .finish()
    }
}

impl EpochManager {
    pub fn new() -> Self {
        Self::with_disposal(Disposal::Free)
    }

    pub fn with_disposal(disposal: Disposal) -> Self {
        let slots = (0..MAX_THREADS).map(|_| Slot::new()).collect();
        Self {
            inner: Arc::new(Inner {
                id: NEXT_MANAGER_ID.fetch_add(1, Ordering::Relaxed),
                epoch: AtomicU64::new(0),
                slots,
                high_water: AtomicUsize::new(0),
                disposal,
                retired_bytes: AtomicU64::new(0),
                reclaimed_bytes: AtomicU64::new(0),
                retired_count: AtomicU64::new(0),
                reclaimed_count: AtomicU64::new(0),
                #[cfg(debug_assertions)]
                outstanding: Mutex::new(HashSet::new()),
            }),
        }
    }

    pub fn disposal(&self) -> Disposal {
        self.inner.disposal
    }

    pub fn epoch(&self) -> u64 {
        self.inner.epoch.load(Ordering::Acquire)
    }

    pub fn stats(&self) -> ReclaimStats {
        let i = &self.inner;
        ReclaimStats {
            epoch: i.epoch.load(Ordering::Acquire),
            retired: i.retired_count.load(Ordering::Acquire),
            reclaimed: i.reclaimed_count.load(Ordering::Acquire),
            retired_bytes: i.retired_bytes.load(Ordering::Acquire),
            reclaimed_bytes: i.reclaimed_bytes.load(Ordering::Acquire),
        }
    }

    fn local_slot(&self) -> usize {
        let id = self.inner.id;
        REGISTRY.with(|reg| {
            let mut regs = reg.0.borrow_mut();
            if let Some(r) = regs.iter().find(|r| r.manager == id) {
                return r.slot;
            }
            regs.retain(|r| r.inner.strong_count() > 0);
            let slot = self.claim_slot();
            regs.push(Registration {
                manager: id,
                slot,
                inner: Arc::downgrade(&self.inner),
            });
            slot
        })
    }

    fn claim_slot(&self) -> usize {
        for (idx, slot) in self.inner.slots.iter().enumerate() {
            if !slot.in_use.load(Ordering::Relaxed)
                && slot
                    .in_use
                    .compare_exchange(false, true, Ordering::AcqRel, Ordering::Relaxed)
                    .is_ok()
            {
                self.inner.high_water.fetch_max(idx + 1, Ordering::AcqRel);
                return idx;
            }
        }
        panic!("more than {MAX_THREADS} threads registered with one epoch manager");
    }

    /// Announces the current epoch for the calling thread. Links read while
    /// the guard lives stay valid memory.
    pub fn pin(&self) -> EpochGuard<'_> {
        let idx = self.local_slot();
        let slot = &self.inner.slots[idx];
        let depth = slot.depth.get();
        if depth == 0 {
            let e = self.inner.epoch.load(Ordering::Relaxed);
            slot.announced.store((e << 1) | PINNED, Ordering::Relaxed);
            fence(Ordering::SeqCst);
        }
        slot.depth.set(depth + 1);
        EpochGuard {
            manager: self,
            slot: idx,
            _not_send: PhantomData,
        }
    }

    fn try_advance(&self) -> bool {
        let inner = &*self.inner;
        let e = inner.epoch.load(Ordering::Relaxed);
        fence(Ordering::SeqCst);
        let hw = inner.high_water.load(Ordering::Acquire);
        for slot in &inner.slots[..hw] {
            let a = slot.announced.load(Ordering::Relaxed);
            if a & PINNED != 0 && (a >> 1) != e {
                return false;
            }
        }
        fence(Ordering::Acquire);
        inner
            .epoch
            .compare_exchange(e, e + 1, Ordering::Release, Ordering::Relaxed)
            .is_ok()
    }

    fn reclaim_one(&self, r: Retired) {
        #[cfg(debug_assertions)]
        self.inner.outstanding.lock().remove(&(r.ptr as usize));
        // SAFETY: `r` was retired exactly once, is unreachable, and the epoch
        // rule guarantees no pinned thread can still hold it.
        unsafe { (r.reclaim)(r.ptr, self.inner.disposal) };
        self.inner
            .reclaimed_bytes
            .fetch_add(r.bytes as u64, Ordering::Relaxed);
        self.inner.reclaimed_count.fetch_add(1, Ordering::Release);
    }

    fn collect_slot(&self, idx: usize) {
        let global = self.inner.epoch.load(Ordering::Acquire);
        let slot = &self.inner.slots[idx];
        loop {
            // SAFETY: only the owning thread touches its limbo list.
            let front = unsafe { &mut *slot.limbo.get() }.pop_front();
            match front {
                Some(r) if r.epoch + 2 <= global => self.reclaim_one(r),
                Some(r) => {
                    unsafe { &mut *slot.limbo.get() }.push_front(r);
                    break;
                }
                None => break,
            }
        }
    }

    /// Reclaims everything this thread retired that is already safe, after
    /// trying to advance the epoch. Used by tests and at quiescent points.
    pub fn collect(&self) {
        let idx = self.local_slot();
        for _ in 0..3 {
            if !self.try_advance() {
                break;
            }
        }
        self.collect_slot(idx);
    }

    /// Frees every retired object regardless of epochs. Exclusive access
    /// proves no thread is pinned.
    pub fn reclaim_all(&mut self) {
        let hw = self.inner.high_water.load(Ordering::Acquire);
        for idx in 0..hw {
            // SAFETY: `&mut self` excludes every concurrent pin/retire.
            let limbo = unsafe { &mut *self.inner.slots[idx].limbo.get() };
            let drained: Vec<_> = limbo.drain(..).collect();
            for r in drained {
                self.reclaim_one(r);
            }
        }
    }
}

impl Drop for EpochManager {
    fn drop(&mut self) {
        self.reclaim_all();
    }
}

/// A pinned region. Dropping it unpins once the outermost guard ends.
pub struct EpochGuard<'a> {
    manager: &'a EpochManager,
    slot: usize,
    _not_send: PhantomData<*mut ()>,
}

impl EpochGuard<'_> {
    pub fn manager(&self) -> &EpochManager {
        self.manager
    }

    /// Queues `ptr` for disposal once no pinned thread can reference it.
    ///
    /// # Safety
    /// `ptr` must be unlinked from every shared structure, retired at most
    /// once, and valid to pass to `reclaim`.
    pub unsafe fn retire(&self, ptr: *mut (), bytes: usize, reclaim: Reclaimer) {
        let inner = &*self.manager.inner;
        #[cfg(debug_assertions)]
        {
            let fresh = inner.outstanding.lock().insert(ptr as usize);
            assert!(fresh, "object {ptr:p} retired twice");
        }
        let epoch = inner.epoch.load(Ordering::SeqCst);
        let slot = &inner.slots[self.slot];
        unsafe { &mut *slot.limbo.get() }.push_back(Retired {
            ptr,
            reclaim,
            bytes,
            epoch,
        });
        inner.retired_bytes.fetch_add(bytes as u64, Ordering::Relaxed);
        inner.retired_count.fetch_add(1, Ordering::Release);
        let n = slot.since_advance.get() + 1;
        if n >= ADVANCE_EVERY {
            slot.since_advance.set(0);
            self.manager.try_advance();
            self.manager.collect_slot(self.slot);
        } else {
            slot.since_advance.set(n);
        }
    }

    /// Typed convenience over [`retire`](Self::retire) for boxed values.
    ///
    /// # Safety
    /// Same contract as `retire`; `ptr` must come from `Box::into_raw`.
    pub unsafe fn retire_box<T>(&self, ptr: *mut T) {
        unsafe fn drop_box<T>(p: *mut (), mode: Disposal) {
            match mode {
                Disposal::Free => drop(unsafe { Box::from_raw(p as *mut T) }),
                Disposal::Poison => unsafe {
                    std::ptr::write_bytes(p as *mut u8, 0xA5, std::mem::size_of::<T>())
                },
            }
        }
        unsafe { self.retire(ptr as *mut (), std::mem::size_of::<T>(), drop_box::<T>) }
    }
}

impl Drop for EpochGuard<'_> {
    fn drop(&mut self) {
        let slot = &self.manager.inner.slots[self.slot];
        let depth = slot.depth.get() - 1;
        slot.depth.set(depth);
        if depth == 0 {
            slot.announced.store(0, Ordering::Release);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicPtr;
    use std::sync::mpsc;
    use std::thread;

    #[test]
    fn pin_without_retire_reclaims_nothing() {
        let m = EpochManager::new();
        {
            let _g = m.pin();
        }
        m.collect();
        assert_eq!(m.stats().reclaimed, 0);
    }

    #[test]
    fn quiescent_retire_is_reclaimed_on_next_scan() {
        let m = EpochManager::new();
        {
            let g = m.pin();
            unsafe { g.retire_box(Box::into_raw(Box::new([0u64; 4]))) };
        }
        m.collect();
        let s = m.stats();
        assert_eq!((s.retired, s.reclaimed), (1, 1));
        assert_eq!(s.retired_bytes, 32);
        assert_eq!(s.reclaimed_bytes, 32);
    }

    #[test]
    fn pinned_reader_defers_reclamation() {
        let m = Arc::new(EpochManager::new());
        let (pinned_tx, pinned_rx) = mpsc::channel();
        let (release_tx, release_rx) = mpsc::channel::<()>();
        let reader = {
            let m = m.clone();
            thread::spawn(move || {
                let _g = m.pin();
                pinned_tx.send(()).unwrap();
                release_rx.recv().unwrap();
            })
        };
        pinned_rx.recv().unwrap();
        {
            let g = m.pin();
            unsafe { g.retire_box(Box::into_raw(Box::new(7u64))) };
        }
        for _ in 0..10 {
            m.collect();
        }
        assert_eq!(m.stats().reclaimed, 0, "reclaimed under a pinned reader");
        release_tx.send(()).unwrap();
        reader.join().unwrap();
        m.collect();
        assert_eq!(m.stats().reclaimed, 1);
    }

    #[test]
    #[cfg(debug_assertions)]
    #[should_panic(expected = "retired twice")]
    fn double_retire_is_fatal() {
        let m = EpochManager::new();
        let g = m.pin();
        let p = Box::into_raw(Box::new(1u64));
        unsafe {
            g.retire_box(p);
            g.retire_box(p);
        }
    }

    #[test]
    fn retired_bytes_match_reclaimed_at_shutdown() {
        let mut m = EpochManager::new();
        thread::scope(|s| {
            for t in 0..4u64 {
                let m = &m;
                s.spawn(move || {
                    for i in 0..1000u64 {
                        let g = m.pin();
                        let b = Box::new([t, i, 0]);
                        unsafe { g.retire_box(Box::into_raw(b)) };
                    }
                });
            }
        });
        m.reclaim_all();
        let s = m.stats();
        assert_eq!(s.retired, 4000);
        assert_eq!(s.retired_bytes, s.reclaimed_bytes);
        assert_eq!(s.pending(), 0);
    }

    const LIVE: u64 = 0x5eed_0000_0000_0000;

    #[test]
    fn readers_never_observe_poison() {
        // Readers chase a shared pointer that writers keep swapping and
        // retiring; reclaimed payloads are poisoned and leaked.
        let m = EpochManager::with_disposal(Disposal::Poison);
        let shared = AtomicPtr::new(Box::into_raw(Box::new([LIVE; 8])));
        let stop = AtomicBool::new(false);
        let reads = AtomicU64::new(0);
        thread::scope(|s| {
            for _ in 0..6 {
                s.spawn(|| {
                    while !stop.load(Ordering::Relaxed) {
                        // Yield unpinned: a reader descheduled while pinned
                        // stalls the epoch for a whole time slice.
                        thread::yield_now();
                        let _g = m.pin();
                        let p = shared.load(Ordering::Acquire);
                        let words = unsafe { &*(p as *const [AtomicU64; 8]) };
                        for _ in 0..4 {
                            for w in words {
                                let v = w.load(Ordering::Relaxed);
                                assert_eq!(v & 0xffff_0000_0000_0000, LIVE, "poison observed");
                            }
                        }
                        reads.fetch_add(1, Ordering::Relaxed);
                    }
                });
            }
            let writers: Vec<_> = (0..2)
                .map(|_| {
                    s.spawn(|| {
                        for i in 0..20_000u64 {
                            let g = m.pin();
                            let fresh = Box::into_raw(Box::new([LIVE | i; 8]));
                            let old = shared.swap(fresh, Ordering::AcqRel);
                            unsafe { g.retire_box(old) };
                            drop(g);
                            if i % 64 == 0 {
                                thread::yield_now();
                            }
                        }
                    })
                })
                .collect();
            for w in writers {
                w.join().unwrap();
            }
            stop.store(true, Ordering::Relaxed);
        });
        let reclaimed = m.stats().reclaimed;
        assert!(reclaimed >= 1000, "only {reclaimed} reclaimed");
        assert!(reads.load(Ordering::Relaxed) >= 1000);
        unsafe { drop(Box::from_raw(shared.load(Ordering::Relaxed))) };
    }
}
