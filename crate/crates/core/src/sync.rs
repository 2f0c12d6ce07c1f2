//! Per-node synchronization: an MCS-style queue lock and the leaf sequence
//! version used by optimistic readers.

use std::cell::{Cell, RefCell};
use std::hint::spin_loop;
use std::marker::PhantomData;
use std::ptr::{self, NonNull};
use std::sync::atomic::{fence, AtomicBool, AtomicPtr, AtomicU64, Ordering};
use std::thread;

/// Spin-then-yield waiting. Spinning forever is pathological once threads
/// outnumber cores, so after a short burst every wait step yields.
#[derive(Debug, Default)]
pub struct Backoff {
    step: u32,
}

impl Backoff {
    const SPIN_LIMIT: u32 = 6;

    pub fn new() -> Self {
        Self { step: 0 }
    }

    #[inline]
    pub fn snooze(&mut self) {
        if let Some(hook) = WAIT_HOOK.with(Cell::get) {
            hook();
            return;
        }
        if self.step <= Self::SPIN_LIMIT {
            for _ in 0..(1u32 << self.step) {
                spin_loop();
            }
            self.step += 1;
        } else {
            thread::yield_now();
        }
    }
}

thread_local! {
    static WAIT_HOOK: Cell<Option<fn()>> = const { Cell::new(None) };
}

/// Replaces the calling thread's wait step. Deterministic schedulers use it
/// to hand control to the thread being waited for.
pub fn set_wait_hook(hook: Option<fn()>) {
    WAIT_HOOK.with(|h| h.set(hook));
}

struct Waiter {
    waiting: AtomicBool,
    next: AtomicPtr<Waiter>,
}

impl Waiter {
    fn new() -> Self {
        Self {
            waiting: AtomicBool::new(false),
            next: AtomicPtr::new(ptr::null_mut()),
        }
    }
}

thread_local! {
    // Waiter records are recycled per thread; a record is only referenced by
    // other threads between enqueue and the end of its release. Boxed so a
    // record keeps its address while the pool vector grows.
    #[allow(clippy::vec_box)]
    static WAITER_POOL: RefCell<Vec<Box<Waiter>>> = const { RefCell::new(Vec::new()) };
}

fn take_waiter() -> NonNull<Waiter> {
    let boxed = WAITER_POOL
        .try_with(|pool| pool.borrow_mut().pop())
        .ok()
        .flatten()
        .unwrap_or_else(|| Box::new(Waiter::new()));
    boxed.waiting.store(true, Ordering::Relaxed);
    boxed.next.store(ptr::null_mut(), Ordering::Relaxed);
    NonNull::from(Box::leak(boxed))
}

fn return_waiter(rec: NonNull<Waiter>) {
    // SAFETY: `rec` came from `Box::leak` in `take_waiter` and is no longer
    // reachable from any queue.
    let boxed = unsafe { Box::from_raw(rec.as_ptr()) };
    let _ = WAITER_POOL.try_with(|pool| pool.borrow_mut().push(boxed));
}

/// FIFO queue lock. Waiters spin only on their own record.
pub struct QueueLock {
    tail: AtomicPtr<Waiter>,
}

impl Default for QueueLock {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for QueueLock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QueueLock")
            .field("locked", &self.is_locked())
            .finish()
    }
}

impl QueueLock {
    pub const fn new() -> Self {
        Self {
            tail: AtomicPtr::new(ptr::null_mut()),
        }
    }

    /// Blocks until the caller is the sole holder.
    pub fn acquire(&self) -> LockGuard<'_> {
        let rec = take_waiter();
        let prev = self.tail.swap(rec.as_ptr(), Ordering::AcqRel);
        if !prev.is_null() {
            // SAFETY: the predecessor cannot finish releasing until it has seen
            // this link, so its record is still alive.
            unsafe { (*prev).next.store(rec.as_ptr(), Ordering::Release) };
            let mut backoff = Backoff::new();
            // SAFETY: `rec` is owned by this acquisition.
            while unsafe { rec.as_ref() }.waiting.load(Ordering::Acquire) {
                backoff.snooze();
            }
        }
        LockGuard::new(self, rec)
    }

    /// Single compare-exchange of the tail from empty to the caller's record.
    /// Never joins the queue.
    pub fn try_acquire(&self) -> Option<LockGuard<'_>> {
        if !self.tail.load(Ordering::Relaxed).is_null() {
            return None;
        }
        let rec = take_waiter();
        match self.tail.compare_exchange(
            ptr::null_mut(),
            rec.as_ptr(),
            Ordering::AcqRel,
            Ordering::Relaxed,
        ) {
            Ok(_) => Some(LockGuard::new(self, rec)),
            Err(_) => {
                return_waiter(rec);
                None
            }
        }
    }

    pub fn is_locked(&self) -> bool {
        !self.tail.load(Ordering::Acquire).is_null()
    }

    #[cfg(test)]
    fn tail_addr(&self) -> usize {
        self.tail.load(Ordering::Acquire) as usize
    }

    fn release(&self, rec: NonNull<Waiter>) {
        // SAFETY: `rec` belongs to the current holder.
        let me = unsafe { rec.as_ref() };
        let mut next = me.next.load(Ordering::Acquire);
        if next.is_null() {
            if self
                .tail
                .compare_exchange(
                    rec.as_ptr(),
                    ptr::null_mut(),
                    Ordering::AcqRel,
                    Ordering::Relaxed,
                )
                .is_ok()
            {
                return_waiter(rec);
                return;
            }
            // A successor swapped itself in but has not linked yet.
            let mut backoff = Backoff::new();
            loop {
                next = me.next.load(Ordering::Acquire);
                if !next.is_null() {
                    break;
                }
                backoff.snooze();
            }
        }
        // SAFETY: the successor is spinning on its record and keeps it alive.
        unsafe { (*next).waiting.store(false, Ordering::Release) };
        return_waiter(rec);
    }
}

/// Proof of holding a [`QueueLock`]. Not transferable between threads.
#[must_use = "the lock is released when the guard is dropped"]
pub struct LockGuard<'a> {
    lock: &'a QueueLock,
    rec: NonNull<Waiter>,
    _not_send: PhantomData<*mut ()>,
}

impl<'a> LockGuard<'a> {
    fn new(lock: &'a QueueLock, rec: NonNull<Waiter>) -> Self {
        Self {
            lock,
            rec,
            _not_send: PhantomData,
        }
    }

    pub fn lock(&self) -> &'a QueueLock {
        self.lock
    }
}

impl Drop for LockGuard<'_> {
    fn drop(&mut self) {
        self.lock.release(self.rec);
    }
}

/// Even when the guarded leaf is stable, odd while a modification is in
/// progress. Wraparound of the 64-bit counter is ignored.
#[derive(Debug, Default)]
pub struct SeqVersion {
    ver: AtomicU64,
}

impl SeqVersion {
    pub const fn new() -> Self {
        Self {
            ver: AtomicU64::new(0),
        }
    }

    /// Reader side: the current version with acquire ordering.
    #[inline]
    pub fn load(&self) -> u64 {
        self.ver.load(Ordering::Acquire)
    }

    /// Reader side: true iff no write intervened since `start` was sampled.
    /// Orders all preceding relaxed payload reads before the re-check.
    #[inline]
    pub fn validate(&self, start: u64) -> bool {
        fence(Ordering::Acquire);
        self.ver.load(Ordering::Relaxed) == start
    }

    /// Writer side; the caller must hold the owning node's lock.
    /// Returns the (odd) version now in effect.
    #[inline]
    pub fn begin_write(&self) -> u64 {
        let v = self.ver.load(Ordering::Relaxed);
        assert!(v.is_multiple_of(2), "begin_write on odd version {v}");
        self.ver.store(v + 1, Ordering::Relaxed);
        fence(Ordering::Release);
        v + 1
    }

    #[inline]
    pub fn end_write(&self) {
        let v = self.ver.load(Ordering::Relaxed);
        assert!(v % 2 == 1, "end_write on even version {v}");
        self.ver.store(v + 1, Ordering::Release);
    }
}
