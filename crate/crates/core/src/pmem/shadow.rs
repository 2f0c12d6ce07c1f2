//! Cache-line granular persistent memory simulation.
//!
//! Memory is carved into fixed-size regions, one per tree node. Each 64-byte
//! line keeps a volatile copy (what loads would see), a persisted copy (what
//! survives a crash) and, between a flush and the flushing thread's next
//! fence, the snapshot taken by the flush. A crash may or may not persist
//! such pending snapshots.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use crate::tree::Phase;

pub const LINE_WORDS: usize = 8;
pub const LINE_BYTES: u64 = 64;
pub const REGION_LINES: usize = 3;
pub const REGION_WORDS: usize = REGION_LINES * LINE_WORDS;
/// Regions are 256-byte aligned, which leaves the low address bits free for
/// link marks.
pub const REGION_BYTES: u64 = 256;
/// Region of the entry node: the first one handed out.
pub const ENTRY_REGION: u64 = REGION_BYTES;

/// Word offsets inside a region.
pub const WORD_KIND: usize = 0;
pub const WORD_SEARCH_KEY: usize = 1;
pub const WORD_KEYS: usize = 2;
pub const WORD_SLOTS: usize = 13;

const CHUNK_REGIONS: usize = 64;
const DIR_CHUNKS: usize = 1024;
const TOP_DIRS: usize = 1024;

#[derive(Clone, Copy, Default)]
struct Line {
    vol: [u64; LINE_WORDS],
    pers: [u64; LINE_WORDS],
    pending: Option<[u64; LINE_WORDS]>,
}

#[derive(Default)]
struct Region {
    live: AtomicBool,
    lines: [Mutex<Line>; REGION_LINES],
}

struct Chunk {
    regions: [Region; CHUNK_REGIONS],
}

struct Dir {
    chunks: [AtomicPtr<Chunk>; DIR_CHUNKS],
}

/// Kind of simulated persistence instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PersistEvent {
    Flush { line: u64 },
    Fence,
}

/// Called after every flush and fence while installed.
pub type Observer = dyn Fn(&ShadowMemory, PersistEvent, Option<Phase>) + Send + Sync;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    // Lines flushed by this thread and not yet fenced, tagged with the
    // owning memory's id.
    static PENDING: RefCell<Vec<(u64, u64)>> = const { RefCell::new(Vec::new()) };
    static PHASE: std::cell::Cell<Option<Phase>> = const { std::cell::Cell::new(None) };
}

/// Persisted contents, line address to words. Absent lines read as zero.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct PersistentImage {
    pub lines: BTreeMap<u64, [u64; LINE_WORDS]>,
}

impl PersistentImage {
    pub fn word(&self, addr: u64) -> u64 {
        let line = addr & !(LINE_BYTES - 1);
        let idx = ((addr % LINE_BYTES) / 8) as usize;
        self.lines.get(&line).map_or(0, |l| l[idx])
    }

    pub fn region_word(&self, region: u64, word: usize) -> u64 {
        self.word(region + 8 * word as u64)
    }

    /// This image with some pending line snapshots applied on top.
    pub fn overlay<'a>(&self, lines: impl IntoIterator<Item = &'a (u64, [u64; LINE_WORDS])>) -> Self {
        let mut out = self.clone();
        for &(addr, words) in lines {
            out.lines.insert(addr, words);
        }
        out
    }
}

/// Persisted image plus the lines whose persistence is undecided.
#[derive(Clone, Debug, Default)]
pub struct CrashImage {
    pub persisted: PersistentImage,
    pub pending: Vec<(u64, [u64; LINE_WORDS])>,
}

pub struct ShadowMemory {
    id: u64,
    top: Box<[AtomicPtr<Dir>]>,
    next_region: AtomicU64,
    free: Mutex<Vec<u64>>,
    observed: AtomicBool,
    observer: RwLock<Option<Arc<Observer>>>,
}

// SAFETY: all interior state is atomics, locks, or lazily published
// immutable directory pages.
unsafe impl Send for ShadowMemory {}
unsafe impl Sync for ShadowMemory {}

impl Default for ShadowMemory {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for ShadowMemory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShadowMemory")
            .field("id", &self.id)
            .field("regions", &self.next_region.load(Ordering::Relaxed))
            .finish_non_exhaustive()
    }
}

impl ShadowMemory {
    pub fn new() -> Self {
        Self {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            top: (0..TOP_DIRS).map(|_| AtomicPtr::new(std::ptr::null_mut())).collect(),
            // Region 0 stays unused so that address 0 means "no link".
            next_region: AtomicU64::new(1),
            free: Mutex::new(Vec::new()),
            observed: AtomicBool::new(false),
            observer: RwLock::new(None),
        }
    }

    fn region(&self, index: u64) -> Option<&Region> {
        let index = index as usize;
        let chunk = index / CHUNK_REGIONS;
        let dir = self.top.get(chunk / DIR_CHUNKS)?.load(Ordering::Acquire);
        if dir.is_null() {
            return None;
        }
        // SAFETY: published directories and chunks live until drop.
        let c = unsafe { &*dir }.chunks[chunk % DIR_CHUNKS].load(Ordering::Acquire);
        if c.is_null() {
            return None;
        }
        Some(unsafe { &(*c).regions[index % CHUNK_REGIONS] })
    }

    fn region_or_create(&self, index: u64) -> &Region {
        let index = index as usize;
        let chunk = index / CHUNK_REGIONS;
        let slot = self.top.get(chunk / DIR_CHUNKS).expect("simulated persistent memory exhausted");
        let mut dir = slot.load(Ordering::Acquire);
        if dir.is_null() {
            let fresh = Box::into_raw(Box::new(Dir {
                chunks: std::array::from_fn(|_| AtomicPtr::new(std::ptr::null_mut())),
            }));
            match slot.compare_exchange(std::ptr::null_mut(), fresh, Ordering::AcqRel, Ordering::Acquire) {
                Ok(_) => dir = fresh,
                Err(cur) => {
                    // SAFETY: never published.
                    drop(unsafe { Box::from_raw(fresh) });
                    dir = cur;
                }
            }
        }
        // SAFETY: published directories live until drop.
        let cslot = &unsafe { &*dir }.chunks[chunk % DIR_CHUNKS];
        let mut c = cslot.load(Ordering::Acquire);
        if c.is_null() {
            let fresh = Box::into_raw(Box::new(Chunk {
                regions: std::array::from_fn(|_| Region::default()),
            }));
            match cslot.compare_exchange(std::ptr::null_mut(), fresh, Ordering::AcqRel, Ordering::Acquire) {
                Ok(_) => c = fresh,
                Err(cur) => {
                    drop(unsafe { Box::from_raw(fresh) });
                    c = cur;
                }
            }
        }
        unsafe { &(*c).regions[index % CHUNK_REGIONS] }
    }

    fn live_region(&self, addr: u64) -> &Region {
        match self.region(addr / REGION_BYTES) {
            Some(r) if r.live.load(Ordering::Acquire) => r,
            _ => panic!("access to unregistered persistent address {addr:#x}"),
        }
    }

    /// Registers a zeroed region and returns its base address.
    pub fn alloc_region(&self) -> u64 {
        let index = self
            .free
            .lock()
            .pop()
            .unwrap_or_else(|| self.next_region.fetch_add(1, Ordering::Relaxed));
        let r = self.region_or_create(index);
        for l in &r.lines {
            *l.lock() = Line::default();
        }
        r.live.store(true, Ordering::Release);
        index * REGION_BYTES
    }

    /// Unregisters a region. Its contents leave every later crash image.
    pub fn free_region(&self, base: u64) {
        let r = self.live_region(base);
        r.live.store(false, Ordering::Release);
        self.free.lock().push(base / REGION_BYTES);
    }

    pub fn live_regions(&self) -> usize {
        let hi = self.next_region.load(Ordering::Relaxed);
        (1..hi)
            .filter(|&i| self.region(i).is_some_and(|r| r.live.load(Ordering::Acquire)))
            .count()
    }

    fn line_of(&self, addr: u64) -> (&Mutex<Line>, usize) {
        let r = self.live_region(addr);
        let off = addr % REGION_BYTES;
        let line = (off / LINE_BYTES) as usize;
        assert!(line < REGION_LINES, "address {addr:#x} beyond region");
        (&r.lines[line], ((off % LINE_BYTES) / 8) as usize)
    }

    /// Updates the volatile copy of one word.
    pub fn durable_store(&self, addr: u64, value: u64) {
        let (line, w) = self.line_of(addr);
        line.lock().vol[w] = value;
    }

    /// Volatile value of one word.
    pub fn load(&self, addr: u64) -> u64 {
        let (line, w) = self.line_of(addr);
        line.lock().vol[w]
    }

    /// Persisted value of one word.
    pub fn load_persisted(&self, addr: u64) -> u64 {
        let (line, w) = self.line_of(addr);
        line.lock().pers[w]
    }

    /// Writes the volatile copy of a whole region.
    pub fn init_region(&self, base: u64, words: &[u64; REGION_WORDS]) {
        let r = self.live_region(base);
        for (i, l) in r.lines.iter().enumerate() {
            l.lock().vol.copy_from_slice(&words[i * LINE_WORDS..(i + 1) * LINE_WORDS]);
        }
    }

    /// Snapshots the line holding `addr` for persistence at the next fence
    /// by this thread.
    pub fn flush_line(&self, addr: u64) {
        let base = addr & !(LINE_BYTES - 1);
        let (line, _) = self.line_of(base);
        {
            let mut l = line.lock();
            l.pending = Some(l.vol);
        }
        let id = self.id;
        PENDING.with(|p| p.borrow_mut().push((id, base)));
        self.notify(PersistEvent::Flush { line: base });
    }

    /// Persists every line this thread flushed since its last fence.
    pub fn fence(&self) {
        let id = self.id;
        PENDING.with(|p| {
            let mut p = p.borrow_mut();
            // Lines within one fence persist in no particular order.
            let mut i = 0;
            while i < p.len() {
                if p[i].0 != id {
                    i += 1;
                    continue;
                }
                let (_, base) = p.swap_remove(i);
                if let Some(r) = self.region(base / REGION_BYTES).filter(|r| r.live.load(Ordering::Acquire)) {
                    let mut l = r.lines[((base % REGION_BYTES) / LINE_BYTES) as usize].lock();
                    if let Some(snap) = l.pending.take() {
                        l.pers = snap;
                    }
                }
            }
        });
        self.notify(PersistEvent::Fence);
    }

    /// Labels this thread's subsequent persistence events.
    pub fn set_phase(&self, phase: Phase) {
        PHASE.with(|p| p.set(Some(phase)));
    }

    pub fn clear_phase(&self) {
        PHASE.with(|p| p.set(None));
    }

    pub fn set_observer(&self, observer: Option<Arc<Observer>>) {
        self.observed.store(observer.is_some(), Ordering::Release);
        *self.observer.write() = observer;
    }

    #[inline(always)]
    fn notify(&self, ev: PersistEvent) {
        if self.observed.load(Ordering::Acquire) {
            self.notify_observer(ev);
        }
    }

    #[cold]
    #[inline(never)]
    fn notify_observer(&self, ev: PersistEvent) {
        let obs = self.observer.read().clone();
        if let Some(obs) = obs {
            obs(self, ev, PHASE.with(|p| p.get()));
        }
    }

    /// Persisted contents of all registered regions plus the pending lines.
    /// Meaningful only while no thread is storing.
    pub fn crash_image(&self) -> CrashImage {
        let mut img = CrashImage::default();
        let hi = self.next_region.load(Ordering::Acquire);
        for i in 1..hi {
            let Some(r) = self.region(i) else { continue };
            if !r.live.load(Ordering::Acquire) {
                continue;
            }
            for (j, l) in r.lines.iter().enumerate() {
                let l = l.lock();
                let addr = i * REGION_BYTES + j as u64 * LINE_BYTES;
                if l.pers != [0; LINE_WORDS] {
                    img.persisted.lines.insert(addr, l.pers);
                }
                if let Some(p) = l.pending {
                    if p != l.pers {
                        img.pending.push((addr, p));
                    }
                }
            }
        }
        img
    }
}

impl Drop for ShadowMemory {
    fn drop(&mut self) {
        for d in self.top.iter() {
            let d = d.load(Ordering::Acquire);
            if d.is_null() {
                continue;
            }
            // SAFETY: exclusive access; every page was created by Box.
            let dir = unsafe { Box::from_raw(d) };
            for c in dir.chunks.iter() {
                let c = c.load(Ordering::Acquire);
                if !c.is_null() {
                    drop(unsafe { Box::from_raw(c) });
                }
            }
        }
        let id = self.id;
        let _ = PENDING.try_with(|p| p.borrow_mut().retain(|&(owner, _)| owner != id));
    }
}
