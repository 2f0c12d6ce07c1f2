use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;

use crate::tree::Dictionary;

/// One dictionary operation with its arguments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    Insert(u64, u64),
    Delete(u64),
    Find(u64),
}

impl Op {
    pub fn key(self) -> u64 {
        match self {
            Op::Insert(k, _) | Op::Delete(k) | Op::Find(k) => k,
        }
    }

    pub fn kind(self) -> OpKind {
        match self {
            Op::Insert(..) => OpKind::Insert,
            Op::Delete(_) => OpKind::Delete,
            Op::Find(_) => OpKind::Find,
        }
    }

    pub fn arg(self) -> u64 {
        match self {
            Op::Insert(_, v) => v,
            _ => 0,
        }
    }

    pub fn apply<D: Dictionary + ?Sized>(self, d: &D) -> Option<u64> {
        match self {
            Op::Insert(k, v) => d.insert(k, v),
            Op::Delete(k) => d.delete(k),
            Op::Find(k) => d.find(k),
        }
    }

    pub fn is_update(self) -> bool {
        !matches!(self, Op::Find(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Insert,
    Delete,
    Find,
}

impl OpKind {
    pub fn with(self, key: u64, arg: u64) -> Op {
        match self {
            OpKind::Insert => Op::Insert(key, arg),
            OpKind::Delete => Op::Delete(key),
            OpKind::Find => Op::Find(key),
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpKind::Insert => "insert",
            OpKind::Delete => "delete",
            OpKind::Find => "find",
        })
    }
}

/// Outcome of an operation in a history.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Response {
    Returned(Option<u64>),
    /// Interrupted by a crash. `keep` is set when the operation's effect is
    /// known to be durable, so it must be linearized before the crash.
    Pending { keep: bool },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct HistoryEvent {
    pub tid: usize,
    pub op: Op,
    pub inv_ts: u64,
    /// `None` for operations interrupted by a crash.
    pub resp_ts: Option<u64>,
    pub resp: Response,
    /// Number of crashes before this operation's invocation.
    pub era: u32,
}

impl HistoryEvent {
    pub fn completed(&self) -> bool {
        self.resp_ts.is_some()
    }

    pub fn returned(&self) -> Option<Option<u64>> {
        match self.resp {
            Response::Returned(v) => Some(v),
            Response::Pending { .. } => None,
        }
    }
}

/// A concurrent history. Events are ordered by invocation time; `crashes`
/// counts the eras after the first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct History {
    pub events: Vec<HistoryEvent>,
}

impl History {
    pub fn new(mut events: Vec<HistoryEvent>) -> Self {
        events.sort_by_key(|e| (e.era, e.inv_ts));
        Self { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn eras(&self) -> u32 {
        self.events.iter().map(|e| e.era).max().map_or(1, |m| m + 1)
    }

    /// Text form, one event per line:
    /// `tid kind key arg inv_ts resp_ts resp_val`, with `-` for absent
    /// values. A line `crash` separates eras. Interrupted operations have
    /// resp_ts `-` and resp_val `keep` or `drop`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut era = 0;
        for e in &self.events {
            while era < e.era {
                out.push_str("crash\n");
                era += 1;
            }
            let resp_ts = e.resp_ts.map_or("-".to_string(), |t| t.to_string());
            let resp = match e.resp {
                Response::Returned(Some(v)) => v.to_string(),
                Response::Returned(None) => "-".to_string(),
                Response::Pending { keep: true } => "keep".to_string(),
                Response::Pending { keep: false } => "drop".to_string(),
            };
            out.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                e.tid,
                e.op.kind(),
                e.op.key(),
                e.op.arg(),
                e.inv_ts,
                resp_ts,
                resp
            ));
        }
        out
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("history line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

impl FromStr for History {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut events = Vec::new();
        let mut era = 0;
        for (i, raw) in s.lines().enumerate() {
            let line = i + 1;
            let err = |msg: &str| ParseError { line, msg: msg.to_string() };
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            if raw == "crash" {
                era += 1;
                continue;
            }
            let f: Vec<&str> = raw.split_whitespace().collect();
            if f.len() != 7 {
                return Err(err("expected 7 fields"));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|_| err(&format!("bad number {s:?}")));
            let kind = match f[1] {
                "insert" => OpKind::Insert,
                "delete" => OpKind::Delete,
                "find" => OpKind::Find,
                k => return Err(err(&format!("unknown op {k:?}"))),
            };
            let resp_ts = if f[5] == "-" { None } else { Some(num(f[5])?) };
            let resp = match (resp_ts, f[6]) {
                (None, "keep") => Response::Pending { keep: true },
                (None, "drop") => Response::Pending { keep: false },
                (None, _) => return Err(err("interrupted op needs keep or drop")),
                (Some(_), "-") => Response::Returned(None),
                (Some(_), v) => Response::Returned(Some(num(v)?)),
            };
            let inv_ts = num(f[4])?;
            if resp_ts.is_some_and(|r| r <= inv_ts) {
                return Err(err("response before invocation"));
            }
            events.push(HistoryEvent {
                tid: f[0].parse().map_err(|_| err("bad tid"))?,
                op: kind.with(num(f[2])?, num(f[3])?),
                inv_ts,
                resp_ts,
                resp,
                era,
            });
        }
        Ok(History::new(events))
    }
}

/// Shared logical clock plus per-thread event buffers.
#[derive(Debug, Default)]
pub struct Recorder {
    clock: AtomicU64,
    logs: Mutex<Vec<HistoryEvent>>,
}

impl Recorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn thread(&self, tid: usize) -> ThreadLog<'_> {
        ThreadLog {
            rec: self,
            tid,
            events: Vec::new(),
        }
    }

    pub fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::SeqCst) + 1
    }

    pub fn into_history(self) -> History {
        History::new(self.logs.into_inner())
    }
}

/// Event buffer of one thread, merged into the recorder on drop.
pub struct ThreadLog<'r> {
    rec: &'r Recorder,
    tid: usize,
    events: Vec<HistoryEvent>,
}

impl ThreadLog<'_> {
    /// Runs `op` on `d`, timestamping around the call.
    pub fn run<D: Dictionary + ?Sized>(&mut self, d: &D, op: Op) -> Option<u64> {
        let inv_ts = self.rec.tick();
        let r = op.apply(d);
        let resp_ts = self.rec.tick();
        self.events.push(HistoryEvent {
            tid: self.tid,
            op,
            inv_ts,
            resp_ts: Some(resp_ts),
            resp: Response::Returned(r),
            era: 0,
        });
        r
    }

    pub fn events(&self) -> &[HistoryEvent] {
        &self.events
    }
}

impl Drop for ThreadLog<'_> {
    fn drop(&mut self) {
        self.rec.logs.lock().append(&mut self.events);
    }
}
