use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ir::{Label, Region, Value};

/// One observation of the constant-time observer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Branch { taken: bool },
    /// In-bounds read: only the address is observed.
    Read { region: Region, address: u64 },
    Write { region: Region, address: u64 },
    /// Out-of-bounds application read: the read gadget observes the value.
    OobRead { address: u64, value: Value },
    OobWrite { address: u64 },
    Call { from: Label, to: Label, name: String },
    /// Carries the returned value only when control crosses from the
    /// library back to the application.
    Ret { name: String, from: Label, to: Label, value: Option<Value> },
    MemFault { address: u64 },
    /// A concurrent observer's read of unprotected memory during a library
    /// step.
    Snapshot { address: u64, value: Value },
    SpecStart { id: u32 },
    Rollback { id: u32 },
}

impl Event {
    pub fn is_crossing(&self) -> bool {
        match self {
            Event::Call { from, to, .. } | Event::Ret { from, to, .. } => from != to,
            _ => false,
        }
    }

    pub fn is_speculation_marker(&self) -> bool {
        matches!(self, Event::SpecStart { .. } | Event::Rollback { .. })
    }
}

fn label(l: Label) -> &'static str {
    match l {
        Label::App => "app",
        Label::Lib => "lib",
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::Branch { taken } => write!(f, "branch {}", *taken as u8),
            Event::Read { region, address } => write!(f, "read {region} {address}"),
            Event::Write { region, address } => write!(f, "write {region} {address}"),
            Event::OobRead { address, value } => write!(f, "oob_read {address} {value:#x}"),
            Event::OobWrite { address } => write!(f, "oob_write {address}"),
            Event::Call { from, to, name } => write!(f, "call {} {} {name}", label(*from), label(*to)),
            Event::Ret { name, from, to, value } => {
                write!(f, "ret {name} {} {}", label(*from), label(*to))?;
                match value {
                    Some(v) => write!(f, " {v:#x}"),
                    None => write!(f, " -"),
                }
            }
            Event::MemFault { address } => write!(f, "mem_fault {address}"),
            Event::Snapshot { address, value } => write!(f, "snapshot {address} {value:#x}"),
            Event::SpecStart { id } => write!(f, "spec_start {id}"),
            Event::Rollback { id } => write!(f, "rollback {id}"),
        }
    }
}

/// A maximal run of events executed in one domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub domain: Label,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trace {
    pub events: Vec<Event>,
}

impl Trace {
    pub fn new(events: Vec<Event>) -> Self {
        Trace { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Split the trace into alternating application and library segments.
    /// A crossing call or return closes the segment of the side that issued
    /// it. A rollback returns to the domain that was active at the matching
    /// speculation start.
    pub fn segments(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        let mut domain = Label::App;
        let mut start = 0;
        let mut spec_domains = Vec::new();
        for (i, e) in self.events.iter().enumerate() {
            let next = match e {
                Event::Call { from, to, .. } | Event::Ret { from, to, .. } if from != to => {
                    Some((*to, i + 1))
                }
                Event::SpecStart { .. } => {
                    spec_domains.push(domain);
                    None
                }
                Event::Rollback { .. } => match spec_domains.pop() {
                    Some(d) if d != domain => Some((d, i)),
                    _ => None,
                },
                _ => None,
            };
            if let Some((d, boundary)) = next {
                if boundary > start {
                    out.push(Segment { domain, start, end: boundary });
                }
                start = boundary;
                domain = d;
            }
        }
        if self.events.len() > start {
            out.push(Segment { domain, start, end: self.events.len() });
        }
        out
    }

    /// Events belonging to application segments.
    pub fn app_events(&self) -> impl Iterator<Item = &Event> {
        self.segments()
            .into_iter()
            .filter(|s| s.domain == Label::App)
            .flat_map(move |s| self.events[s.start..s.end].iter())
    }

    /// The trace with every speculation span deleted.
    pub fn without_speculation(&self) -> Trace {
        let mut depth = 0usize;
        let mut out = Vec::new();
        for e in &self.events {
            match e {
                Event::SpecStart { .. } => depth += 1,
                Event::Rollback { .. } => depth -= 1,
                _ if depth == 0 => out.push(e.clone()),
                _ => {}
            }
        }
        Trace::new(out)
    }

    /// One `EVENT kind payload...` line per event.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str("EVENT ");
            s.push_str(&e.to_string());
            s.push('\n');
        }
        s
    }
}

impl FromIterator<Event> for Trace {
    fn from_iter<I: IntoIterator<Item = Event>>(iter: I) -> Self {
        Trace::new(iter.into_iter().collect())
    }
}

/// Restrict a trace to what the observer is granted. Payload restrictions
/// are already applied when events are constructed (in-bounds accesses
/// carry no values), so this is currently the identity.
pub fn observable_projection(trace: &Trace) -> Trace {
    trace.clone()
}
