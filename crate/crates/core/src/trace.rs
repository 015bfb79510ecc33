//! Time-stamped ballot events, with a CSV reader and writer.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACE_HEADER: [&str; 5] = ["timestamp_sec", "task_id", "worker_id", "label", "pay_level"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BallotEvent {
    pub timestamp_sec: u64,
    pub task_id: u32,
    pub worker_id: u32,
    pub label: u8,
    pub pay_level: usize,
}

/// Ordered ballot events. Timestamps are nondecreasing and simultaneous
/// events are ordered by `(task_id, worker_id)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BallotTrace {
    events: Vec<BallotEvent>,
}

impl BallotTrace {
    pub fn new(mut events: Vec<BallotEvent>) -> Result<Self> {
        if let Some(e) = events.iter().find(|e| e.label > 1) {
            return Err(Error::InvalidInput(format!("non-binary label {} for task {}", e.label, e.task_id)));
        }
        events.sort_by_key(|e| (e.timestamp_sec, e.task_id, e.worker_id));
        Ok(Self { events })
    }

    /// Appends an event produced in time order; used by the simulator.
    pub(crate) fn push(&mut self, event: BallotEvent) {
        debug_assert!(self.events.last().is_none_or(|l| l.timestamp_sec <= event.timestamp_sec));
        self.events.push(event);
    }

    pub fn events(&self) -> &[BallotEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn validate_pay_levels(&self, levels: usize) -> Result<()> {
        match self.events.iter().find(|e| e.pay_level >= levels) {
            Some(e) => Err(Error::InvalidInput(format!(
                "pay level {} outside a grid of {levels} levels",
                e.pay_level
            ))),
            None => Ok(()),
        }
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().ne(TRACE_HEADER.iter().copied()) {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{}`, found `{}`", TRACE_HEADER.join(","), headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut events = Vec::new();
        let mut last_ts = 0;
        for record in rdr.deserialize::<BallotEvent>() {
            let event = record.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = events.len() as u64 + 2;
            if event.label > 1 {
                return Err(Error::Parse { line, message: format!("label must be 0 or 1, got {}", event.label) });
            }
            if event.timestamp_sec < last_ts {
                return Err(Error::Parse {
                    line,
                    message: format!("timestamp {} decreases from {last_ts}", event.timestamp_sec),
                });
            }
            last_ts = event.timestamp_sec;
            events.push(event);
        }
        Self::new(events)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for e in &self.events {
            wtr.serialize(e)?;
        }
        if self.events.is_empty() {
            wtr.write_record(TRACE_HEADER)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

pub const GOLD_HEADER: [&str; 2] = ["task_id", "label"];

#[derive(Debug, Deserialize)]
struct GoldRow {
    task_id: usize,
    label: u8,
}

/// Reads `task_id,label` rows. Every task in `0..n` must appear exactly once.
pub fn read_gold_csv<R: Read>(reader: R) -> Result<Vec<u8>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(GOLD_HEADER.iter().copied()) {
        return Err(Error::Parse { line: 1, message: format!("expected header `{}`", GOLD_HEADER.join(",")) });
    }
    let mut labels: Vec<Option<u8>> = Vec::new();
    for (i, row) in rdr.deserialize::<GoldRow>().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if row.label > 1 {
            return Err(Error::Parse { line, message: format!("label must be 0 or 1, got {}", row.label) });
        }
        if labels.len() <= row.task_id {
            labels.resize(row.task_id + 1, None);
        }
        if labels[row.task_id].replace(row.label).is_some() {
            return Err(Error::Parse { line, message: format!("task {} labelled twice", row.task_id) });
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(t, l)| l.ok_or_else(|| Error::InvalidInput(format!("task {t} has no gold label"))))
        .collect()
}

pub fn write_gold_csv<W: Write>(labels: &[u8], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(GOLD_HEADER)?;
    for (t, l) in labels.iter().enumerate() {
        wtr.write_record([t.to_string(), l.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let trace = BallotTrace::new(vec![
            BallotEvent { timestamp_sec: 5, task_id: 2, worker_id: 1, label: 1, pay_level: 0 },
            BallotEvent { timestamp_sec: 5, task_id: 1, worker_id: 3, label: 0, pay_level: 2 },
            BallotEvent { timestamp_sec: 0, task_id: 7, worker_id: 0, label: 1, pay_level: 1 },
        ])
        .unwrap();
        assert_eq!(trace.events()[0].task_id, 7);
        assert_eq!(trace.events()[1].task_id, 1);
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("timestamp_sec,task_id,worker_id,label,pay_level\n"));
        assert_eq!(BallotTrace::read_csv(buf.as_slice()).unwrap(), trace);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "timestamp_sec,task_id,worker_id,label,pay_level\n0,1,1,1,0\n3,1,2,x,0\n";
        match BallotTrace::read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let text = "timestamp_sec,task_id,worker_id,label,pay_level\n0,1,1,1,0\n1,1,2,2,0\n";
        assert!(matches!(BallotTrace::read_csv(text.as_bytes()), Err(Error::Parse { line: 3, .. })));
        let text = "timestamp_sec,task_id,worker_id,label,pay_level\n9,1,1,1,0\n4,1,2,0,0\n";
        assert!(matches!(BallotTrace::read_csv(text.as_bytes()), Err(Error::Parse { line: 3, .. })));
        let text = "ts,task,worker,label,pay\n";
        assert!(matches!(BallotTrace::read_csv(text.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn pay_levels_are_checked() {
        let trace = BallotTrace::new(vec![BallotEvent { timestamp_sec: 0, task_id: 0, worker_id: 0, label: 0, pay_level: 6 }]).unwrap();
        assert!(trace.validate_pay_levels(6).is_err());
        assert!(trace.validate_pay_levels(7).is_ok());
    }
}
