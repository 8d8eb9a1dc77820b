//! Event-log records: the timestamped, deterministic trace of every
//! resource acquisition, transfer, and measurement in a simulation.
//!
//! The log serializes as line-delimited JSON, one record per event with
//! `timestamp_s`, `kind`, `cell_id`, and `payload` fields. Identical
//! campaigns produce byte-identical logs.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use crate::formulation::PipettingStep;
use crate::CellId;

/// An exclusive piece of hardware in the simulated line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceId {
    LiquidHandler,
    RobotArm,
    Crimper,
    Gantry(u8),
    EisChannel(u8),
}

/// Gripper used for a placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gripper {
    Vacuum,
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventPayload {
    ResourceAcquired {
        resource: ResourceId,
    },
    ResourceReleased {
        resource: ResourceId,
    },
    FormulationStep {
        step: PipettingStep,
    },
    AssemblyStep {
        step: String,
        gripper: Option<Gripper>,
    },
    AssemblyCompleted {},
    AssemblyFailed {
        failed_step: String,
    },
    GantryTransferStarted {
        gantry: u8,
        channel: u32,
    },
    CellAdmitted {
        channel: u32,
        gantry: u8,
    },
    AdmissionQueued {},
    ProtocolStarted {
        protocol: String,
    },
    ProtocolCompleted {
        cycles: u32,
    },
    EisTriggered {
        trigger: u32,
        cycle: u32,
        c_rate: f64,
    },
    EisRequested {
        trigger: u32,
        eis_channel: u8,
    },
    EisEnqueued {
        trigger: u32,
        eis_channel: u8,
        queue_len: usize,
    },
    EisStarted {
        trigger: u32,
        eis_channel: u8,
    },
    EisCompleted {
        trigger: u32,
        eis_channel: u8,
    },
    ChannelReleased {
        channel: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub timestamp_s: f64,
    pub cell_id: Option<CellId>,
    #[serde(flatten)]
    pub payload: EventPayload,
}

/// Append-only trace of a simulation run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    events: Vec<Event>,
}

impl EventLog {
    pub fn new() -> Self {
        EventLog { events: Vec::new() }
    }

    pub fn push(&mut self, event: Event) {
        self.events.push(event);
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// One JSON object per line, UTF-8.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for event in &self.events {
            serde_json::to_writer(&mut w, event)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> std::io::Result<Self> {
        let mut events = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(&line)?);
        }
        Ok(EventLog { events })
    }
}
