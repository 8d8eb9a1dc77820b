//! Stage-III resource management: 48 cycling channels fed by 2 gantries,
//! and 2 impedance instruments granted FIFO per channel after a mandatory
//! rest, all driven by a deterministic discrete-event engine.

pub mod engine;
pub mod event;

pub use engine::{Engine, Scheduled};
pub use event::{Event, EventLog, EventPayload, Gripper, ResourceId};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

use crate::CellId;

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error("eis requested {actual_s} s after trigger, rest requires {required_s} s")]
    RestViolation { required_s: f64, actual_s: f64 },
    #[error("resource {0:?} already held by cell {1}")]
    ResourceBusy(ResourceId, CellId),
    #[error("resource {0:?} not held by cell {1}")]
    ResourceNotHeld(ResourceId, CellId),
    #[error("cell {0} holds no cycling channel")]
    UnknownCell(CellId),
}

/// How impedance instruments are bound to cycling channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EisBinding {
    /// Each instrument serves one contiguous channel bank.
    #[default]
    PerBank,
    /// Any free instrument serves the next request, one global queue.
    SharedPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub n_channels: usize,
    pub n_gantries: usize,
    pub n_eis_channels: usize,
    pub gantry_transfer_s: f64,
    pub eis_duration_s: f64,
    pub rest_before_eis_s: f64,
    pub eis_binding: EisBinding,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            n_channels: 48,
            n_gantries: 2,
            n_eis_channels: 2,
            gantry_transfer_s: 30.0,
            eis_duration_s: 600.0,
            rest_before_eis_s: 1800.0,
            eis_binding: EisBinding::PerBank,
        }
    }
}

/// A granted channel assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Admission {
    pub channel: u32,
    pub gantry: u8,
    pub transfer_start_s: f64,
    pub cycling_start_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdmitOutcome {
    Admitted(Admission),
    /// All channels busy; the cell waits until one frees.
    Queued,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EisOutcome {
    Started { eis_channel: u8, start_s: f64 },
    Enqueued { eis_channel: u8, queue_len: usize },
}

/// A measurement granted when an instrument freed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EisGrant {
    pub cell: CellId,
    pub trigger: u32,
    pub eis_channel: u8,
    pub start_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct EisRequest {
    t_ready: f64,
    cell: CellId,
    trigger: u32,
}

/// Channel, gantry, and instrument state.
///
/// Cycling channels split into one bank per gantry; banks are picked
/// round-robin (with fallback when the preferred bank is full) and the
/// lowest-index vacant channel within the bank wins. Each instrument
/// queue grants strictly in (t_ready, cell id) order.
pub struct ChannelBank {
    config: SchedulerConfig,
    channels: Vec<Option<CellId>>,
    assignment: BTreeMap<CellId, u32>,
    gantry_free_at: Vec<f64>,
    next_bank: usize,
    admission_wait: VecDeque<CellId>,
    eis_busy: Vec<Option<(CellId, u32)>>,
    eis_wait: Vec<Vec<EisRequest>>,
}

impl ChannelBank {
    pub fn new(config: SchedulerConfig) -> Self {
        assert!(config.n_channels >= 1 && config.n_gantries >= 1 && config.n_eis_channels >= 1);
        assert_eq!(
            config.n_channels % config.n_gantries,
            0,
            "channels must split evenly across gantries"
        );
        assert_eq!(config.n_channels % config.n_eis_channels, 0);
        ChannelBank {
            channels: vec![None; config.n_channels],
            assignment: BTreeMap::new(),
            gantry_free_at: vec![0.0; config.n_gantries],
            next_bank: 0,
            admission_wait: VecDeque::new(),
            eis_busy: vec![None; config.n_eis_channels],
            eis_wait: vec![Vec::new(); config.n_eis_channels],
            config,
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn occupied_channels(&self) -> usize {
        self.channels.iter().filter(|c| c.is_some()).count()
    }

    pub fn channel_of(&self, cell: CellId) -> Option<u32> {
        self.assignment.get(&cell).copied()
    }

    fn bank_size(&self) -> usize {
        self.config.n_channels / self.config.n_gantries
    }

    /// Instrument serving a cycling channel under per-bank binding.
    pub fn eis_channel_for(&self, channel: u32) -> u8 {
        let per_instrument = self.config.n_channels / self.config.n_eis_channels;
        (channel as usize / per_instrument) as u8
    }

    /// Assigns `cell` to a vacant channel, or queues it when the bank is
    /// full. The gantry serving the chosen bank is held for the transfer.
    pub fn admit_cell(&mut self, cell: CellId, t: f64) -> AdmitOutcome {
        let bank_size = self.bank_size();
        let preferred = self.next_bank;
        let mut chosen: Option<(usize, usize)> = None;
        for offset in 0..self.config.n_gantries {
            let bank = (preferred + offset) % self.config.n_gantries;
            let lo = bank * bank_size;
            if let Some(slot) = (lo..lo + bank_size).find(|&i| self.channels[i].is_none()) {
                chosen = Some((bank, slot));
                break;
            }
        }
        let Some((bank, slot)) = chosen else {
            self.admission_wait.push_back(cell);
            return AdmitOutcome::Queued;
        };
        self.channels[slot] = Some(cell);
        self.assignment.insert(cell, slot as u32);
        self.next_bank = (bank + 1) % self.config.n_gantries;
        let transfer_start_s = t.max(self.gantry_free_at[bank]);
        let cycling_start_s = transfer_start_s + self.config.gantry_transfer_s;
        self.gantry_free_at[bank] = cycling_start_s;
        AdmitOutcome::Admitted(Admission {
            channel: slot as u32,
            gantry: bank as u8,
            transfer_start_s,
            cycling_start_s,
        })
    }

    /// Frees a cell's channel and admits the longest-waiting queued cell,
    /// if any.
    pub fn release_channel(
        &mut self,
        cell: CellId,
        t: f64,
    ) -> Result<Option<(CellId, Admission)>, SchedulerError> {
        let channel = self
            .assignment
            .remove(&cell)
            .ok_or(SchedulerError::UnknownCell(cell))?;
        self.channels[channel as usize] = None;
        if let Some(waiting) = self.admission_wait.pop_front() {
            match self.admit_cell(waiting, t) {
                AdmitOutcome::Admitted(a) => return Ok(Some((waiting, a))),
                AdmitOutcome::Queued => unreachable!("a channel was just freed"),
            }
        }
        Ok(None)
    }

    /// Requests a measurement for a cell that finished its trigger step at
    /// `trigger_t` and has rested until `t_ready`. Grants immediately on a
    /// free instrument, otherwise joins that instrument's queue.
    pub fn request_eis(
        &mut self,
        cell: CellId,
        trigger: u32,
        trigger_t: f64,
        t_ready: f64,
    ) -> Result<EisOutcome, SchedulerError> {
        let required_s = self.config.rest_before_eis_s;
        let actual_s = t_ready - trigger_t;
        if actual_s + 1e-9 < required_s {
            return Err(SchedulerError::RestViolation {
                required_s,
                actual_s,
            });
        }
        let channel = self
            .channel_of(cell)
            .ok_or(SchedulerError::UnknownCell(cell))?;
        let instrument = match self.config.eis_binding {
            EisBinding::PerBank => self.eis_channel_for(channel) as usize,
            EisBinding::SharedPool => match self.eis_busy.iter().position(|b| b.is_none()) {
                Some(free) => free,
                // Shared pool queues globally; slot 0 holds the queue.
                None => 0,
            },
        };
        let queue_slot = match self.config.eis_binding {
            EisBinding::PerBank => instrument,
            EisBinding::SharedPool => 0,
        };
        if self.eis_busy[instrument].is_none() && self.eis_wait[queue_slot].is_empty() {
            self.eis_busy[instrument] = Some((cell, trigger));
            Ok(EisOutcome::Started {
                eis_channel: instrument as u8,
                start_s: t_ready,
            })
        } else {
            let request = EisRequest {
                t_ready,
                cell,
                trigger,
            };
            let queue = &mut self.eis_wait[queue_slot];
            let pos = queue.partition_point(|r| {
                (r.t_ready, r.cell) <= (request.t_ready, request.cell)
            });
            queue.insert(pos, request);
            Ok(EisOutcome::Enqueued {
                eis_channel: instrument as u8,
                queue_len: queue.len(),
            })
        }
    }

    /// Marks a measurement finished at `t` and grants the next waiting
    /// request on that instrument, which starts the instant the channel
    /// frees.
    pub fn complete_eis(&mut self, eis_channel: u8, t: f64) -> Option<EisGrant> {
        let instrument = eis_channel as usize;
        self.eis_busy[instrument] = None;
        let queue_slot = match self.config.eis_binding {
            EisBinding::PerBank => instrument,
            EisBinding::SharedPool => 0,
        };
        if self.eis_wait[queue_slot].is_empty() {
            return None;
        }
        let next = self.eis_wait[queue_slot].remove(0);
        self.eis_busy[instrument] = Some((next.cell, next.trigger));
        Some(EisGrant {
            cell: next.cell,
            trigger: next.trigger,
            eis_channel,
            start_s: t,
        })
    }

    pub fn eis_in_flight(&self) -> usize {
        self.eis_busy.iter().filter(|b| b.is_some()).count()
    }
}

/// Tracks which cell holds each exclusive resource; double acquisition is
/// a simulation bug, not a schedulable wait.
#[derive(Debug, Default)]
pub struct ResourceRegistry {
    holders: BTreeMap<ResourceId, CellId>,
}

impl ResourceRegistry {
    pub fn new() -> Self {
        ResourceRegistry::default()
    }

    pub fn acquire(&mut self, resource: ResourceId, cell: CellId) -> Result<(), SchedulerError> {
        if let Some(&holder) = self.holders.get(&resource) {
            return Err(SchedulerError::ResourceBusy(resource, holder));
        }
        self.holders.insert(resource, cell);
        Ok(())
    }

    pub fn release(&mut self, resource: ResourceId, cell: CellId) -> Result<(), SchedulerError> {
        match self.holders.get(&resource) {
            Some(&holder) if holder == cell => {
                self.holders.remove(&resource);
                Ok(())
            }
            _ => Err(SchedulerError::ResourceNotHeld(resource, cell)),
        }
    }

    pub fn holder(&self, resource: ResourceId) -> Option<CellId> {
        self.holders.get(&resource).copied()
    }
}
