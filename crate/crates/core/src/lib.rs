//! Deterministic simulator and analysis toolkit for an automated
//! coin-cell laboratory: electrolyte formulation planning,
//! resource-locked assembly, 48-channel cycling with queued impedance
//! measurements, a virtual cell model, equivalent-circuit fitting, and
//! reproducibility statistics.
//!
//! Conventions: volumes in µL, times in simulation seconds, voltages in
//! V, currents in mA, capacities in mAh, resistances in Ω, capacitances
//! in F, frequencies in Hz, concentrations in mol/L.

pub mod cellmodel;
pub mod eis;
pub mod formulation;
pub mod scheduler;
pub mod stats;

/// Identifier of one coin cell within a campaign.
pub type CellId = u32;
