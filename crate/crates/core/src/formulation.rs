//! Electrolyte preparation planning: dilution arithmetic, pipetting step
//! sequences, heater constraints, and mixing, producing a timed plan per
//! cell.
//!
//! Plans are pure functions of (recipe, stock library, config) and are
//! byte-identical across runs for identical inputs.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FormulationError {
    #[error("target concentration {target} M exceeds stock concentration {stock} M")]
    TargetExceedsStock { target: f64, stock: f64 },
    #[error("volume must be positive, got {0} µL")]
    NonPositiveVolume(f64),
    #[error("concentration must be positive, got {0} M")]
    NonPositiveConcentration(f64),
    #[error("no stock can reach target for salt '{salt}'")]
    UnreachableTarget { salt: String },
    #[error("incompatible solvent blend: {0}")]
    IncompatibleSolventBlend(String),
    #[error("transfer of {volume_ul:.3} µL is below the minimum pipettable volume {min_ul} µL")]
    VolumeUnderflow { volume_ul: f64, min_ul: f64 },
    #[error("no density configured for species '{0}'")]
    MissingDensity(String),
    #[error("invalid stock '{id}': {msg}")]
    InvalidStock { id: String, msg: String },
    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),
}

/// A concentrated salt solution available to the liquid handler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StockSolution {
    pub id: String,
    pub salt: String,
    /// Molarity, mol/L.
    pub concentration_m: f64,
    /// (solvent, volume fraction) pairs summing to 1.
    pub solvent_blend: Vec<(String, f64)>,
    #[serde(default)]
    pub requires_heating: bool,
    /// Heater setpoint in °C, present iff the stock requires heating.
    #[serde(default)]
    pub heat_setpoint_c: Option<f64>,
}

impl StockSolution {
    pub fn validate(&self, ambient_c: f64) -> Result<(), FormulationError> {
        let err = |msg: &str| FormulationError::InvalidStock {
            id: self.id.clone(),
            msg: msg.to_string(),
        };
        if !(self.concentration_m > 0.0) {
            return Err(err("concentration must be > 0"));
        }
        let total: f64 = self.solvent_blend.iter().map(|(_, f)| f).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(err("solvent fractions must sum to 1"));
        }
        match (self.requires_heating, self.heat_setpoint_c) {
            (true, Some(t)) if t < ambient_c => Err(err("heat setpoint below ambient")),
            (true, None) => Err(err("heated stock needs a setpoint")),
            (false, Some(_)) => Err(err("setpoint given but requires_heating is false")),
            _ => Ok(()),
        }
    }
}

/// Target composition of one cell's electrolyte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrolyteRecipe {
    /// (salt species, target molarity).
    pub salt_targets: Vec<(String, f64)>,
    /// (solvent, volume fraction) pairs summing to 1.
    pub solvent_fractions: Vec<(String, f64)>,
    /// (species, weight percent) pairs.
    #[serde(default)]
    pub additives: Vec<(String, f64)>,
    pub total_volume_ul: f64,
}

impl ElectrolyteRecipe {
    /// The campaign default: 1 M LiPF6 in EC:EMC 3:7 vol% + 2 wt% VC,
    /// 70 µL per cell.
    pub fn reference() -> Self {
        ElectrolyteRecipe {
            salt_targets: vec![("LiPF6".into(), 1.0)],
            solvent_fractions: vec![("EC".into(), 0.3), ("EMC".into(), 0.7)],
            additives: vec![("VC".into(), 2.0)],
            total_volume_ul: 70.0,
        }
    }

    pub fn validate(&self) -> Result<(), FormulationError> {
        if !(self.total_volume_ul > 0.0) {
            return Err(FormulationError::NonPositiveVolume(self.total_volume_ul));
        }
        for (salt, m) in &self.salt_targets {
            if !(*m > 0.0) {
                return Err(FormulationError::InvalidRecipe(format!(
                    "molarity of '{salt}' must be > 0"
                )));
            }
        }
        let total: f64 = self.solvent_fractions.iter().map(|(_, f)| f).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(FormulationError::InvalidRecipe(
                "solvent fractions must sum to 1".into(),
            ));
        }
        for (name, wt) in &self.additives {
            if !(*wt > 0.0 && *wt < 100.0) {
                return Err(FormulationError::InvalidRecipe(format!(
                    "additive '{name}' wt% must be in (0, 100)"
                )));
            }
        }
        Ok(())
    }
}

/// The 2 M LiPF6 stock used by the committed campaign configurations.
pub fn reference_stock() -> StockSolution {
    StockSolution {
        id: "lipf6_2m_ec_emc".into(),
        salt: "LiPF6".into(),
        concentration_m: 2.0,
        solvent_blend: vec![("EC".into(), 0.3), ("EMC".into(), 0.7)],
        requires_heating: false,
        heat_setpoint_c: None,
    }
}

/// Liquid-handler behaviour knobs. Densities are in g/mL and the default
/// table covers the common carbonate solvents and additives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormulationConfig {
    pub density_g_per_ml: BTreeMap<String, f64>,
    /// Pure solvents that must be held at the heater setpoint to stay
    /// liquid (EC is solid at room temperature).
    pub heated_solvents: BTreeSet<String>,
    pub heat_setpoint_c: f64,
    pub ambient_c: f64,
    /// Heater already at setpoint when the campaign starts.
    pub heater_preheated: bool,
    pub heatup_s: f64,
    pub min_pipette_volume_ul: f64,
    pub aspirate_s: f64,
    pub dispense_s: f64,
    pub tip_touch_s: f64,
    pub mix_repetitions: u32,
    pub mix_duration_s: f64,
}

impl Default for FormulationConfig {
    fn default() -> Self {
        let density_g_per_ml = [
            ("EC", 1.321),
            ("EMC", 1.007),
            ("DMC", 1.063),
            ("DEC", 0.975),
            ("VC", 1.355),
            ("FEC", 1.454),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        FormulationConfig {
            density_g_per_ml,
            heated_solvents: BTreeSet::from(["EC".to_string()]),
            heat_setpoint_c: 60.0,
            ambient_c: 25.0,
            heater_preheated: true,
            heatup_s: 120.0,
            min_pipette_volume_ul: 1.0,
            aspirate_s: 5.0,
            dispense_s: 5.0,
            tip_touch_s: 2.0,
            mix_repetitions: 20,
            mix_duration_s: 180.0,
        }
    }
}

/// One liquid-handler action with its simulated duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PipettingStep {
    WaitHeat {
        source: String,
        setpoint_c: f64,
        duration_s: f64,
    },
    Aspirate {
        source: String,
        volume_ul: f64,
        duration_s: f64,
    },
    TipTouch {
        at: String,
        duration_s: f64,
    },
    Dispense {
        dest: String,
        volume_ul: f64,
        duration_s: f64,
    },
    Mix {
        at: String,
        repetitions: u32,
        duration_s: f64,
    },
}

impl PipettingStep {
    pub fn duration_s(&self) -> f64 {
        match self {
            PipettingStep::WaitHeat { duration_s, .. }
            | PipettingStep::Aspirate { duration_s, .. }
            | PipettingStep::TipTouch { duration_s, .. }
            | PipettingStep::Dispense { duration_s, .. }
            | PipettingStep::Mix { duration_s, .. } => *duration_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipettingPlan {
    pub steps: Vec<PipettingStep>,
    pub estimated_duration_s: f64,
}

/// Simple dilution split: how much stock and how much pure diluent make
/// `total_volume_ul` at `target_m` from a stock at `stock_m`.
pub fn plan_dilution(
    stock_m: f64,
    target_m: f64,
    total_volume_ul: f64,
) -> Result<(f64, f64), FormulationError> {
    if !(total_volume_ul > 0.0) {
        return Err(FormulationError::NonPositiveVolume(total_volume_ul));
    }
    if !(stock_m > 0.0) {
        return Err(FormulationError::NonPositiveConcentration(stock_m));
    }
    if !(target_m > 0.0) {
        return Err(FormulationError::NonPositiveConcentration(target_m));
    }
    if target_m > stock_m {
        return Err(FormulationError::TargetExceedsStock {
            target: target_m,
            stock: stock_m,
        });
    }
    let stock_volume = total_volume_ul * target_m / stock_m;
    Ok((stock_volume, total_volume_ul - stock_volume))
}

/// Internal volume ledger produced by the balance arithmetic.
struct VolumeLedger {
    /// (stock id, volume) per salt target, in recipe order.
    stock_volumes: Vec<(String, f64, bool)>,
    /// (solvent, volume) of pure top-ups, in recipe order; zero entries
    /// removed.
    solvent_volumes: Vec<(String, f64)>,
    /// (additive, volume), in recipe order.
    additive_volumes: Vec<(String, f64)>,
}

fn balance_volumes(
    recipe: &ElectrolyteRecipe,
    stocks: &[StockSolution],
    config: &FormulationConfig,
) -> Result<VolumeLedger, FormulationError> {
    let recipe_solvents: BTreeSet<&str> = recipe
        .solvent_fractions
        .iter()
        .map(|(name, _)| name.as_str())
        .collect();

    // Salt contributions. Prefer the least-concentrated sufficient stock.
    let mut stock_volumes = Vec::new();
    let mut from_stocks: BTreeMap<&str, f64> = BTreeMap::new();
    for (salt, target_m) in &recipe.salt_targets {
        let mut eligible: Vec<&StockSolution> = stocks
            .iter()
            .filter(|s| &s.salt == salt && s.concentration_m >= *target_m - 1e-12)
            .collect();
        if eligible.is_empty() {
            return Err(FormulationError::UnreachableTarget { salt: salt.clone() });
        }
        eligible.retain(|s| {
            s.solvent_blend
                .iter()
                .all(|(name, _)| recipe_solvents.contains(name.as_str()))
        });
        let stock = eligible
            .iter()
            .min_by(|a, b| a.concentration_m.total_cmp(&b.concentration_m))
            .ok_or_else(|| {
                FormulationError::IncompatibleSolventBlend(format!(
                    "every stock for '{salt}' uses solvents outside the recipe blend"
                ))
            })?;
        let (v_stock, _) = plan_dilution(stock.concentration_m, *target_m, recipe.total_volume_ul)?;
        for (name, frac) in &stock.solvent_blend {
            *from_stocks.entry(name.as_str()).or_default() += v_stock * frac;
        }
        stock_volumes.push((stock.id.clone(), v_stock, stock.requires_heating));
    }

    // Additives: wt% of the total mass, with the bulk density approximated
    // by the volume-weighted solvent densities.
    let mut rho_mix = 0.0;
    for (name, frac) in &recipe.solvent_fractions {
        let rho = config
            .density_g_per_ml
            .get(name)
            .ok_or_else(|| FormulationError::MissingDensity(name.clone()))?;
        rho_mix += frac * rho;
    }
    let total_mass_mg = recipe.total_volume_ul * rho_mix;
    let mut additive_volumes = Vec::new();
    let mut additive_total = 0.0;
    for (name, wt_pct) in &recipe.additives {
        let rho = config
            .density_g_per_ml
            .get(name)
            .ok_or_else(|| FormulationError::MissingDensity(name.clone()))?;
        let volume = wt_pct / 100.0 * total_mass_mg / rho;
        additive_total += volume;
        additive_volumes.push((name.clone(), volume));
    }

    // Pure-solvent top-ups fill the remaining volume at the recipe
    // fractions, net of what the stock blends already brought in.
    let solvent_budget = recipe.total_volume_ul - additive_total;
    let stock_total: f64 = stock_volumes.iter().map(|(_, v, _)| v).sum();
    if solvent_budget < stock_total - 1e-9 {
        return Err(FormulationError::IncompatibleSolventBlend(
            "stock and additive volumes exceed the recipe volume".into(),
        ));
    }
    let mut solvent_volumes = Vec::new();
    for (name, frac) in &recipe.solvent_fractions {
        let desired = frac * solvent_budget;
        let supplied = from_stocks.get(name.as_str()).copied().unwrap_or(0.0);
        let v = desired - supplied;
        if v < -1e-9 {
            return Err(FormulationError::IncompatibleSolventBlend(format!(
                "stocks oversupply solvent '{name}' by {:.3} µL",
                -v
            )));
        }
        if v > 1e-9 {
            solvent_volumes.push((name.clone(), v));
        }
    }

    // Reject transfers the pipette cannot make.
    let min = config.min_pipette_volume_ul;
    for (_, v, _) in &stock_volumes {
        if *v < min {
            return Err(FormulationError::VolumeUnderflow {
                volume_ul: *v,
                min_ul: min,
            });
        }
    }
    for (_, v) in solvent_volumes.iter().chain(&additive_volumes) {
        if *v < min {
            return Err(FormulationError::VolumeUnderflow {
                volume_ul: *v,
                min_ul: min,
            });
        }
    }

    Ok(VolumeLedger {
        stock_volumes,
        solvent_volumes,
        additive_volumes,
    })
}

/// Builds the pipetting plan realizing `recipe` from `stocks`: transfers
/// in recipe order (salts, solvents, additives), a tip touch after every
/// aspirate, heater waits before heated sources, and one final mix.
pub fn plan_recipe(
    recipe: &ElectrolyteRecipe,
    stocks: &[StockSolution],
    config: &FormulationConfig,
) -> Result<PipettingPlan, FormulationError> {
    recipe.validate()?;
    for stock in stocks {
        stock.validate(config.ambient_c)?;
    }
    let ledger = balance_volumes(recipe, stocks, config)?;

    let mut steps = Vec::new();
    let mut heater_hot = config.heater_preheated;
    let mut heated_ready: BTreeSet<String> = BTreeSet::new();
    let dest = "cell".to_string();

    let mut transfer = |steps: &mut Vec<PipettingStep>,
                        source: String,
                        volume_ul: f64,
                        heated: bool,
                        heater_hot: &mut bool| {
        if heated && !heated_ready.contains(&source) {
            steps.push(PipettingStep::WaitHeat {
                source: source.clone(),
                setpoint_c: config.heat_setpoint_c,
                duration_s: if *heater_hot { 0.0 } else { config.heatup_s },
            });
            *heater_hot = true;
            heated_ready.insert(source.clone());
        }
        steps.push(PipettingStep::Aspirate {
            source: source.clone(),
            volume_ul,
            duration_s: config.aspirate_s,
        });
        steps.push(PipettingStep::TipTouch {
            at: source,
            duration_s: config.tip_touch_s,
        });
        steps.push(PipettingStep::Dispense {
            dest: dest.clone(),
            volume_ul,
            duration_s: config.dispense_s,
        });
    };

    for (id, v, heated) in &ledger.stock_volumes {
        transfer(&mut steps, format!("stock:{id}"), *v, *heated, &mut heater_hot);
    }
    for (name, v) in &ledger.solvent_volumes {
        let heated = config.heated_solvents.contains(name);
        transfer(&mut steps, format!("solvent:{name}"), *v, heated, &mut heater_hot);
    }
    for (name, v) in &ledger.additive_volumes {
        transfer(&mut steps, format!("additive:{name}"), *v, false, &mut heater_hot);
    }
    steps.push(PipettingStep::Mix {
        at: dest,
        repetitions: config.mix_repetitions,
        duration_s: config.mix_duration_s,
    });

    let estimated_duration_s = steps.iter().map(|s| s.duration_s()).sum();
    Ok(PipettingPlan {
        steps,
        estimated_duration_s,
    })
}

/// A timestamped liquid-handler action; `t_s` is the completion time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormulationEvent {
    pub t_s: f64,
    pub step: PipettingStep,
}

/// Timestamps each plan step at its completion, starting from `start_s`.
pub fn execute_formulation(plan: &PipettingPlan, start_s: f64) -> Vec<FormulationEvent> {
    let mut t = start_s;
    plan.steps
        .iter()
        .map(|step| {
            t += step.duration_s();
            FormulationEvent {
                t_s: t,
                step: step.clone(),
            }
        })
        .collect()
}
