//! Named cycling protocols.
//!
//! `reproducibility`: two formation cycles at 0.1C between 3.0 and 4.3 V
//! (CCCV charge, CC discharge) followed by 50 main cycles at 1C between
//! 3.0 and 4.2 V (CC/CC).
//!
//! `eis-rate`: the same formation, then two CC/CC cycles at each of 0.5,
//! 1, 2 and 3C between 3.0 and 4.2 V with an impedance trigger after each
//! rate block.

use super::{CellError, Protocol, ProtocolStep};

pub const FORMATION_V_MAX: f64 = 4.3;
pub const MAIN_V_MAX: f64 = 4.2;
pub const V_MIN: f64 = 3.0;
pub const FORMATION_RATE: f64 = 0.1;
pub const MAIN_RATE: f64 = 1.0;
/// CV termination current, C/20.
pub const CV_CUTOFF_RATE: f64 = 0.05;
pub const EIS_RATES: [f64; 4] = [0.5, 1.0, 2.0, 3.0];

fn formation_cycle() -> [ProtocolStep; 3] {
    [
        ProtocolStep::CcCharge {
            c_rate: FORMATION_RATE,
            v_limit: FORMATION_V_MAX,
        },
        ProtocolStep::CvHold {
            c_rate: FORMATION_RATE,
            v_limit: FORMATION_V_MAX,
            cutoff_c_rate: CV_CUTOFF_RATE,
        },
        ProtocolStep::CcDischarge {
            c_rate: FORMATION_RATE,
            v_limit: V_MIN,
        },
    ]
}

fn rate_cycle(c_rate: f64) -> [ProtocolStep; 2] {
    [
        ProtocolStep::CcCharge {
            c_rate,
            v_limit: MAIN_V_MAX,
        },
        ProtocolStep::CcDischarge {
            c_rate,
            v_limit: V_MIN,
        },
    ]
}

/// Two formation cycles plus 50 main cycles at 1C.
pub fn reproducibility() -> Protocol {
    let mut p = Protocol {
        name: "reproducibility".into(),
        steps: Vec::new(),
    };
    p.push_repeated(&formation_cycle(), 2);
    p.push_repeated(&rate_cycle(MAIN_RATE), 50);
    p.validate().expect("built-in protocol is valid");
    p
}

/// Two formation cycles plus two cycles at each of 0.5/1/2/3C, with an
/// impedance trigger after each rate block.
pub fn eis_rate() -> Protocol {
    let mut p = Protocol {
        name: "eis-rate".into(),
        steps: Vec::new(),
    };
    p.push_repeated(&formation_cycle(), 2);
    for rate in EIS_RATES {
        p.push_repeated(&rate_cycle(rate), 2);
        p.steps.push(ProtocolStep::EisTrigger);
    }
    p.validate().expect("built-in protocol is valid");
    p
}

pub fn by_name(name: &str) -> Result<Protocol, CellError> {
    match name {
        "reproducibility" => Ok(reproducibility()),
        "eis-rate" => Ok(eis_rate()),
        other => Err(CellError::InvalidProtocol(format!(
            "unknown protocol '{other}' (expected 'reproducibility' or 'eis-rate')"
        ))),
    }
}
