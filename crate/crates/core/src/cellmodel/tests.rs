use super::protocols;
use super::*;
use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn flat_params() -> CellParameters {
    // No fade and no rate dependence: isolates single-step physics.
    CellParameters {
        fade_per_cycle: 0.0,
        rate_exponent: 0.0,
        ..CellParameters::default()
    }
}

/// Trapezoidal integral of the sample current over time, mAh (signed).
fn trapezoid_mah(samples: &[Sample]) -> f64 {
    samples
        .windows(2)
        .map(|w| (w[0].i_ma + w[1].i_ma) * 0.5 * (w[1].t_s - w[0].t_s) / 3600.0)
        .sum()
}

#[test]
fn ocv_boundaries_and_midpoint() {
    let table = OcvTable::default_table();
    assert_eq!(table.interp(0.0).unwrap(), 3.0);
    assert_eq!(table.interp(1.0).unwrap(), 4.3);
    // Midpoint between the knots at 0.0 and 0.25.
    let mid = table.interp(0.125).unwrap();
    assert_relative_eq!(mid, (3.0 + 3.5) / 2.0);
    assert!(matches!(table.interp(1.5), Err(CellError::OutOfRange(_))));
    assert!(matches!(table.interp(-0.1), Err(CellError::OutOfRange(_))));
}

#[test]
fn ocv_rejects_nonmonotone() {
    assert!(OcvTable::new(vec![(0.0, 3.0), (0.5, 2.9), (1.0, 4.3)]).is_err());
    assert!(OcvTable::new(vec![(0.1, 3.0), (1.0, 4.3)]).is_err());
}

#[test]
fn zero_resistance_full_charge_takes_3600_s() {
    let mut params = flat_params();
    params.r_internal_ohm = 0.0;
    let step = ProtocolStep::CcCharge {
        c_rate: 1.0,
        v_limit: 4.3,
    };
    let out = simulate_step(&params, CellState::new(0.0), &step, 1.0).unwrap();
    assert_relative_eq!(out.elapsed_s, 3600.0, epsilon = 1e-6);
    assert_relative_eq!(out.state.soc, 1.0, epsilon = 1e-9);
}

#[test]
fn rest_changes_nothing_but_time() {
    let params = flat_params();
    let state = CellState::new(0.4);
    let out = simulate_step(&params, state, &ProtocolStep::Rest { duration_s: 120.0 }, 1.0)
        .unwrap();
    assert_eq!(out.state, state);
    assert_eq!(out.elapsed_s, 120.0);
    assert_eq!(out.transferred_mah, 0.0);
}

#[test]
fn cc_terminal_voltage_follows_ohms_law() {
    // 1C on a 200 mAh cell is 0.2 A; with 0.05 Ω the overpotential is 10 mV.
    let mut params = flat_params();
    params.q_nominal_mah = 200.0;
    params.r_internal_ohm = 0.05;
    let step = ProtocolStep::CcCharge {
        c_rate: 1.0,
        v_limit: 4.2,
    };
    let out = simulate_step(&params, CellState::new(0.0), &step, 1.0).unwrap();
    for s in &out.samples {
        let ocv = params.ocv.interp(s.soc).unwrap();
        assert_relative_eq!(s.v - ocv, 0.01, epsilon = 1e-9);
        assert_relative_eq!(s.i_ma, 200.0);
    }
    // Terminates at the limit within 1 mV.
    let last = out.samples.last().unwrap();
    assert!((last.v - 4.2).abs() < 1e-3);
}

#[test]
fn cv_hold_decays_to_cutoff() {
    let mut params = flat_params();
    params.r_internal_ohm = 0.5;
    // Start where a 1C constant-current charge would have stopped.
    let charge = ProtocolStep::CcCharge {
        c_rate: 1.0,
        v_limit: 4.2,
    };
    let mid = simulate_step(&params, CellState::new(0.0), &charge, 1.0).unwrap();
    let hold = ProtocolStep::CvHold {
        c_rate: 1.0,
        v_limit: 4.2,
        cutoff_c_rate: 0.05,
    };
    let out = simulate_step(&params, mid.state, &hold, 1.0).unwrap();
    let i_start = out.samples.first().unwrap().i_ma;
    let i_end = out.samples.last().unwrap().i_ma;
    let i_cut = 0.05 * params.q_step_mah(1.0, 0);
    assert!(i_start > i_cut);
    assert_relative_eq!(i_end, i_cut, epsilon = 1e-6);
    // Current decays monotonically and voltage is pinned at the limit.
    for w in out.samples.windows(2) {
        assert!(w[1].i_ma <= w[0].i_ma + 1e-12);
    }
    assert!(out.samples.iter().all(|s| (s.v - 4.2).abs() < 1e-12));
}

#[test]
fn cv_hold_with_zero_resistance_is_instant() {
    let mut params = flat_params();
    params.r_internal_ohm = 0.0;
    let hold = ProtocolStep::CvHold {
        c_rate: 1.0,
        v_limit: 4.2,
        cutoff_c_rate: 0.05,
    };
    let out = simulate_step(&params, CellState::new(0.5), &hold, 1.0).unwrap();
    assert_eq!(out.elapsed_s, 0.0);
    assert_eq!(out.transferred_mah, 0.0);
}

#[test]
fn slow_step_reports_nonconvergent() {
    let params = flat_params();
    let step = ProtocolStep::CcCharge {
        c_rate: 0.01,
        v_limit: 4.3,
    };
    let err = simulate_step(&params, CellState::new(0.0), &step, 1.0);
    assert!(matches!(err, Err(CellError::Nonconvergent { .. })));
}

#[test]
fn reproducibility_protocol_has_52_rows() {
    let params = CellParameters::default();
    let (record, triggers) =
        run_protocol(&params, &protocols::reproducibility(), 0.0, SimOptions::default())
            .unwrap();
    assert_eq!(record.rows.len(), 52);
    assert!(triggers.is_empty());
    assert!(record.rows.iter().all(|r| r.charge_mah > 0.0));
    assert!(record
        .rows
        .iter()
        .all(|r| (r.coulombic_efficiency - r.discharge_mah / r.charge_mah).abs() < 1e-12));
}

#[test]
fn zero_fade_main_cycles_are_identical() {
    let params = flat_params();
    let (record, _) =
        run_protocol(&params, &protocols::reproducibility(), 0.0, SimOptions::default())
            .unwrap();
    let main: Vec<f64> = record.rows[2..].iter().map(|r| r.discharge_mah).collect();
    let first = main[0];
    for d in &main {
        assert_relative_eq!(*d, first, max_relative = 1e-9);
    }
}

#[test]
fn eis_rate_protocol_fires_four_triggers() {
    let params = CellParameters::default();
    let (record, triggers) =
        run_protocol(&params, &protocols::eis_rate(), 0.0, SimOptions::default()).unwrap();
    assert_eq!(triggers.len(), 4);
    assert_eq!(record.rows.len(), 10);
    let cycles: Vec<u32> = triggers.iter().map(|t| t.cycle).collect();
    assert_eq!(cycles, vec![4, 6, 8, 10]);
    let rates: Vec<f64> = triggers.iter().map(|t| t.c_rate).collect();
    assert_eq!(rates, protocols::EIS_RATES.to_vec());
    let indices: Vec<u32> = triggers.iter().map(|t| t.index).collect();
    assert_eq!(indices, vec![1, 2, 3, 4]);
    // Drift only ever increases circuit resistances.
    for t in &triggers {
        assert!(t.circuit.r1 >= params.circuit.r1);
    }
}

#[test]
fn rate_capacity_ordering_matches_power_law() {
    let mut params = CellParameters::default();
    params.fade_per_cycle = 0.0;
    let mut capacities = Vec::new();
    for rate in [0.5, 1.0, 2.0, 3.0] {
        let protocol = Protocol::new(
            "one-rate",
            vec![
                ProtocolStep::CcCharge {
                    c_rate: rate,
                    v_limit: 4.2,
                },
                ProtocolStep::CcDischarge {
                    c_rate: rate,
                    v_limit: 3.0,
                },
            ],
        )
        .unwrap();
        let (record, _) = run_protocol(&params, &protocol, 0.0, SimOptions::default()).unwrap();
        capacities.push(record.rows[0].discharge_mah);
    }
    assert!(capacities[0] > capacities[1]);
    assert!(capacities[1] > capacities[2]);
    assert!(capacities[2] > capacities[3]);
}

#[test]
fn fade_makes_capacity_nonincreasing() {
    let mut params = CellParameters::default();
    params.fade_per_cycle = 0.002;
    let protocol = Protocol::new("fade", {
        let mut steps = Vec::new();
        for _ in 0..10 {
            steps.push(ProtocolStep::CcCharge {
                c_rate: 1.0,
                v_limit: 4.2,
            });
            steps.push(ProtocolStep::CcDischarge {
                c_rate: 1.0,
                v_limit: 3.0,
            });
        }
        steps
    })
    .unwrap();
    let (record, _) = run_protocol(&params, &protocol, 0.0, SimOptions::default()).unwrap();
    for w in record.rows.windows(2) {
        assert!(w[1].discharge_mah <= w[0].discharge_mah + 1e-12);
    }
}

#[test]
fn voltage_stays_inside_protocol_window() {
    let params = CellParameters::default();
    let mut short = Protocol {
        name: "short".into(),
        steps: Vec::new(),
    };
    short.push_repeated(
        &[
            ProtocolStep::CcCharge {
                c_rate: 0.5,
                v_limit: 4.3,
            },
            ProtocolStep::CvHold {
                c_rate: 0.5,
                v_limit: 4.3,
                cutoff_c_rate: 0.05,
            },
            ProtocolStep::CcDischarge {
                c_rate: 0.5,
                v_limit: 3.0,
            },
        ],
        2,
    );
    let mut runner = ProtocolRunner::new(params, short, 0.0, SimOptions::default())
        .unwrap()
        .with_trace(1);
    while !runner.is_done() {
        runner.run_next_segment().unwrap();
    }
    let record = runner.into_record();
    let eps = 1e-3;
    for s in record.trace.as_ref().unwrap() {
        assert!(s.v >= 3.0 - eps && s.v <= 4.3 + eps, "v = {}", s.v);
    }
}

#[test]
fn same_inputs_reproduce_identical_records() {
    let params = CellParameters::default();
    let run = || {
        let (record, _) =
            run_protocol(&params, &protocols::eis_rate(), 0.0, SimOptions::default()).unwrap();
        serde_json::to_string(&record).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn population_with_zero_noise_is_identical() {
    let base = CellParameters::default();
    let noise = PopulationNoise {
        capacity_rsd: 0.0,
        resistance_sigma_ohm: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cells = sample_population(&base, &noise, 5, &mut rng);
    for cell in &cells {
        assert_eq!(cell, &base);
    }
}

#[test]
fn population_capacity_rsd_matches_target() {
    let base = CellParameters::default();
    let noise = PopulationNoise {
        capacity_rsd: 0.0104,
        resistance_sigma_ohm: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cells = sample_population(&base, &noise, 4000, &mut rng);
    let values: Vec<f64> = cells.iter().map(|c| c.q_nominal_mah).collect();
    let summary = crate::stats::summarize(&values).unwrap();
    assert!(
        (summary.rsd - 0.0104).abs() < 0.0005,
        "rsd = {}",
        summary.rsd
    );
}

#[test]
fn population_resistance_sigma_matches_target() {
    // Base resistances far from zero so the positivity clamp never bites.
    let mut base = CellParameters::default();
    base.circuit = crate::eis::CircuitParams::new(
        50.0,
        [
            crate::eis::RcArc::new(60.0, 1e-6),
            crate::eis::RcArc::new(70.0, 1e-4),
            crate::eis::RcArc::new(80.0, 1e-2),
        ],
    )
    .unwrap();
    let noise = PopulationNoise {
        capacity_rsd: 0.0,
        resistance_sigma_ohm: 2.5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cells = sample_population(&base, &noise, 4000, &mut rng);
    let values: Vec<f64> = cells.iter().map(|c| c.circuit.r1).collect();
    let summary = crate::stats::summarize(&values).unwrap();
    assert!((summary.std - 2.5).abs() < 0.1, "std = {}", summary.std);
}

#[test]
fn cycling_csv_round_trip() {
    let params = flat_params();
    let protocol = Protocol::new(
        "two-cycles",
        vec![
            ProtocolStep::CcCharge {
                c_rate: 1.0,
                v_limit: 4.2,
            },
            ProtocolStep::CcDischarge {
                c_rate: 1.0,
                v_limit: 3.0,
            },
        ],
    )
    .unwrap();
    let (record, _) = run_protocol(&params, &protocol, 0.0, SimOptions::default()).unwrap();
    let mut buf = Vec::new();
    record.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("cycle,c_rate,charge_mAh,discharge_mAh,ce\n"));
    let parsed = CyclingRecord::read_csv(&buf[..]).unwrap();
    assert_eq!(parsed.rows.len(), record.rows.len());
    assert_relative_eq!(
        parsed.rows[0].discharge_mah,
        record.rows[0].discharge_mah,
        epsilon = 1e-6
    );
}

#[test]
fn protocol_validation_catches_bad_windows() {
    let inverted = Protocol::new(
        "bad",
        vec![
            ProtocolStep::CcCharge {
                c_rate: 1.0,
                v_limit: 4.0,
            },
            ProtocolStep::CcDischarge {
                c_rate: 1.0,
                v_limit: 4.1,
            },
        ],
    );
    assert!(inverted.is_err());
    assert!(Protocol::new("empty", vec![]).is_err());
    assert!(Protocol::new(
        "bad-rate",
        vec![ProtocolStep::CcCharge {
            c_rate: -1.0,
            v_limit: 4.2
        }]
    )
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cc_step_conserves_charge(
        c_rate in 0.2..3.0f64,
        r in 0.0..0.5f64,
        q in 1.0..10.0f64,
        soc0 in 0.0..0.5f64,
    ) {
        let mut params = flat_params();
        params.q_nominal_mah = q;
        params.r_internal_ohm = r;
        let step = ProtocolStep::CcCharge { c_rate, v_limit: 4.2 };
        let out = simulate_step(&params, CellState::new(soc0), &step, 1.0).unwrap();
        let q_step = params.q_step_mah(c_rate, 0);
        let dsoc = out.state.soc - soc0;
        let integral = trapezoid_mah(&out.samples);
        prop_assert!((q_step * dsoc - integral).abs() <= 1e-9 * integral.abs().max(1e-12));
        prop_assert!((out.transferred_mah - integral).abs() <= 1e-9 * integral.abs().max(1e-12));
    }

    #[test]
    fn cv_step_conserves_charge(
        r in 0.05..1.0f64,
        q in 1.0..10.0f64,
        soc0 in 0.3..0.9f64,
    ) {
        let mut params = flat_params();
        params.q_nominal_mah = q;
        params.r_internal_ohm = r;
        let v_limit = params.ocv.interp(soc0).unwrap() + 0.15;
        let step = ProtocolStep::CvHold { c_rate: 1.0, v_limit: v_limit.min(4.3), cutoff_c_rate: 0.02 };
        let out = simulate_step(&params, CellState::new(soc0), &step, 1.0).unwrap();
        let q_step = params.q_step_mah(1.0, 0);
        let dsoc = out.state.soc - soc0;
        let integral = trapezoid_mah(&out.samples);
        prop_assert!((q_step * dsoc - integral).abs() <= 1e-9 * integral.abs().max(1e-12),
            "dsoc*q = {}, integral = {}", q_step * dsoc, integral);
    }

    #[test]
    fn discharge_conserves_charge(
        c_rate in 0.2..3.0f64,
        r in 0.0..0.5f64,
        soc0 in 0.5..1.0f64,
    ) {
        let mut params = flat_params();
        params.r_internal_ohm = r;
        let step = ProtocolStep::CcDischarge { c_rate, v_limit: 3.0 };
        let out = simulate_step(&params, CellState::new(soc0), &step, 1.0).unwrap();
        let q_step = params.q_step_mah(c_rate, 0);
        let dsoc = out.state.soc - soc0;
        let integral = trapezoid_mah(&out.samples);
        prop_assert!((q_step * dsoc - integral).abs() <= 1e-9 * integral.abs().max(1e-12));
    }
}
