use fleetdp_core::fleet::{ConstraintLevel, EvSpec, Level};
use fleetdp_core::market::Scenario;
use fleetdp_core::sched::solve_approx;

#[test]
fn approx_finds_discharge_arbitrage() {
    let s = Scenario {
        n_slots: 2,
        slot_hours: 0.25,
        rho: vec![0.1, 0.1],
        sigma: vec![0.05, 0.05],
        volumes: vec![2.5, -2.5],
        fleet: vec![EvSpec { id: 0, capacity_kwh: 100.0, min_soc_kwh: 10.0, max_rate_kw: 10.0, initial_soc_kwh: 30.0, target_soc_kwh: 30.0 }],
        level: ConstraintLevel::new(Level::L1),
        seed: 0,
    };
    let sched = solve_approx(&s).unwrap();
    eprintln!("labels: {:?} objective {}", sched.aggregate_labels, sched.objective_eur);
    assert_eq!(sched.objective_eur, 0.0);
}
