use fleetdp_core::fleet::Level;
use fleetdp_core::market::{generate_scenario, GenParams};
use fleetdp_core::sched::solve_approx;
use std::time::Instant;

#[test]
fn probe_approx_scaling() {
    for seed in [1234u64, 7u64, 99u64] {
        let s = generate_scenario(GenParams::new(Level::L3, 100, 48, seed));
        let t0 = Instant::now();
        let sched = solve_approx(&s).expect("feasible");
        let dt = t0.elapsed().as_secs_f64();
        let labels: String = sched.aggregate_labels.as_ref().unwrap().iter().map(|l| l.letter()).collect();
        eprintln!("seed={seed}: {dt:.3}s objective={:.2} labels={labels}", sched.objective_eur);
    }
}
