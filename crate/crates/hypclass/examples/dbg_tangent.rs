use hypclass::builtins;
use hypclass::flow::{self, FlowConfig};
use hypclass::expr::PhasePoint;

fn main() {
    let sys = builtins::model3(1, None).unwrap();
    let ta = flow::transition_invariants(&sys).unwrap();
    println!("kappa={} nu={} delta={} b={:?}", ta.kappa, ta.nu, ta.delta, ta.b);
    let lead = ta.leading.unwrap();
    println!("lead: x0={} phi2={} xi0={} theta={}", lead.x0, lead.phi2, lead.xi0, lead.theta);
    // replicate seed_point manually via debug accessor: integrate from a hand seed
    let t0: f64 = 1e-3;
    let b = lead.b;
    // hand seed for model3 k=1: x0 = 2b t, x1 ~ -phi1/xi3 with phi1 = b t^2 ... phi1 = -x1 a(x1) xi3
    let x0 = 2.0*b*t0;
    let x1 = -(b*t0*t0); // phi1 = -x1*1*1 = b t^2 => x1 = -b t^2
    let phi2t = lead.phi2*t0*t0*t0;
    // phi2 = -(xi1 + x0 xi3) = phi2t => xi1 = -x0 - phi2t
    let xi1 = -x0 - phi2t;
    let xi0 = b*t0*t0 + lead.xi0*t0.powi(4);
    let seed = PhasePoint::new(vec![x0, x1, 0.0, 0.0], vec![xi0, xi1, 0.0, 1.0]).unwrap();
    let p = sys.principal_symbol().eval(&seed).unwrap();
    println!("seed x0={x0:.6e} x1={x1:.6e} xi0={xi0:.6e} xi1={xi1:.6e} p={p:.3e}");
    let s0 = 1.0/t0;
    let mut cfg = FlowConfig::default();
    cfg.h_max = 980.0/600.0;
    cfg.drift_tol = 1e-6;
    let traj = flow::integrate(&sys, &seed, -(s0-20.0), &cfg).unwrap();
    println!("samples {} p_drift {:.3e}", traj.samples.len(), traj.p_drift);
    for (i, s) in traj.samples.iter().enumerate() {
        if i % 120 == 0 || i == traj.samples.len()-1 {
            println!("  s={:.2} x0={:.5e} x1={:.5e} xi0={:.5e}", s0 + s.s, s.point.x[0], s.point.x[1], s.point.xi[0]);
        }
    }
}
