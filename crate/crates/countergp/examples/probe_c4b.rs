use countergp::causal::OutcomeSource;
use countergp::model::{fit, FitConfig, ModelVariant};
use countergp::sim::gen_b1;

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(18);
    let (data, oracle) = gen_b1(300, 4000 + seed).unwrap();
    let cfg = FitConfig { iterations: 300, seed, num_components: 2, ..FitConfig::default() };
    let gp = fit(ModelVariant::Gp, &data, &cfg).unwrap();
    let counter = fit(ModelVariant::CounterGp, &data, &cfg).unwrap();
    // learned coregionalization of the counter model
    let sub = &counter.submodels[0];
    for (q, c) in sub.theta.kernel.components.iter().enumerate() {
        let b = c.action_factor.as_ref().unwrap().build_b();
        println!("comp {}: B_A = [[{:.3}, {:.3}], [{:.3}, {:.3}]] corr {:.3} ell {:.3} sig {:.3}",
            q, b[(0,0)], b[(0,1)], b[(1,0)], b[(1,1)], b[(0,1)] / (b[(0,0)]*b[(1,1)]).sqrt(),
            c.base.log_lengthscales[0].exp(), c.base.log_signal_variance.exp());
    }
    println!("noise {:?}", sub.theta.log_noise.iter().map(|v| v.exp()).collect::<Vec<_>>());
    let traj = &counter.nll_trajectory;
    println!("nll traj: init {:.2} ... min {:.2} last {:.2}", traj[0],
        traj.iter().cloned().fold(f64::INFINITY, f64::min), traj.last().unwrap());
    println!("counter nll {:.2} (init {:.2}); gp nll {:.2}", counter.best_nll, counter.nll_trajectory[0], gp.best_nll);
    println!("\n x     truth_f1  counter_mean  gp_mean   truth_f0");
    for k in 0..12 {
        let x = [-3.0 + 0.25 * k as f64];
        let t1 = oracle.true_surface(&x, 1, 0);
        let t0 = oracle.true_surface(&x, 0, 0);
        let cm = counter.mean_outcome(&x, 1, 0).unwrap();
        let gm = gp.mean_outcome(&x, 1, 0).unwrap();
        println!("{:5.2}  {:8.3}  {:12.3}  {:8.3}  {:8.3}", x[0], t1, cm, gm, t0);
    }
    let n1 = (0..data.len()).filter(|&i| data.actions[i] == 1 && data.x[(i,0)] < -1.0).count();
    let n0 = (0..data.len()).filter(|&i| data.actions[i] == 0 && data.x[(i,0)] < -1.0).count();
    println!("region points: arm1 {} arm0 {}", n1, n0);
}
