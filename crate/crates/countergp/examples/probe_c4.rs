use countergp::causal::rmse;
use countergp::model::{fit, FitConfig, ModelVariant, TrainedModel};
use countergp::sim::gen_b1;
use countergp::causal::OutcomeSource;
use rayon::prelude::*;

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let n = 300;
    let seeds: Vec<u64> = (0..20).collect();
    let results: Vec<(f64, f64, f64)> = seeds.par_iter().map(|&seed| {
        let (data, oracle) = gen_b1(n, 4000 + seed).unwrap();
        let ncomp: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(1);
        let wd: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(0.0);
        let gp_cfg = FitConfig { iterations: iters, learning_rate: lr, seed, ..FitConfig::default() };
        let cfg = FitConfig { iterations: iters, learning_rate: lr, seed, num_components: ncomp, weight_decay: wd, ..FitConfig::default() };
        let gp = fit(ModelVariant::Gp, &data, &gp_cfg).unwrap();
        let counter = fit(ModelVariant::CounterGp, &data, &cfg).unwrap();
        let grid = countergp::Matrix::from_fn(60, 1, |i, _| -3.0 + 2.0 * i as f64 / 59.0);
        let truth: Vec<f64> = (0..60).map(|i| {
            oracle.true_surface(grid.row(i), 1, 0) - oracle.true_surface(grid.row(i), 0, 0)
        }).collect();
        let rmse_of = |model: &TrainedModel| {
            let m1 = model.mean_outcomes(&grid, 1, 0).unwrap();
            let m0 = model.mean_outcomes(&grid, 0, 0).unwrap();
            let diff: Vec<f64> = m1.iter().zip(&m0).map(|(a, b)| a - b).collect();
            rmse(&diff, &truth).unwrap()
        };
        let idx: Vec<usize> = (0..data.len()).filter(|&i| data.x[(i, 0)] < -1.0).collect();
        // how many arm-1 points below -1?
        let n1 = idx.iter().filter(|&&i| data.actions[i] == 1).count();
        let _ = &idx;
        (rmse_of(&counter), rmse_of(&gp), n1 as f64)
    }).collect();
    let wins = results.iter().filter(|(c, g, _)| c < g).count();
    for (i, (c, g, n1)) in results.iter().enumerate() {
        println!("seed {:2}: counter {:.4} gp {:.4} {} (arm1 pts in region: {})", i, c, g, if c < g {"WIN"} else {"loss"}, n1);
    }
    println!("iters={} lr={} wins: {}/20", iters, lr, wins);
}
