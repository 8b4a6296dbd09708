use countergp::causal::{rmse, OutcomeSource};
use countergp::model::{fit, FitConfig, ModelVariant, TrainedModel};
use countergp::sim::gen_b1;

fn main() {
    for data_seed in [1u64, 5, 12, 0, 4] {
        let (data, oracle) = gen_b1(300, 4000 + data_seed).unwrap();
        let idx: Vec<usize> = (0..data.len()).filter(|&i| data.x[(i, 0)] < -1.0).collect();
        let region = data.select(&idx);
        let truth: Vec<f64> = (0..region.len()).map(|i| oracle.true_surface(region.x.row(i), 1, 0)).collect();
        let rmse_of = |model: &TrainedModel| {
            let means = model.mean_outcomes(&region.x, 1, 0).unwrap();
            rmse(&means, &truth).unwrap()
        };
        print!("data seed {:2}: ", data_seed);
        for init in 0..5u64 {
            let cfg = FitConfig { iterations: 300, seed: init * 7919 + 3, num_components: 2, ..FitConfig::default() };
            let m = fit(ModelVariant::CounterGp, &data, &cfg).unwrap();
            print!("(nll {:.1}, rmse {:.2}) ", m.best_nll, rmse_of(&m));
        }
        println!();
    }
}
