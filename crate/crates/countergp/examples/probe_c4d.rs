use countergp::causal::{rmse, OutcomeSource};
use countergp::coregion::{CoregionFactor, KernelComponent, MultitaskKernelSpec};
use countergp::kernel::{BaseKernelParams, KernelKind};
use countergp::model::{FitConfig, ModelVariant, ThetaParams, TrainedModel};
use countergp::sim::gen_b1;
use countergp::Matrix;

fn main() {
    for data_seed in [1u64, 5, 12, 4, 16, 2] {
        let (data, oracle) = gen_b1(300, 4000 + data_seed).unwrap();
        let idx: Vec<usize> = (0..data.len()).filter(|&i| data.x[(i, 0)] < -1.0).collect();
        let region = data.select(&idx);
        let truth: Vec<f64> = (0..region.len()).map(|i| oracle.true_surface(region.x.row(i), 1, 0)).collect();

        // committed init: shape component with near-perfect positive action
        // correlation, long quiet level component anti-symmetric loadings
        let shape = CoregionFactor::new(
            Matrix::from_rows(2, 2, vec![1.0, 0.05, 1.0, -0.05]),
            vec![0.01f64.ln(); 2],
        );
        let level = CoregionFactor::new(
            Matrix::from_rows(2, 2, vec![-1.0, 0.05, 1.0, 0.05]),
            vec![0.01f64.ln(); 2],
        );
        let theta = ThetaParams {
            mlp: None,
            kernel: MultitaskKernelSpec {
                num_actions: 2,
                num_outcomes: 1,
                components: vec![
                    KernelComponent {
                        kind: KernelKind::Rbf,
                        base: BaseKernelParams::unit(1),
                        action_factor: Some(shape),
                        outcome_factor: None,
                    },
                    KernelComponent {
                        kind: KernelKind::Rbf,
                        base: BaseKernelParams {
                            log_lengthscales: vec![2.0],
                            log_signal_variance: 0.0,
                        },
                        action_factor: Some(level),
                        outcome_factor: None,
                    },
                ],
            },
            log_noise: vec![0.25f64.ln(); 2],
        };
        let mut model = TrainedModel::from_params(ModelVariant::CounterGp, &data, vec![theta]).unwrap();
        // plain Adam over the flat parameters
        let cfg = FitConfig::default();
        let mut params = model.params_flat();
        let (mut m1, mut m2) = (vec![0.0; params.len()], vec![0.0; params.len()]);
        let mut best = (f64::INFINITY, params.clone());
        for t in 1..=300 {
            model.set_params_flat(&params).unwrap();
            let (nll, grad) = model.nll_grad().unwrap();
            if nll < best.0 { best = (nll, params.clone()); }
            let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
            for i in 0..params.len() {
                m1[i] = b1 * m1[i] + (1.0 - b1) * grad[i];
                m2[i] = b2 * m2[i] + (1.0 - b2) * grad[i] * grad[i];
                let mh = m1[i] / (1.0 - b1.powi(t));
                let vh = m2[i] / (1.0 - b2.powi(t));
                params[i] -= 0.05 * mh / (vh.sqrt() + 1e-8);
            }
        }
        model.set_params_flat(&best.1).unwrap();
        model.finalize().unwrap();
        let means = model.mean_outcomes(&region.x, 1, 0).unwrap();
        println!(
            "seed {:2}: committed-init nll {:.1} region rmse {:.3}",
            data_seed, best.0, rmse(&means, &truth).unwrap()
        );
    }
}
