//! Benchmark CLI: simulate environments, fit models, predict counterfactual
//! outcomes, and run replicated experiments from a config file.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use countergp::bench::{self, DgpConfig, DgpKind, ExperimentConfig};
use countergp::coregion::TaskIndex;
use countergp::model::{fit, FitConfig, ModelVariant, TrainedModel};
use countergp::sim;

#[derive(Parser)]
#[command(name = "countergp", version, about = "Counterfactual multitask GP and deep-kernel regression benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a simulated dataset and its ground-truth oracle sidecar.
    Simulate {
        /// Environment: b1, b2, confounded, or ope-synth.
        #[arg(long)]
        dgp: String,
        /// Number of units.
        #[arg(long)]
        n: usize,
        /// Number of covariates (b2/confounded need >= 7; b1 ignores it).
        #[arg(long, default_value_t = 1)]
        p: usize,
        /// Confounding strength for the confounded environment.
        #[arg(long, default_value_t = 0.0)]
        gamma: f64,
        /// Number of actions for ope-synth.
        #[arg(long, default_value_t = 2)]
        actions: usize,
        #[arg(long)]
        seed: u64,
        /// Output CSV path; the oracle sidecar goes to <out>.oracle.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model variant to a dataset CSV.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// gp, countergp, mogp, dkl, counterdkl, or modkl.
        #[arg(long)]
        variant: ModelVariant,
        /// Hidden layer widths for deep-kernel variants.
        #[arg(long, value_delimiter = ',', default_values_t = [50usize, 50, 2])]
        hidden: Vec<usize>,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 500)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        model_out: PathBuf,
    },
    /// Posterior predictions for one (action, outcome) task at every row of
    /// a dataset CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        action: usize,
        #[arg(long)]
        outcome: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a replicated experiment (optionally a sweep) from a TOML config.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Simulate { dgp, n, p, gamma, actions, seed, out } => {
            let kind = DgpKind::parse(&dgp)?;
            let cfg = DgpConfig { kind, n, p, gamma, actions };
            let (data, oracle) = cfg.generate(seed)?;
            sim::write_csv_path(&data, &out)?;
            let sidecar = oracle_sidecar_path(&out);
            oracle.save_json(std::io::BufWriter::new(std::fs::File::create(&sidecar)?))?;
            eprintln!(
                "wrote {} units ({} actions, {} outcomes) to {} (+ {})",
                data.len(),
                data.meta.num_actions,
                data.meta.num_outcomes,
                out.display(),
                sidecar.display()
            );
        }
        Command::Fit { data, variant, hidden, lr, iters, seed, model_out } => {
            let dataset = sim::read_csv_path(&data)?;
            let cfg = FitConfig {
                learning_rate: lr,
                iterations: iters,
                seed,
                hidden,
                ..FitConfig::default()
            };
            let model = fit(variant, &dataset, &cfg)?;
            model.save_json(std::io::BufWriter::new(std::fs::File::create(&model_out)?))?;
            eprintln!(
                "fit {} on {} units: nll {:.6} -> {:.6} (best {:.6}); saved to {}",
                variant,
                dataset.len(),
                model.nll_trajectory.first().unwrap_or(&f64::NAN),
                model.nll_trajectory.last().unwrap_or(&f64::NAN),
                model.best_nll,
                model_out.display()
            );
        }
        Command::Predict { model, data, action, outcome, out } => {
            let model = TrainedModel::load_json(std::fs::File::open(&model)?)?;
            let dataset = sim::read_csv_path(&data)?;
            let preds = model.predict_many(&dataset.x, TaskIndex::new(action, outcome))?;
            use std::io::Write;
            let mut w = std::io::BufWriter::new(std::fs::File::create(&out)?);
            writeln!(w, "mean,variance,lower95,upper95")?;
            for p in &preds {
                writeln!(
                    w,
                    "{:.16e},{:.16e},{:.16e},{:.16e}",
                    p.mean, p.variance, p.lower95, p.upper95
                )?;
            }
            w.flush()?;
            eprintln!("wrote {} predictions to {}", preds.len(), out.display());
        }
        Command::Benchmark { config, out_dir } => {
            let text = std::fs::read_to_string(&config)?;
            let cfg = ExperimentConfig::from_toml(&text)?;
            let output =
                if cfg.sweep.is_some() { bench::sweep(&cfg)? } else { bench::run_experiment(&cfg)? };
            bench::write_outputs(&output, &cfg, &out_dir)?;
            let failed = output.rows.iter().filter(|r| r.failed).count();
            eprintln!(
                "{} result rows ({} failed-fit rows) written to {}",
                output.rows.len(),
                failed,
                out_dir.display()
            );
        }
    }
    Ok(())
}

fn oracle_sidecar_path(out: &std::path::Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".oracle.json");
    out.with_file_name(name)
}
