use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use conr::datagen::{self, SyntheticSpec};
use conr::eval::{assign_shots, metrics, MetricsReport};
use conr::experiment::{
    ablation_configs, compare_methods, run_experiment_with_echo, ExperimentConfig,
};
use conr::{ConrError, Result};

#[derive(Parser)]
#[command(
    name = "conr",
    version,
    about = "Contrastive regularization for imbalanced regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run several configs over several seeds and tabulate test metrics.
    Compare {
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, default_value = "runs/compare")]
        out: PathBuf,
        /// Expand each config into the five regularizer variants.
        #[arg(long)]
        ablation: bool,
    },
    /// Write a synthetic train/test pair and its manifest.
    GenerateData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "data")]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Shot-partitioned metrics of a prediction file. Values are read from the
    /// last column of each CSV.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Training labels for shot counting; defaults to `--labels`.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        bin_width: f64,
        /// Also write metrics.json and metrics.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ConrError + '_ {
    move |e| ConrError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn last_column(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = rec.iter().next_back().ok_or_else(|| ConrError::Parse {
            path: path.display().to_string(),
            line,
            message: "empty row".into(),
        })?;
        let v: f64 = field.trim().parse().map_err(|_| ConrError::Parse {
            path: path.display().to_string(),
            line,
            message: format!("not a number: {field:?}"),
        })?;
        if !v.is_finite() {
            return Err(ConrError::Parse {
                path: path.display().to_string(),
                line,
                message: "non-finite value".into(),
            });
        }
        out.push(v);
    }
    Ok(out)
}

fn print_report(report: &MetricsReport) {
    println!(
        "{:<8} {:>6} {:>10} {:>10} {:>10}",
        "shot", "count", "MAE", "RMSE", "GM"
    );
    for (name, m) in report.shots() {
        match m {
            Some(m) => println!(
                "{name:<8} {:>6} {:>10.4} {:>10.4} {:>10.4}",
                m.count, m.mae, m.rmse, m.gm
            ),
            None => println!("{name:<8} {:>6} {:>10} {:>10} {:>10}", 0, "-", "-", "-"),
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let text = std::fs::read_to_string(&config).map_err(io_err(&config))?;
            let mut cfg = ExperimentConfig::load(&config)?;
            let overridden = out.is_some() || seed.is_some();
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let echo = (!overridden).then_some(text.as_str());
            let result = run_experiment_with_echo(&cfg, echo)?;
            println!(
                "{} seed {}: {} epochs in {:.1}s, artifacts in {}",
                result.name,
                result.seed,
                result.epochs.len(),
                result.wall_clock_secs,
                cfg.output_dir.display()
            );
            print_report(&result.test);
            println!(
                "collapse rate {:.4} -> {:.4}",
                result.collapse_rate_initial, result.collapse_rate_final
            );
        }
        Command::Compare {
            configs,
            seeds,
            out,
            ablation,
        } => {
            let mut loaded = configs
                .iter()
                .map(|p| ExperimentConfig::load(p))
                .collect::<Result<Vec<_>>>()?;
            if ablation {
                loaded = loaded.iter().flat_map(ablation_configs).collect();
            }
            let cmp = compare_methods(&loaded, &seeds, &out)?;
            if ablation {
                cmp.write_ablation_csv(&out.join("ablation.csv"))?;
            }
            println!(
                "{:<20} {:<24} {:>10} {:>10}",
                "method", "statistic", "all_mae", "few_mae"
            );
            for r in &cmp.summary {
                let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
                println!(
                    "{:<20} {:<24} {:>10} {:>10}",
                    r.method,
                    r.statistic,
                    f(r.values[0]),
                    f(r.values[3])
                );
            }
            println!("tables written to {}", out.display());
        }
        Command::GenerateData { spec, out, seed } => {
            let text = std::fs::read_to_string(&spec).map_err(io_err(&spec))?;
            let mut s: SyntheticSpec = toml::from_str(&text)
                .map_err(|e| ConrError::Config(format!("{}: {e}", spec.display())))?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let m = datagen::write_generated(&s, &out)?;
            println!(
                "wrote {} train and {} test samples to {}",
                m.n_train,
                m.n_test,
                out.display()
            );
        }
        Command::Eval {
            preds,
            labels,
            train,
            bin_width,
            out,
        } => {
            let p = last_column(&preds)?;
            let y = last_column(&labels)?;
            let train_labels = match &train {
                Some(t) => last_column(t)?,
                None => y.clone(),
            };
            let partition = assign_shots(&train_labels, bin_width)?;
            let report = metrics(&p, &y, &partition)?;
            print_report(&report);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                let json = dir.join("metrics.json");
                std::fs::write(&json, serde_json::to_string_pretty(&report)?)
                    .map_err(io_err(&json))?;
                let csv_path = dir.join("metrics.csv");
                let f = std::fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
                report.write_csv(f)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
