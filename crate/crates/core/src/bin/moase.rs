use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use moase::harness::{
    accuracy, pretrain_source, run_episode, set_daopd_param, source_split, EpisodeMetrics,
    Pretrained, RunConfig, VALIDATION_STREAM,
};
use moase::model::{load_checkpoint, save_checkpoint, ModelPair};
use moase::stream::{default_domains, identity_domains};
use moase::Error;

/// Continual test-time adaptation on synthetic domain streams.
#[derive(Debug, Parser)]
#[command(name = "moase", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the source model on clean data and write a checkpoint.
    Pretrain(Common),
    /// Run one adaptation episode.
    Adapt(Common),
    /// Run one episode per value of a DA-OPD hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// ema_alpha, views, temperature, opd_weight, strength_penalty,
        /// policy_beta, restore_prob or lr.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Emit per-step divergence diagnostics.
    Diag(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, env = "MOASE_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "MOASE_SEED")]
    seed: Option<u64>,
    /// source-frozen, mean-teacher-only, moase or moase++.
    #[arg(long, env = "MOASE_MODE")]
    mode: Option<String>,
    /// Built-in domain sequence: `default` or `identity`.
    #[arg(long, env = "MOASE_STREAM")]
    stream: Option<String>,
    #[arg(long, env = "MOASE_ROUNDS")]
    rounds: Option<usize>,
    /// Output directory.
    #[arg(long, env = "MOASE_OUT", default_value = "moase-out")]
    out: PathBuf,
    /// Source checkpoint to start from instead of pretraining.
    #[arg(long, env = "MOASE_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut run = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            run = run.with_seed(seed);
        }
        if let Some(m) = &self.mode {
            run.mode = m.parse()?;
        }
        if let Some(s) = &self.stream {
            let duration = run.stream.domains.first().map_or(50, |d| d.duration);
            run.stream.domains = match s.as_str() {
                "default" => default_domains(duration),
                "identity" => identity_domains(duration),
                other => {
                    return Err(Error::Config {
                        path: "stream".into(),
                        message: format!("unknown stream `{other}`"),
                    })
                }
            };
        }
        if let Some(r) = self.rounds {
            run.stream.rounds = r;
        }
        run.validate()?;
        Ok(run)
    }

    fn source(&self, run: &RunConfig) -> Result<Pretrained, Error> {
        match &self.checkpoint {
            Some(path) => {
                let (cfg, params) = load_checkpoint(path)?;
                if cfg != run.model {
                    return Err(Error::Config {
                        path: "model".into(),
                        message: "checkpoint was written for a different model config".into(),
                    });
                }
                let (vx, vy) = source_split(
                    &run.stream.task,
                    run.seed,
                    run.pretrain.validation_size,
                    VALIDATION_STREAM,
                );
                let acc = accuracy(&params, &cfg, &vx, &vy)?;
                Ok(Pretrained {
                    pair: ModelPair::new(cfg, params)?,
                    accuracy: acc,
                    reached_target: acc >= run.pretrain.target_accuracy,
                    steps: 0,
                })
            }
            None => {
                let p = pretrain_source(run)?;
                if !p.reached_target {
                    eprintln!(
                        "warning: source accuracy {:.4} below target {:.2}",
                        p.accuracy, run.pretrain.target_accuracy
                    );
                }
                Ok(p)
            }
        }
    }
}

fn print_summary(m: &EpisodeMetrics) {
    println!(
        "mode={} seed={} source_accuracy={:.4}",
        m.mode, m.seed, m.source_accuracy
    );
    for s in &m.summary {
        println!(
            "  round {} {:<12} error={:.4} js={:.4} ic={:.4}",
            s.round, s.domain, s.mean_error, s.mean_js, s.mean_ic
        );
    }
    println!("mean_error={:.4}", m.mean_error);
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Pretrain(common) => {
            let run = common.resolve()?;
            let p = common.source(&run)?;
            std::fs::create_dir_all(&common.out)?;
            let path = common.out.join("source.ckpt");
            save_checkpoint(&path, &p.pair.config, p.pair.source())?;
            println!(
                "source_accuracy={:.4} steps={} hash={} checkpoint={}",
                p.accuracy,
                p.steps,
                p.pair.source().hash(),
                path.display()
            );
        }
        Command::Adapt(common) => {
            let run = common.resolve()?;
            let src = common.source(&run)?;
            let m = run_episode(&run, &src)?;
            m.write_to_dir(&common.out)?;
            print_summary(&m);
        }
        Command::Sweep {
            common,
            param,
            values,
        } => {
            let base = common.resolve()?;
            let src = common.source(&base)?;
            std::fs::create_dir_all(&common.out)?;
            let mut rows = vec!["param,value,mode,mean_error,last_domain_js".to_string()];
            for v in values {
                let mut run = base.clone();
                set_daopd_param(&mut run.daopd, &param, v)?;
                let m = run_episode(&run, &src)?;
                let last = m.last_domain();
                let js = last.iter().map(|r| r.js).sum::<f64>() / last.len().max(1) as f64;
                let row = format!("{param},{v},{},{:.6},{:.6}", run.mode, m.mean_error, js);
                println!("{row}");
                rows.push(row);
                m.write_to_dir(&common.out.join(format!("{param}={v}")))?;
            }
            std::fs::write(common.out.join("sweep.csv"), rows.join("\n") + "\n")?;
        }
        Command::Diag(common) => {
            let run = common.resolve()?;
            let src = common.source(&run)?;
            let m = run_episode(&run, &src)?;
            write_diag(&m, &common.out)?;
            print_summary(&m);
        }
    }
    Ok(())
}

fn write_diag(m: &EpisodeMetrics, dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    let classes = m.records.first().map_or(0, |r| r.ic.len());
    let mut text = String::from("step,round,domain,js");
    for c in 0..classes {
        text.push_str(&format!(",ic_{c}"));
    }
    text.push('\n');
    for r in &m.records {
        text.push_str(&format!("{},{},{},{:.6}", r.step, r.round, r.domain, r.js));
        for ic in &r.ic {
            match ic {
                Some(v) => text.push_str(&format!(",{v:.6}")),
                None => text.push(','),
            }
        }
        text.push('\n');
    }
    std::fs::write(dir.join("diag.csv"), text)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config { .. } => 2,
                Error::Numeric(_) => 3,
                _ => 1,
            })
        }
    }
}
