//! `pitchcatch`: runs scenario files and writes CSV tables.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use pitchcatch::pulseshaper::{max_correctable_distortion, DmaxMethod};
use pitchcatch::scenario::{
    calibration_report, mhz_to_rad_per_ns, run_point, sweep_kappa, write_results_csv,
    write_timings_csv, PointSetup, ResultRecord, ScenarioConfig,
};

#[derive(Parser)]
#[command(
    name = "pitchcatch",
    version,
    about = "Pitch-and-catch state transfer over dispersive waveguides"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the controls of every configured strategy and dump them.
    Pulse(Common),
    /// Single-node pilot emission and effective-model calibration.
    Emit(Common),
    /// Full transfer at the configured kappa.
    Transfer(Common),
    /// Every kappa of the sweep list.
    Sweep(Common),
    /// Maximum correctable distortion, scan against the closed form.
    Dmax(Common),
    /// Print a preset scenario as JSON.
    Config {
        #[arg(long)]
        preset: String,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario JSON file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in scenario instead of a file.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the protocol step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Worker threads for sweeps.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

impl Common {
    fn load(&self) -> Result<ScenarioConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| pitchcatch::Error::Config(format!("{}: {e}", path.display())))?;
                ScenarioConfig::from_json(&text)?
            }
            (None, Some(name)) => ScenarioConfig::preset(name).ok_or_else(|| {
                pitchcatch::Error::Config(format!(
                    "unknown preset {name}; available: {}",
                    ScenarioConfig::PRESETS.join(", ")
                ))
            })?,
            (None, None) => {
                return Err(pitchcatch::Error::Config("pass --config or --preset".into()).into())
            }
        };
        if let Some(n) = self.steps {
            cfg.protocol.steps = n;
        }
        if self.workers == 0 {
            return Err(pitchcatch::Error::Config("--workers must be at least 1".into()).into());
        }
        cfg.validate()?;
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        write_text(
            &self.out.join(&cfg.outputs.resolved_config),
            &(cfg.to_json() + "\n"),
        )?;
        Ok(cfg)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_tables(out: &Path, cfg: &ScenarioConfig, records: &[ResultRecord]) -> Result<()> {
    let mut w = create(&out.join(&cfg.outputs.results))?;
    write_results_csv(records, &mut w)?;
    w.flush()?;
    let mut w = create(&out.join(&cfg.outputs.timings))?;
    write_timings_csv(records, &mut w)?;
    w.flush()?;
    Ok(())
}

fn summarize(records: &[ResultRecord]) {
    for r in records {
        let f = r
            .infidelity
            .map(|x| format!("{x:.3e}"))
            .unwrap_or_else(|| "-".into());
        eprintln!(
            "{:>10.3} MHz  {:<20} 1-F = {f:<10} {}",
            r.kappa_mhz,
            r.strategy.name(),
            r.status
        );
    }
}

fn pulse(c: &Common) -> Result<()> {
    let cfg = c.load()?;
    let setup = PointSetup::new(&cfg)?;
    for s in &cfg.protocol.strategies {
        for (node, share) in cfg.protocol.distortion_share.iter().enumerate() {
            let name = format!("control_{}_node{}.csv", s.name(), node + 1);
            match setup.control(&cfg, *s, *share)? {
                Some(mut g) => {
                    if node == 1 {
                        g = pitchcatch::pulseshaper::receiver_control(&g)?;
                    }
                    let mut w = create(&c.out.join(&name))?;
                    g.write_csv(&mut w)?;
                    w.flush()?;
                    eprintln!("{name}: max |g| = {:.4} rad/ns", g.max_abs());
                }
                None => eprintln!(
                    "{name}: infeasible, D share {:.4} ns² exceeds D_max {:.4} ns²",
                    share * setup.distortion,
                    setup.d_max
                ),
            }
        }
    }
    Ok(())
}

fn emit(c: &Common) -> Result<()> {
    let cfg = c.load()?;
    let rep = calibration_report(&cfg)?;
    let mut w = create(&c.out.join("calibration.csv"))?;
    rep.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&c.out.join("emission.csv"))?;
    rep.trajectory.write_csv(&mut w)?;
    w.flush()?;
    let p = rep.params();
    let e = &rep.estimate;
    let summary = serde_json::json!({
        "kappa_mhz": cfg.nodes.kappa_mhz,
        "kappa_est_mhz": p.kappa / mhz_to_rad_per_ns(1.0),
        "lamb_shift_mhz": p.lamb_shift / mhz_to_rad_per_ns(1.0),
        "non_markov": [p.non_markov.re, p.non_markov.im],
        "non_markov_abs": p.non_markov.norm(),
        "non_markov_arg": p.non_markov.arg(),
        "memory_mean": [e.memory_mean.re, e.memory_mean.im],
        "memory_relative_std": e.memory_relative_std,
        "cavity_samples": e.cavity_samples,
        "memory_samples": e.memory_samples,
        "norm_drift": rep.trajectory.norm_drift(),
        "steps": rep.trajectory.steps(),
    });
    write_text(
        &c.out.join("calibration.json"),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    eprintln!(
        "kappa {:.4} MHz, Lamb shift {:.4} MHz, N = {:.5} {:+.5}i (relative spread {:.3})",
        p.kappa / mhz_to_rad_per_ns(1.0),
        p.lamb_shift / mhz_to_rad_per_ns(1.0),
        p.non_markov.re,
        p.non_markov.im,
        e.memory_relative_std
    );
    Ok(())
}

fn transfer(c: &Common) -> Result<()> {
    let cfg = c.load()?;
    let runs = run_point(&cfg, &|_| {})?;
    if cfg.outputs.traces {
        for run in &runs {
            let tag = run.record.strategy.name();
            if let Some(t) = &run.trajectory {
                let mut w = create(&c.out.join(format!("trajectory_{tag}.csv")))?;
                t.write_csv(&mut w)?;
                w.flush()?;
            }
            for (i, g) in run.controls.iter().enumerate() {
                let mut w = create(&c.out.join(format!("control_{tag}_node{}.csv", i + 1)))?;
                g.write_csv(&mut w)?;
                w.flush()?;
            }
        }
    }
    let records: Vec<ResultRecord> = runs.into_iter().map(|r| r.record).collect();
    write_tables(&c.out, &cfg, &records)?;
    summarize(&records);
    Ok(())
}

fn sweep(c: &Common) -> Result<()> {
    let cfg = c.load()?;
    let progress = Mutex::new(create(&c.out.join(&cfg.outputs.progress))?);
    let records = sweep_kappa(&cfg, c.workers, &|r| {
        let mut w = progress.lock().expect("progress lock");
        // progress is advisory; a failed write must not abort the sweep
        let _ = serde_json::to_writer(&mut *w, r)
            .map(|_| writeln!(w))
            .map(|_| w.flush());
    })?;
    write_tables(&c.out, &cfg, &records)?;
    summarize(&records);
    Ok(())
}

fn dmax(c: &Common) -> Result<()> {
    let cfg = c.load()?;
    let mut w = create(&c.out.join("dmax.csv"))?;
    writeln!(
        w,
        "kappa_mhz,d_max_scan_ns2,d_max_law_ns2,relative_difference"
    )?;
    for k in cfg.kappas() {
        let kappa = mhz_to_rad_per_ns(k);
        let scan = max_correctable_distortion(kappa, DmaxMethod::Scan)?;
        let law = max_correctable_distortion(kappa, DmaxMethod::ClosedForm)?;
        writeln!(w, "{k:e},{scan:e},{law:e},{:e}", scan / law - 1.0)?;
        eprintln!("{k:>10.3} MHz  D_max scan {scan:.5e} ns², law {law:.5e} ns²");
    }
    w.flush()?;
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<pitchcatch::Error>() {
        Some(pe) if pe.is_validation() => 2,
        Some(_) => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pulse(c) => pulse(c),
        Command::Emit(c) => emit(c),
        Command::Transfer(c) => transfer(c),
        Command::Sweep(c) => sweep(c),
        Command::Dmax(c) => dmax(c),
        Command::Config { preset } => match ScenarioConfig::preset(preset) {
            Some(cfg) => {
                println!("{}", cfg.to_json());
                Ok(())
            }
            None => Err(pitchcatch::Error::Config(format!("unknown preset {preset}")).into()),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
