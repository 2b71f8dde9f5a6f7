use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use ddpc_cli::pipeline::{self, CellResult, Prepared};
use ddpc_cli::report;
use ddpc_cli::scenario::Scenario;
use ddpc_cli::CliError;

#[derive(Parser)]
#[command(
    name = "ddpc",
    version,
    about = "Distributed data-based predictive control experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed loop with the scenario's controller settings.
    Run(Common),
    /// Closed loops over the [sweep] thresholds.
    Sweep(Common),
    /// Persistency-of-excitation report for the recorded data.
    CheckPe(Common),
    /// Write the sampled system and recorded data.
    GenData(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML).
    scenario: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<(Scenario, PathBuf), CliError> {
        let mut scenario = Scenario::load(&self.scenario)?;
        if let Some(seed) = self.seed {
            scenario.seed = seed;
        }
        if let Some(out) = &self.out {
            scenario.output.dir = out.clone();
        }
        scenario.validate()?;
        let dir = scenario.output.dir.clone();
        Ok((scenario, dir))
    }
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
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(args) => {
            let (scenario, dir) = args.load()?;
            let prepared = checked(&scenario, &dir)?;
            let cell = scenario.run_cell();
            let started = Instant::now();
            let result = pipeline::run_cell(&prepared, cell)?;
            finish(&prepared, &dir, vec![result], started)
        }
        Command::Sweep(args) => {
            let (scenario, dir) = args.load()?;
            let cells = scenario.sweep_cells()?;
            let prepared = checked(&scenario, &dir)?;
            let started = Instant::now();
            let results = pipeline::run_cells(&prepared, &cells)
                .into_iter()
                .collect::<Result<Vec<_>, _>>()?;
            finish(&prepared, &dir, results, started)
        }
        Command::CheckPe(args) => {
            let (scenario, dir) = args.load()?;
            let prepared = pipeline::prepare(&scenario)?;
            let path = report::write_pe_report(&dir, &scenario.resolved(), &prepared.pe)?;
            print!("{}", report::pe_text(&prepared.pe));
            println!("wrote {}", path.display());
            prepared.pe.require(scenario.data.identifiability)
        }
        Command::GenData(args) => {
            let (scenario, dir) = args.load()?;
            let prepared = pipeline::prepare(&scenario)?;
            report::write_data(&dir, &prepared)?;
            println!(
                "{} nodes, n = {}, m = {}, {} samples written to {}",
                prepared.layout().node_count(),
                prepared.layout().n(),
                prepared.layout().m(),
                prepared.data.trajectory.len(),
                dir.display()
            );
            Ok(())
        }
    }
}

/// Prepares the scenario and refuses to control when identifiability fails.
fn checked(scenario: &Scenario, dir: &Path) -> Result<Prepared, CliError> {
    let prepared = pipeline::prepare(scenario)?;
    report::write_pe_report(dir, &scenario.resolved(), &prepared.pe)?;
    prepared.pe.require(scenario.data.identifiability)?;
    Ok(prepared)
}

fn finish(prepared: &Prepared, dir: &Path, results: Vec<CellResult>, started: Instant) -> Result<(), CliError> {
    let config = prepared.scenario.resolved();
    for r in &results {
        report::write_cell(dir, &config, r)?;
    }
    report::write_iterations(dir, &config, &results)?;
    let summaries: Vec<_> = results.iter().map(|r| r.summary.clone()).collect();
    report::write_summary(dir, &config, &summaries)?;
    let trends = pipeline::trend_checks(&summaries);
    if !trends.is_empty() {
        report::write_trends(dir, &config, &trends)?;
    }
    println!("scenario {} (seed {})", prepared.scenario.name, prepared.scenario.seed);
    print!("{}", report::summary_table(&summaries));
    print!("{}", report::trend_text(&trends));
    println!("{:.1} s, outputs in {}", started.elapsed().as_secs_f64(), dir.display());
    Ok(())
}
