//! Command line front end: run scenarios, verify log dumps, inspect
//! expressions.
//!
//! Exit codes: 0 success, 2 usage/input error, 3 a verified log is
//! provisionally valid (pending re-chaining), 4 a verified log is
//! invalid.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use swarmlog::log::Log;
use swarmlog::naming::Expression;
use swarmlog::scenario::Scenario;
use swarmlog::Validity;

#[derive(Parser)]
#[command(
    name = "swarmlog",
    version,
    about = "Swarm computation over replicated signed logs"
)]
struct Cli {
    /// Suppress non-essential output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write the trace (JSON lines + final metrics).
    Run {
        scenario: PathBuf,
        /// Override the scenario's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the trace here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the simulated duration (milliseconds).
        #[arg(long)]
        duration: Option<u64>,
    },
    /// Verify the signature chain of a binary log dump.
    Verify { dump: PathBuf },
    /// Parse an expression, print its tree and canonical form.
    Expr {
        text: String,
        /// Re-parse the canonical output and require equality.
        #[arg(long)]
        roundtrip: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            duration,
        } => cmd_run(&scenario, seed, out.as_deref(), duration, cli.quiet),
        Command::Verify { dump } => cmd_verify(&dump, cli.quiet),
        Command::Expr { text, roundtrip } => cmd_expr(&text, roundtrip, cli.quiet),
    }
}

fn fail(message: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(2)
}

fn cmd_run(
    path: &std::path::Path,
    seed: Option<u64>,
    out: Option<&std::path::Path>,
    duration: Option<u64>,
    quiet: bool,
) -> ExitCode {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return fail(format_args!("{}: {e}", path.display())),
    };
    let mut scenario = match Scenario::from_json(&text) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    if let Some(duration) = duration {
        scenario.duration = duration;
        if let Err(e) = scenario.validate() {
            return fail(e);
        }
    }
    let output = match swarmlog::run(&scenario) {
        Ok(o) => o,
        Err(e) => return fail(e),
    };
    let rendered = output.to_jsonl();
    match out {
        Some(out_path) => {
            if let Err(e) = fs::write(out_path, rendered) {
                return fail(format_args!("{}: {e}", out_path.display()));
            }
            if !quiet {
                println!(
                    "{} records, {} tasks, written to {}",
                    output.trace.len(),
                    output.metrics.tasks.len(),
                    out_path.display()
                );
            }
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            if stdout.write_all(rendered.as_bytes()).is_err() {
                return ExitCode::from(2);
            }
        }
    }
    ExitCode::SUCCESS
}

fn cmd_verify(path: &std::path::Path, quiet: bool) -> ExitCode {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) => return fail(format_args!("{}: {e}", path.display())),
    };
    let log = match Log::read_dump(&mut &bytes[..]) {
        Ok(l) => l,
        Err(e) => return fail(e),
    };
    let report = log.verify_chain();
    if !quiet {
        println!("log:            {}", log.name());
        println!("entries:        {}", log.len());
        println!("signatures ok:  {}", report.signatures_ok);
        if report.chain_breaks.is_empty() {
            println!("chain breaks:   none");
        } else {
            let breaks: Vec<String> =
                report.chain_breaks.iter().map(usize::to_string).collect();
            println!("chain breaks:   {}", breaks.join(", "));
        }
        println!("verdict:        {:?}", report.verdict);
    }
    match report.verdict {
        Validity::Valid => ExitCode::SUCCESS,
        Validity::ProvisionallyValid => ExitCode::from(3),
        Validity::Invalid => ExitCode::from(4),
    }
}

fn cmd_expr(text: &str, roundtrip: bool, quiet: bool) -> ExitCode {
    let expr = match Expression::parse(text) {
        Ok(e) => e,
        Err(e) => return fail(e),
    };
    let canonical = expr.text();
    if roundtrip {
        match Expression::parse(&canonical) {
            Ok(again) if again == expr => {}
            _ => return fail("canonical form failed to re-parse identically"),
        }
    }
    if !quiet {
        print_tree(&expr, 0);
        println!("canonical: {canonical}");
        let tree = expr.decompose();
        println!("subtasks:  {}", tree.subtasks.len());
        for sub in &tree.subtasks {
            println!("  {sub}");
        }
    }
    ExitCode::SUCCESS
}

fn print_tree(e: &Expression, depth: usize) {
    let pad = "  ".repeat(depth);
    match e {
        Expression::DataRef(n) => println!("{pad}data {n}"),
        Expression::Call {
            function,
            arguments,
        } => {
            println!("{pad}call {function}");
            for a in arguments {
                print_tree(a, depth + 1);
            }
        }
    }
}
