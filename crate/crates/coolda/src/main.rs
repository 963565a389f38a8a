use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use coolda::{console_router, lint_definition, tools_router, BackgroundHttp};
use coolda_core::canonical;
use coolda_core::harness::{check_replay, load_definition, read_trace, run_scenario, write_trace, RunMode, RunOptions, ScenarioScript};
use coolda_core::registry::RegistryError;
use coolda_core::server::{ActivityServer, ServerConfig};
use coolda_core::tools::{example_registry, package_examples};
use coolda_core::wire::TcpFront;

#[derive(Parser)]
#[command(name = "coolda", version, about = "Inter-activity server, tool host and scenario driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario script; exit 1 if any expectation fails.
    RunScenario {
        file: PathBuf,
        #[arg(long, default_value = "inprocess")]
        mode: RunMode,
        /// Write the trace as JSON lines.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Re-feed a trace's external inputs to a fresh server and diff the result.
    Replay {
        #[arg(long)]
        check: PathBuf,
    },
    /// Fetch a tool and print its descriptor as canonical JSON.
    Describe { url: String },
    /// Print the cascade graph of a definition; exit 4 on cycles.
    Lint { definition: PathBuf },
    /// Host-link server (NDJSON over TCP) plus the console HTTP API.
    Serve {
        #[arg(long, default_value_t = 7400)]
        port: u16,
        #[arg(long, default_value_t = 7480)]
        http_port: u16,
        #[arg(long, default_value_t = coolda_core::engine::MAX_CASCADE_DEPTH)]
        max_depth: u32,
    },
    /// Serve packaged tool artifacts over plain HTTP.
    ServeTools {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 7490)]
        port: u16,
    },
    /// Write one artifact per bundled tool into a directory.
    PackageTools { dir: PathBuf },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::RunScenario { file, mode, trace_out } => run(file, mode, trace_out),
        Command::Replay { check } => replay(check),
        Command::Describe { url } => describe(&url),
        Command::Lint { definition } => lint(definition),
        Command::Serve { port, http_port, max_depth } => serve(port, http_port, max_depth),
        Command::ServeTools { dir, port } => serve_tools(dir, port),
        Command::PackageTools { dir } => match package_examples(&dir) {
            Ok(names) => {
                for n in names {
                    println!("{}", dir.join(n).display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(format!("{}: {e}", dir.display())),
        },
    }
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::FAILURE
}

fn run(file: PathBuf, mode: RunMode, trace_out: Option<PathBuf>) -> ExitCode {
    let (script, base) = match ScenarioScript::load(&file) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let opts = RunOptions { mode, ..Default::default() };
    let result = match run_scenario(&script, &base, &opts) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    for e in &result.expects {
        let pred = serde_json::to_string(&e.predicate).unwrap_or_default();
        let verdict = if e.passed { "ok  " } else { "FAIL" };
        println!("{verdict} step {} @{} {pred} {}", e.step, e.at, e.detail);
    }
    if let Some(path) = trace_out {
        let written = std::fs::File::create(&path).and_then(|f| write_trace(&result.trace, std::io::BufWriter::new(f)));
        if let Err(e) = written {
            return fail(format!("{}: {e}", path.display()));
        }
    }
    println!(
        "{}: {} entries, {}/{} expectations passed",
        script.name,
        result.trace.entries.len(),
        result.expects.iter().filter(|e| e.passed).count(),
        result.expects.len()
    );
    if result.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn replay(path: PathBuf) -> ExitCode {
    let trace = match std::fs::File::open(&path) {
        Ok(f) => match read_trace(BufReader::new(f)) {
            Ok(t) => t,
            Err(e) => return fail(e),
        },
        Err(e) => return fail(format!("{}: {e}", path.display())),
    };
    match check_replay(&trace, Arc::new(example_registry()), ServerConfig::default()) {
        Ok(diff) if diff.is_empty() => {
            println!("replay matches ({} entries)", trace.entries.len());
            ExitCode::SUCCESS
        }
        Ok(diff) => {
            print!("{diff}");
            ExitCode::FAILURE
        }
        Err(e) => fail(e),
    }
}

fn describe(url: &str) -> ExitCode {
    match example_registry().resolve(url) {
        Ok(tool) => {
            println!("{}", canonical::to_canonical_string(&tool.descriptor).expect("descriptor serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                RegistryError::NetworkUnreachable(_) | RegistryError::HttpStatus(_) | RegistryError::EmptyBody => {
                    ExitCode::from(3)
                }
                _ => ExitCode::from(2),
            }
        }
    }
}

fn lint(path: PathBuf) -> ExitCode {
    let def = match load_definition(&path) {
        Ok(d) => d,
        Err(e) => return fail(e),
    };
    let (graph, unresolved) = lint_definition(&def, &example_registry());
    for (url, why) in unresolved {
        eprintln!("warning: {url} not resolved ({why}); its commands add no edges");
    }
    for e in &graph.edges {
        println!("{} -> {}  [{}]", e.from, e.to, e.bindings.join(", "));
    }
    for c in &graph.cycles {
        let names: Vec<String> = c.iter().map(ToString::to_string).collect();
        println!("cycle: {} -> {}", names.join(" -> "), names[0]);
    }
    if graph.has_cycles() {
        ExitCode::from(4)
    } else {
        ExitCode::SUCCESS
    }
}

fn serve(port: u16, http_port: u16, max_cascade_depth: u32) -> ExitCode {
    let server = Arc::new(ActivityServer::new(
        Arc::new(example_registry()),
        ServerConfig { max_cascade_depth },
    ));
    let front = match TcpFront::bind(server.clone(), &format!("0.0.0.0:{port}")) {
        Ok(f) => f,
        Err(e) => return fail(format!("host link port {port}: {e}")),
    };
    let http = match BackgroundHttp::start(console_router(server), ("0.0.0.0", http_port)) {
        Ok(h) => h,
        Err(e) => return fail(format!("http port {http_port}: {e}")),
    };
    eprintln!("host link on {}, console api on {}", front.local_addr(), http.local_addr());
    front.wait();
    ExitCode::SUCCESS
}

fn serve_tools(dir: PathBuf, port: u16) -> ExitCode {
    let http = match BackgroundHttp::start(tools_router(&dir), ("0.0.0.0", port)) {
        Ok(h) => h,
        Err(e) => return fail(format!("port {port}: {e}")),
    };
    eprintln!("serving {} on {}", dir.display(), http.local_addr());
    loop {
        std::thread::park();
    }
}
