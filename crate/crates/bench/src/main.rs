use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mrbsp_bench::{run_experiment, write_csv, BenchError, ExperimentKind, ExperimentSpec};
use mrbsp_core::{Backend, ClusterConfig, Shape, TransportKind};

/// Sweep the distributed sort or the graph exploration and print a CSV
/// summary (`experiment,backend,shape,value,mean_s,stddev_s,ok,fail`).
#[derive(Parser, Debug)]
#[command(name = "bench", version)]
struct Args {
    kind: ExperimentKind,
    /// Comma separated: a, smp, sms.
    #[arg(long, value_delimiter = ',')]
    backends: Option<Vec<Backend>>,
    /// Comma separated AxB shapes, e.g. 2x2,2x4.
    #[arg(long, value_delimiter = ',')]
    shapes: Option<Vec<Shape>>,
    /// Strictly increasing sweep values: array sizes or agents per node.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<usize>>,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// inproc or tcp.
    #[arg(long)]
    transport: Option<TransportKind>,
    /// key=value cluster config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    worker_cap: Option<usize>,
    /// Summary CSV destination; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write every run as a JSON line here.
    #[arg(long)]
    records: Option<PathBuf>,
}

impl Args {
    fn spec(&self) -> Result<ExperimentSpec, BenchError> {
        let cfg = match &self.config {
            Some(p) => ClusterConfig::load(p)?,
            None => ClusterConfig::default(),
        };
        let mut spec = ExperimentSpec::new(self.kind);
        spec.reps = self.reps;
        spec.seed = self.seed;
        spec.transport = self.transport.unwrap_or(cfg.cluster.transport);
        spec.workers_per_node = self.workers.unwrap_or(cfg.cluster.workers_per_node);
        spec.worker_cap = self.worker_cap.unwrap_or(cfg.cluster.worker_cap);
        spec.max_chunk_bytes = cfg.transport.max_chunk_bytes;
        if let Some(b) = &self.backends {
            spec.backends = b.clone();
        } else if self.config.is_some() {
            spec.backends = vec![cfg.cluster.backend];
        }
        if let Some(s) = &self.shapes {
            spec.shapes = s.clone();
        }
        if let Some(v) = &self.values {
            spec.values = v.clone();
        }
        Ok(spec)
    }
}

fn run(args: &Args) -> Result<bool, BenchError> {
    let spec = args.spec()?;
    let exp = run_experiment(&spec)?;
    match &args.out {
        Some(p) => write_csv(&exp.summary, BufWriter::new(File::create(p)?))?,
        None => write_csv(&exp.summary, io::stdout().lock())?,
    }
    if let Some(p) = &args.records {
        let mut w = BufWriter::new(File::create(p)?);
        for r in &exp.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        w.flush()?;
    }
    Ok(exp.all_cells_accounted())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some cells have neither an Ok run nor a worker-cap failure");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("bench: {e}");
            ExitCode::from(2)
        }
    }
}
