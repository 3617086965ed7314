use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use lamp_core::counterfactual::token_surrogate;
use lamp_core::experiment::{radius_sweep, SweepConfig};
use lamp_core::pipeline::run_evaluation;
use lamp_core::session::{emit_report, load_session, to_canonical_json, write_atomic};
use lamp_core::{run_audit, AuditSession, LampError, MockModel, SessionStore, TaskTemplate};

use crate::args::{AuditArgs, BenchArgs, Cli, Command, EvaluateArgs, ReportArgs};
use crate::backend::Backend;
use crate::exit::CliError;
use crate::server;

pub type CliResult<T = ()> = std::result::Result<T, CliError>;

pub async fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Audit(args) => audit(args).await,
        Command::Evaluate(args) => evaluate(args).await,
        Command::Report(args) => report(args),
        Command::Serve(args) => {
            let backend = Backend::from_args(&args.endpoint)?;
            let store = SessionStore::open(&args.sessions)?;
            server::serve(args.addr, server::AppState::new(store, backend, args.ui_dir)).await?;
            Ok(())
        }
        Command::BenchSurface(args) => bench_surface(args),
    }
}

fn read_text(args: &AuditArgs) -> CliResult<String> {
    let text = match (&args.text, &args.input) {
        (Some(t), _) => t.clone(),
        (None, Some(p)) if p.as_os_str() != "-" => fs::read_to_string(p)?,
        _ => {
            let mut buf = String::new();
            io::stdin().read_to_string(&mut buf)?;
            buf
        }
    };
    let text = text.trim().to_string();
    if text.is_empty() {
        return Err(CliError::validation("input text is empty"));
    }
    Ok(text)
}

/// Loads `reference` as a file path when one exists, otherwise as a store id.
pub fn load_reference(store: &SessionStore, reference: &str) -> CliResult<AuditSession> {
    let path = Path::new(reference);
    if path.is_file() {
        return Ok(load_session(path)?);
    }
    match store.load(reference) {
        Err(LampError::Io(e)) if e.kind() == io::ErrorKind::NotFound => {
            Err(CliError::validation(format!("no session `{reference}` in {}", store.dir().display())))
        }
        other => Ok(other?),
    }
}

fn print_summary(session: &AuditSession) {
    let s = session.summary();
    eprintln!("factors: {}", session.factors.factors.join("; "));
    eprintln!("seed probability: {:.4}", s.seed_probability);
    eprintln!("surrogate R²: {:.4}", s.r_squared);
    match s.delta_star {
        Some(r) => eprintln!("optimal radius: {r:.4}"),
        None => eprintln!("optimal radius: none"),
    }
    for w in &session.warnings {
        eprintln!("warning: {w}");
    }
}

async fn audit(args: AuditArgs) -> CliResult {
    let text = read_text(&args)?;
    let config = args.config.to_config();
    config.validate()?;
    let backend = Backend::from_args(&args.endpoint)?;
    let store = SessionStore::open(&args.sessions)?;
    let gateway = backend.gateway()?;
    match run_audit(&config, &text, &gateway).await {
        Ok(session) => {
            let path = store.save(&session)?;
            print_summary(&session);
            println!("{}\t{}", session.id, path.display());
            Ok(())
        }
        Err(failure) => {
            if let Ok(path) = store.save_draft(&failure.draft) {
                eprintln!("draft saved to {}", path.display());
            }
            Err(failure.into())
        }
    }
}

async fn evaluate(args: EvaluateArgs) -> CliResult {
    let store = SessionStore::open(&args.sessions)?;
    let mut session = load_reference(&store, &args.session)?;
    let backend = Backend::from_args(&args.endpoint)?;
    let task = TaskTemplate::builtin(&session.task).unwrap_or_else(|| backend.task.clone());
    let gateway = backend.gateway_for(task)?;
    let seed = args.seed.unwrap_or(session.probe.seed);
    let token = if args.token_baseline {
        Some(token_surrogate(&gateway, &session.text, args.token_variants, seed).await?)
    } else {
        None
    };
    let evaluation = run_evaluation(&session, &gateway, args.rewrite_count, seed, token).await?;
    let report = &evaluation.report;
    eprintln!(
        "brier: surrogate {:.4}, mean baseline {:.4}, uniform {:.4}, random {:.4}",
        report.surrogate.mean, report.mean_baseline.mean, report.uniform_baseline.mean, report.random_baseline.mean
    );
    session.evaluation = Some(evaluation);
    session.transcript.extend(gateway.take_transcript());
    let path = store.save(&session)?;
    println!("{}\t{}", session.id, path.display());
    Ok(())
}

fn report(args: ReportArgs) -> CliResult {
    let store = SessionStore::open(&args.sessions)?;
    let session = load_reference(&store, &args.session)?;
    let out = emit_report(&session, args.format.into())?;
    match &args.output {
        Some(path) => write_atomic(path, &out)?,
        None => io::stdout().write_all(out.as_bytes())?,
    }
    Ok(())
}

fn bench_surface(args: BenchArgs) -> CliResult {
    let mut config =
        SweepConfig { trials: args.trials, m: args.m, seed: args.seed, ..SweepConfig::default_quadratic() };
    if !args.deltas.is_empty() {
        config.deltas = args.deltas.clone();
    }
    if let Some(path) = &args.mock_file {
        let model = MockModel::from_json(&fs::read_to_string(path)?)
            .map_err(|e| LampError::Parameter(format!("mock file {}: {e}", path.display())))?;
        config.surface = model.surface;
        config.w0 = model.w0;
    }
    let result = radius_sweep(&config)?;
    let sink: Box<dyn Write> = match &args.output {
        Some(path) => Box::new(fs::File::create(path)?),
        None => Box::new(io::stdout()),
    };
    let mut csv = csv::Writer::from_writer(sink);
    for row in &result.rows {
        csv.serialize(row).map_err(|e| CliError { code: crate::exit::FAILURE, message: e.to_string() })?;
    }
    csv.flush()?;
    if let Some(path) = &args.summary {
        write_atomic(path, &to_canonical_json(&result)?)?;
    }
    match result.delta_star.radius() {
        Some(r) => eprintln!(
            "optimal radius {r:.4} (curvature {:.4}, noise variance {:.3e})",
            result.hessian_frobenius, result.sigma2
        ),
        None => eprintln!("no finite optimal radius"),
    }
    Ok(())
}
