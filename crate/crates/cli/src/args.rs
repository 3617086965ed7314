use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lamp_core::{AuditConfig, ReportFormat, TruncationNorm};

#[derive(Debug, Parser)]
#[command(name = "lamp", version, about = "Audit black-box classifiers with local factor surrogates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a full audit on one text and store the session.
    Audit(AuditArgs),
    /// Add counterfactual evaluation to a stored session.
    Evaluate(EvaluateArgs),
    /// Render a stored session as Markdown or JSON.
    Report(ReportArgs),
    /// Serve the session API and the audit UI.
    Serve(ServeArgs),
    /// Run the synthetic radius sweep and write CSV.
    BenchSurface(BenchArgs),
}

/// Which model answers the queries.
#[derive(Debug, Clone, Args)]
pub struct EndpointArgs {
    /// Use a built-in mock model (sigmoid, linear, quadratic).
    #[arg(long, value_name = "PRESET", conflicts_with = "mock_file")]
    pub mock: Option<String>,
    /// Use a mock model described by a JSON file.
    #[arg(long, value_name = "PATH")]
    pub mock_file: Option<PathBuf>,
    /// Remote model name; defaults to LAMP_MODEL.
    #[arg(long)]
    pub model: Option<String>,
    /// Task template id (sentiment, harmfulness, hatefulness) or JSON file.
    #[arg(long, default_value = "sentiment")]
    pub task: String,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Keep full prompts and replies in the transcript.
    #[arg(long)]
    pub embed_transcript: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NormArg {
    Sup,
    Euclidean,
}

impl From<NormArg> for TruncationNorm {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::Sup => TruncationNorm::Sup,
            NormArg::Euclidean => TruncationNorm::Euclidean,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Jitter half-width in relative units, in (0, 1).
    #[arg(long, default_value_t = 0.3)]
    pub delta: f64,
    /// Number of perturbations.
    #[arg(short, long, default_value_t = 50)]
    pub m: usize,
    /// Explain queries pooled before aggregation.
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    /// Factors kept after aggregation.
    #[arg(long, default_value_t = 5)]
    pub n_target: usize,
    /// Ridge penalty on the surrogate slopes.
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Score the surrogate on counterfactual rewrites.
    #[arg(long)]
    pub evaluate: bool,
    #[arg(long, default_value_t = 20)]
    pub rewrite_count: usize,
    #[arg(long, value_enum, default_value_t = NormArg::Sup)]
    pub truncation_norm: NormArg,
    /// Significance level of the linearity test.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Also fit the token-deletion baseline during evaluation.
    #[arg(long)]
    pub token_baseline: bool,
    #[arg(long, default_value_t = 50)]
    pub token_variants: usize,
    /// Timestamp recorded in the session instead of the current time.
    #[arg(long)]
    pub created_at: Option<String>,
}

impl ConfigArgs {
    pub fn to_config(&self) -> AuditConfig {
        AuditConfig {
            delta: self.delta,
            m: self.m,
            repeats: self.repeats,
            n_target: self.n_target,
            lambda: self.lambda,
            seed: self.seed,
            evaluate: self.evaluate,
            rewrite_count: self.rewrite_count,
            truncation_norm: self.truncation_norm.into(),
            alpha: self.alpha,
            token_baseline: self.token_baseline,
            token_variants: self.token_variants,
            created_at: self.created_at.clone(),
        }
    }
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// Text to audit.
    #[arg(long, conflicts_with = "input")]
    pub text: Option<String>,
    /// Read the text from a file ("-" for stdin).
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    #[arg(long, default_value = "sessions", env = "LAMP_SESSIONS")]
    pub sessions: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Session id in the store, or a path to a session file.
    pub session: String,
    #[arg(long, default_value_t = 20)]
    pub rewrite_count: usize,
    /// Seed for rewrites and random baselines; defaults to the session seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub token_baseline: bool,
    #[arg(long, default_value_t = 50)]
    pub token_variants: usize,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    #[arg(long, default_value = "sessions", env = "LAMP_SESSIONS")]
    pub sessions: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Markdown,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Markdown => ReportFormat::Markdown,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Session id in the store, or a path to a session file.
    pub session: String,
    #[arg(long, value_enum, default_value_t = FormatArg::Markdown)]
    pub format: FormatArg,
    /// Write to a file instead of stdout.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value = "sessions", env = "LAMP_SESSIONS")]
    pub sessions: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, default_value = "sessions", env = "LAMP_SESSIONS")]
    pub sessions: PathBuf,
    /// Directory of UI assets served at `/` instead of the built-in page.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    /// Model used by audit jobs submitted over the API.
    #[command(flatten)]
    pub endpoint: EndpointArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Trials per radius.
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    /// Perturbations per fit.
    #[arg(short, long, default_value_t = 50)]
    pub m: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Comma-separated radii; defaults to 0.05, 0.10, ..., 0.95.
    #[arg(long, value_delimiter = ',')]
    pub deltas: Vec<f64>,
    /// Use a surface from a mock JSON file (its `surface` and `w0`).
    #[arg(long)]
    pub mock_file: Option<PathBuf>,
    /// CSV destination; stdout when absent.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Also write the full sweep (radius, curvature, noise, rows) as JSON.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}
