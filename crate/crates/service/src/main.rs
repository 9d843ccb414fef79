use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rehearsal_core::ingest::{build_dataset, read_lessons, ModelExtractor, ProfileExtractor, ScriptedExtractor};
use rehearsal_core::metrics::{MetricsReport, ReportRow};
use rehearsal_core::pedagogy::ForbiddenTerms;
use rehearsal_core::provider::ModelProvider;
use rehearsal_core::retrieval::ProfileIndex;
use rehearsal_service::api::{router, AppState, Backends};
use rehearsal_service::config::{Backend, ProviderConfig};
use rehearsal_service::http_provider::HttpProvider;
use rehearsal_service::store::Store;

#[derive(Parser)]
#[command(name = "rehearsal", version, about = "Classroom argumentation rehearsal simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExtractorKind {
    Scripted,
    Model,
}

#[derive(Subcommand)]
enum Command {
    /// Build the student-profile dataset from a directory of lesson transcripts.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "scripted")]
        extractor: ExtractorKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Provider settings (JSON); required for the model extractor.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long, value_enum, default_value = "scripted")]
        backend: Backend,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// 0 picks a free port; the bound address is printed on stdout.
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// One term per line; replaces the built-in list.
        #[arg(long)]
        forbidden_terms: Option<PathBuf>,
    },
    /// Print a count table with sums and evenness.
    Report {
        /// JSON array of rows, or an object mapping a condition name to rows.
        #[arg(long)]
        counts: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn provider_config(path: Option<&Path>, backend: Backend) -> Result<ProviderConfig> {
    let cfg = match path {
        Some(p) => ProviderConfig::load(p)?,
        None => ProviderConfig::scripted(),
    };
    if cfg.backend != backend {
        bail!("--backend {backend:?} does not match the config file backend {:?}", cfg.backend);
    }
    Ok(cfg)
}

fn ingest(input: &Path, out: &Path, kind: ExtractorKind, seed: u64, config: Option<&Path>) -> Result<()> {
    let lessons = read_lessons(input).with_context(|| format!("reading lessons from {}", input.display()))?;
    let provider: Option<HttpProvider> = match kind {
        ExtractorKind::Scripted => None,
        ExtractorKind::Model => Some(HttpProvider::from_config(&provider_config(config, Backend::Model)?)),
    };
    let model_extractor = provider.as_ref().map(|p| ModelExtractor::new(p as &dyn ModelProvider));
    let extractor: &dyn ProfileExtractor = match &model_extractor {
        Some(m) => m,
        None => &ScriptedExtractor,
    };
    let output = build_dataset(&lessons, extractor, seed)?;
    output.dataset.write(out)?;
    eprintln!("wrote {} profiles from {} lessons to {}", output.dataset.len(), lessons.len(), out.display());
    if matches!(kind, ExtractorKind::Model) || !output.review.is_empty() {
        let review_path = out.with_extension("review.jsonl");
        let mut text = String::new();
        for r in &output.review {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        rehearsal_core::ingest::write_atomic(&review_path, text.as_bytes())?;
        eprintln!("{} profiles held for review in {}", output.review.len(), review_path.display());
    }
    Ok(())
}

fn report(counts: &Path, as_json: bool) -> Result<()> {
    let text = std::fs::read_to_string(counts).with_context(|| format!("reading {}", counts.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let groups: Vec<(String, Vec<ReportRow>)> = match value {
        serde_json::Value::Array(_) => vec![(String::new(), serde_json::from_value(value)?)],
        serde_json::Value::Object(map) => map
            .into_iter()
            .map(|(k, v)| Ok((k, serde_json::from_value(v)?)))
            .collect::<Result<_, serde_json::Error>>()?,
        _ => bail!("expected an array of rows or an object of row arrays"),
    };
    let mut stdout = std::io::stdout().lock();
    for (name, rows) in groups {
        let r = MetricsReport::new(rows);
        if as_json {
            writeln!(stdout, "{}", serde_json::to_string(&serde_json::json!({"condition": name, "total": r.total}))?)?;
        } else {
            if !name.is_empty() {
                writeln!(stdout, "[{name}]")?;
            }
            write!(stdout, "{}", r.render_text())?;
        }
    }
    Ok(())
}

struct ServeArgs {
    profiles: PathBuf,
    backend: Backend,
    addr: String,
    data_dir: PathBuf,
    config: Option<PathBuf>,
    forbidden_terms: Option<PathBuf>,
}

fn serve(args: ServeArgs) -> Result<()> {
    let cfg = provider_config(args.config.as_deref(), args.backend)?;
    let index = ProfileIndex::load(&args.profiles).with_context(|| format!("loading {}", args.profiles.display()))?;
    let forbidden = match &args.forbidden_terms {
        Some(p) => ForbiddenTerms::parse(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => ForbiddenTerms::default(),
    };
    // Held here so the blocking HTTP client is dropped outside the runtime.
    let provider: Option<Arc<dyn ModelProvider>> = match cfg.backend {
        Backend::Scripted => None,
        Backend::Model => Some(Arc::new(HttpProvider::from_config(&cfg))),
    };
    let backends = match &provider {
        Some(p) => Backends::model(p.clone()),
        None => Backends::scripted(),
    };
    let store = Store::open(&args.data_dir)?;
    let state = Arc::new(AppState::new(index, backends, forbidden, store)?);

    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&args.addr).await.with_context(|| format!("binding {}", args.addr))?;
        let local: SocketAddr = listener.local_addr()?;
        println!("listening on http://{local}");
        std::io::stdout().flush()?;
        tracing::info!(%local, backend = ?cfg.backend, "serving");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(())
    })?;
    drop(runtime);
    drop(provider);
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Ingest { input, out, extractor, seed, config } => ingest(&input, &out, extractor, seed, config.as_deref()),
        Command::Serve { profiles, backend, host, port, data_dir, config, forbidden_terms } => serve(ServeArgs {
            profiles,
            backend,
            addr: format!("{host}:{port}"),
            data_dir,
            config,
            forbidden_terms,
        }),
        Command::Report { counts, json } => report(&counts, json),
    }
}
