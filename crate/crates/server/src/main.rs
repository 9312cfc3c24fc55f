use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;
use workbench_core::features::ExternalExtractor;
use workbench_core::mllm::{Backend, ClientConfig};
use workbench_core::prompts::catalog;
use workbench_core::MockScript;
use workbench_server::{router, AppConfig, AppState};

#[derive(Parser)]
#[command(name = "workbench", version, about = "Image-classifier workbench with two MLLM assistants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Print the prompt templates as JSON.
    Prompts,
}

#[derive(Parser)]
struct ServeArgs {
    #[arg(long, env = "WORKBENCH_LISTEN", default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Where sessions are stored; omit to keep everything in memory.
    #[arg(long, env = "WORKBENCH_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long, env = "WORKBENCH_MLLM_ENDPOINT", default_value = "https://api.openai.com/v1")]
    mllm_endpoint: String,
    #[arg(long, env = "WORKBENCH_MODEL", default_value = "gpt-4o-2024-05-13")]
    model: String,
    /// Name of the environment variable holding the API key.
    #[arg(long, default_value = "OPENAI_API_KEY")]
    api_key_env: String,
    #[arg(long, env = "WORKBENCH_TIMEOUT_SECS", default_value_t = 60)]
    timeout_secs: u64,
    #[arg(long, env = "WORKBENCH_RETRIES", default_value_t = 0)]
    retries: u32,
    #[arg(long, env = "WORKBENCH_ACTIVE_INTERVAL_SECS", default_value_t = 60.0)]
    active_interval_secs: f64,
    /// Start new sessions with the active agent switched off.
    #[arg(long)]
    active_off: bool,
    /// Language the agents are asked to answer in.
    #[arg(long, env = "WORKBENCH_LANGUAGE", default_value = "English")]
    language: String,
    /// Cap on the chat log handed to the active agent, in characters.
    #[arg(long)]
    chat_log_max_chars: Option<usize>,
    /// Answer from canned replies instead of calling an MLLM.
    #[arg(long)]
    mock: bool,
    /// JSON file with mock rules (implies --mock).
    #[arg(long)]
    mock_script: Option<PathBuf>,
    /// External embedding service replacing the built-in feature extractor.
    #[arg(long, requires = "embedder_dim")]
    embedder_url: Option<String>,
    #[arg(long)]
    embedder_dim: Option<usize>,
}

fn backend(args: &ServeArgs) -> anyhow::Result<Backend> {
    if let Some(path) = &args.mock_script {
        let script = MockScript::load(path).map_err(anyhow::Error::msg)?;
        return Ok(Backend::Mock(Arc::new(script)));
    }
    if args.mock {
        return Ok(Backend::Mock(Arc::new(MockScript::new(
            "This is a canned reply from the mock assistant.",
        ))));
    }
    let api_key = std::env::var(&args.api_key_env).ok();
    if api_key.is_none() {
        tracing::warn!(var = %args.api_key_env, "no API key in the environment");
    }
    Ok(Backend::Http(ClientConfig {
        endpoint: args.mllm_endpoint.clone(),
        model: args.model.clone(),
        api_key,
        timeout: Duration::from_secs(args.timeout_secs),
        retries: args.retries,
        ..ClientConfig::default()
    }))
}

fn app_config(args: &ServeArgs) -> anyhow::Result<AppConfig> {
    if !(args.active_interval_secs > 0.0) {
        bail!("--active-interval-secs must be positive");
    }
    let mut config = AppConfig::new(backend(args)?);
    config.data_dir = args.data_dir.clone();
    config.session.language = args.language.clone();
    config.session.active_interval = Duration::from_secs_f64(args.active_interval_secs);
    config.session.chat_log_max_chars = args.chat_log_max_chars;
    config.session.active_enabled_by_default = !args.active_off;
    if let (Some(url), Some(dim)) = (&args.embedder_url, args.embedder_dim) {
        // the blocking HTTP client has to be built outside the async runtime
        let external = ExternalExtractor::new(
            "external",
            url.clone(),
            dim,
            Duration::from_secs(args.timeout_secs),
            args.retries,
        )?;
        config.extractor = Arc::new(external);
    }
    Ok(config)
}

async fn serve(listen: SocketAddr, config: AppConfig) -> anyhow::Result<()> {
    let state = AppState::new(config);
    tracing::info!(sessions = state.session_ids().len(), "sessions loaded");
    let listener = tokio::net::TcpListener::bind(listen)
        .await
        .with_context(|| format!("binding {listen}"))?;
    tracing::info!(addr = %listen, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    match Cli::parse().command {
        Command::Serve(args) => {
            let config = app_config(&args)?;
            // keeps the extractor alive until the runtime is gone
            let extractor = config.extractor.clone();
            let runtime = tokio::runtime::Runtime::new()?;
            let result = runtime.block_on(serve(args.listen, config));
            drop(runtime);
            drop(extractor);
            result
        }
        Command::Prompts => {
            println!("{}", serde_json::to_string_pretty(&catalog())?);
            Ok(())
        }
    }
}
