use std::io::{self, Write};
use std::path::Path;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use foke::cli::{self, Cli, CliError, Command};
use foke::service::{self, AppState};
use foke_core::EngineState;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Serve {
            snapshot,
            listen,
            autosave_secs,
        } => serve(snapshot, *listen, *autosave_secs),
        _ => {
            let stdout = io::stdout();
            let mut out = stdout.lock();
            cli::run(&cli, &mut out).and_then(|()| out.flush().map_err(CliError::from))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn serve(snapshot: &Path, listen: std::net::SocketAddr, autosave_secs: u64) -> Result<(), CliError> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let state = if snapshot.exists() {
        cli::load_state(snapshot)?
    } else {
        tracing::warn!(path = %snapshot.display(), "snapshot not found; starting empty");
        EngineState::default()
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let app = AppState::new(state, Some(snapshot.to_path_buf()));
        if autosave_secs > 0 {
            tokio::spawn(service::autosave(app.clone(), Duration::from_secs(autosave_secs)));
        }
        let listener = tokio::net::TcpListener::bind(listen).await?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        axum::serve(listener, service::router(app.clone()))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        if let Some(rev) = app.save()? {
            tracing::info!(revision = rev, "snapshot saved on shutdown");
        }
        Ok::<(), io::Error>(())
    })?;
    Ok(())
}
