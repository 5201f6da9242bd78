use std::io::{self, Write};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::Parser;
use ovis_cli::args::ServeArgs;
use ovis_cli::service::{self, ServiceState};
use ovis_cli::{commands, Cli, Command, CommandError};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // --help and --version land here too
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<CommandError>())
                .map_or(3, CommandError::exit_code);
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Serve(args) => serve(&args),
        other => {
            let mut out = io::stdout().lock();
            commands::execute(other, &mut out)?;
            out.flush().context("flushing stdout")
        }
    }
}

fn serve(args: &ServeArgs) -> anyhow::Result<()> {
    let env_root = std::env::var_os(service::MEDIA_ROOT_ENV).map(Into::into);
    let state = Arc::new(ServiceState::load(args, env_root)?);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting async runtime")?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.bind)
            .await
            .with_context(|| format!("binding {}", args.bind))?;
        eprintln!(
            "serving {} instances (fingerprint {}) on http://{}",
            state.health().n_instances,
            state.health().index_fingerprint,
            listener.local_addr()?
        );
        let app = service::router(state, args.cors);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .context("serving HTTP")
    })
}
