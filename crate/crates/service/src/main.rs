use clap::Parser;

/// HTTP service for steering guided diffusion sessions.
#[derive(Parser)]
#[command(name = "sega-service", version)]
struct Cli {
    /// Port to listen on.
    #[arg(long, env = "SEGA_FORGE_PORT", default_value_t = 8080)]
    port: u16,
    /// Address to bind.
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    let cli = Cli::parse();
    let listener = tokio::net::TcpListener::bind((cli.host.as_str(), cli.port)).await?;
    eprintln!(
        "[sega-service] listening on http://{}",
        listener.local_addr()?
    );
    let app = sega_service::router(sega_service::AppState::new());
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
