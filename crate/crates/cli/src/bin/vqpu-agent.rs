use std::thread;

use tracing_subscriber::EnvFilter;

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let agent = match vqpu_agent::from_env() {
        Ok(a) => a,
        Err(code) => std::process::exit(code),
    };
    let stop = agent.stop_handle();
    thread::Builder::new()
        .name("signals".into())
        .spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().expect("signal runtime");
            rt.block_on(async {
                let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
                    .expect("SIGTERM handler");
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {},
                    _ = term.recv() => {},
                }
            });
            tracing::info!("shutdown requested");
            stop.stop();
        })
        .expect("signal thread");
    let stats = agent.run();
    tracing::info!(?stats, "agent stopped");
    std::process::exit(vqpu_agent::EXIT_OK);
}
