use std::net::SocketAddr;

use promptpack_service::{router, AppState, ServiceOptions};

#[tokio::main]
async fn main() {
    let options = ServiceOptions::from_env();
    let state = match AppState::new(options.providers.clone()) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    };
    let port: u16 = match std::env::var("PORT") {
        Ok(p) => p.parse().unwrap_or_else(|_| {
            eprintln!("error: PORT must be a port number, got {p:?}");
            std::process::exit(1);
        }),
        Err(_) => 8080,
    };
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = match tokio::net::TcpListener::bind(addr).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: cannot bind {addr}: {e}");
            std::process::exit(1);
        }
    };
    eprintln!("listening on {addr}");
    let app = router(state, &options);
    if let Err(e) = axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
