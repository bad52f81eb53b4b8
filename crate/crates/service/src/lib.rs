//! HTTP front end for a live training session.
//!
//! A [`Session`] owns a background trainer thread; [`router`] exposes it as a
//! JSON/PNG API with a server-sent event stream. Everything a browser client
//! does is reachable with plain HTTP requests.

pub mod api;
pub mod session;
pub mod stroke;

pub use api::router;
pub use session::{Event, ServiceConfig, ServiceError, Session, Status, TrainingState};
pub use stroke::{rasterize_stroke, StrokeRequest};

/// Serves `session` on `listener` until `shutdown` resolves, then stops the
/// trainer.
pub async fn serve<F>(listener: tokio::net::TcpListener, session: Session, shutdown: F) -> std::io::Result<()>
where
    F: std::future::Future<Output = ()> + Send + 'static,
{
    let app = router(session.clone());
    let streams = session.clone();
    let signal = async move {
        shutdown.await;
        streams.close_streams();
    };
    let result = axum::serve(listener, app).with_graceful_shutdown(signal).await;
    tokio::task::spawn_blocking(move || session.shutdown()).await.ok();
    result
}
