mod common;

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scripted_client_session() {
    common::scripted_client_session().await;
}
