//! Wire-format tests for the HTTP providers against a local one-shot server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::time::Duration;

use reicl_core::embed::{EmbeddingProvider, HttpEmbeddingProvider};
use reicl_core::llm::{HttpLlm, LlmClient, LlmConfig, LlmError, ProviderKind, RetryPolicy};

struct Captured {
    authorization: Option<String>,
    body: serde_json::Value,
}

/// Serves one canned `(status, body)` response per entry, in order, and
/// reports each request it saw.
fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    authorization = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            let _ = tx.send(Captured {
                authorization,
                body: serde_json::from_slice(&buf).unwrap(),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_retries: 2,
        base_delay: Duration::from_millis(1),
        max_delay: Duration::from_millis(5),
    }
}

#[test]
fn completion_request_and_response() {
    let (url, seen) = serve(vec![(200, r#"{"text":" Cause-Effect(e1,e2)."}"#.into())]);
    let config = LlmConfig {
        provider: ProviderKind::Http,
        model_name: "some-model".into(),
        max_output_tokens: 8,
        ..LlmConfig::default()
    };
    let client = LlmClient::new(config, Box::new(HttpLlm::new(url, Some("secret".into()))));
    let out = client
        .complete("Context: a b\nGiven the context, the relation between 'a' and 'b' is")
        .unwrap();
    assert_eq!(out, " Cause-Effect(e1,e2).");
    let req = seen.recv().unwrap();
    assert_eq!(req.authorization.as_deref(), Some("Bearer secret"));
    assert_eq!(req.body["model"], "some-model");
    assert_eq!(req.body["temperature"], 0.0);
    assert_eq!(req.body["max_tokens"], 8);
    assert_eq!(req.body["top_p"], 1.0);
    assert_eq!(req.body["frequency_penalty"], 0.0);
    assert_eq!(req.body["presence_penalty"], 0.0);
    assert!(req.body["prompt"]
        .as_str()
        .unwrap()
        .starts_with("Context: a b"));
}

#[test]
fn completion_retries_server_errors_but_not_client_errors() {
    let (url, _seen) = serve(vec![(503, "{}".into()), (200, r#"{"text":"NULL"}"#.into())]);
    let client = LlmClient::new(LlmConfig::default(), Box::new(HttpLlm::new(url, None)))
        .with_retry(fast_retry());
    assert_eq!(client.complete("p").unwrap(), "NULL");
    assert_eq!(client.provider_calls(), 2);

    let (url, _seen) = serve(vec![(400, "{}".into())]);
    let client = LlmClient::new(LlmConfig::default(), Box::new(HttpLlm::new(url, None)))
        .with_retry(fast_retry());
    assert!(matches!(
        client.complete("p"),
        Err(LlmError::Provider { .. })
    ));
    assert_eq!(client.provider_calls(), 1);
}

#[test]
fn embedding_request_and_response() {
    let (url, seen) = serve(vec![(200, r#"{"vectors":[[1.0,0.5],[0.0,-1.0]]}"#.into())]);
    let provider = HttpEmbeddingProvider::new(url, 2, None).with_retry(fast_retry());
    let texts = vec!["first".to_string(), "second".to_string()];
    let vectors = provider.embed(&texts).unwrap();
    assert_eq!(vectors, vec![vec![1.0, 0.5], vec![0.0, -1.0]]);
    let req = seen.recv().unwrap();
    assert_eq!(req.body, serde_json::json!({"texts": ["first", "second"]}));
    assert_eq!(req.authorization, None);
}

#[test]
fn embedding_count_mismatch_is_an_error() {
    let (url, _seen) = serve(vec![(200, r#"{"vectors":[[1.0,0.5]]}"#.into())]);
    let provider = HttpEmbeddingProvider::new(url, 2, None).with_retry(fast_retry());
    assert!(provider.embed(&["a".into(), "b".into()]).is_err());
}
