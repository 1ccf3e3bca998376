//! Remote expert endpoint: one JSON request/response exchange per node
//! over HTTP, so real model backends can plug into the engine unchanged.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{
    parse_confidence, Expert, ExpertCall, ExpertError, ExpertOutput, NodeFeedback,
};
use crate::graph::ExpertKind;

/// Wire request: the instruction, the parent outputs in parent order, and
/// the repair context when the call executes a patch node.
#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    instruction: &'a str,
    parent_payloads: Vec<&'a ExpertOutput>,
    repair_context: Option<&'a str>,
}

/// Wire response. Token counts and wall time are backend-supplied and
/// optional; missing counts fall back to whitespace-token estimation.
#[derive(Debug, Deserialize)]
struct WireResponse {
    output: ExpertOutput,
    exception: Option<bool>,
    tokens_prompt: Option<u64>,
    tokens_completion: Option<u64>,
    wall_time: Option<f64>,
}

/// An expert backed by a remote endpoint. Requests go to
/// `{endpoint}/{kind}` (lowercased kind), e.g. `http://host:9000/logic`.
pub struct RemoteExpert {
    kind: ExpertKind,
    endpoint: String,
    retries: u32,
    client: reqwest::blocking::Client,
}

impl RemoteExpert {
    pub fn new(kind: ExpertKind, endpoint: impl Into<String>, retries: u32) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .expect("http client");
        RemoteExpert {
            kind,
            endpoint: endpoint.into(),
            retries,
            client,
        }
    }

    fn url(&self) -> String {
        format!(
            "{}/{}",
            self.endpoint.trim_end_matches('/'),
            self.kind.name().to_lowercase()
        )
    }
}

impl Expert for RemoteExpert {
    fn kind(&self) -> ExpertKind {
        self.kind
    }

    fn execute(&mut self, call: &ExpertCall) -> Result<NodeFeedback, ExpertError> {
        let request = WireRequest {
            instruction: &call.vertex.instruction,
            parent_payloads: call.parent_payloads.iter().map(|p| &p.output).collect(),
            repair_context: call.repair_context.as_ref().map(|c| c.text.as_str()),
        };
        let body = serde_json::to_string(&request).expect("serializable request");
        let prompt_estimate = body.split_whitespace().count() as u64;

        let started = Instant::now();
        let mut last_error = String::new();
        let mut text = None;
        for _ in 0..=self.retries {
            match self
                .client
                .post(self.url())
                .header("content-type", "application/json")
                .body(body.clone())
                .send()
                .and_then(|r| r.error_for_status())
                .and_then(|r| r.text())
            {
                Ok(t) => {
                    text = Some(t);
                    break;
                }
                Err(e) => last_error = e.to_string(),
            }
        }
        let text = text.ok_or(ExpertError::Unavailable { reason: last_error })?;
        let elapsed = started.elapsed().as_secs_f64();
        let completion_estimate = text.split_whitespace().count() as u64;

        // An unparseable response is a valid in-protocol result: the
        // feedback carries the exception flag rather than failing the run.
        let confidence = parse_confidence(&text);
        let feedback = match serde_json::from_str::<WireResponse>(&text) {
            Ok(response) => NodeFeedback::new(
                response.output,
                response.exception.unwrap_or(false) || confidence.parse_failed,
                confidence.value,
                response.tokens_prompt.unwrap_or(prompt_estimate),
                response.tokens_completion.unwrap_or(completion_estimate),
                response.wall_time.unwrap_or(elapsed),
            ),
            Err(_) => NodeFeedback::new(
                ExpertOutput::empty(self.kind),
                true,
                0.0,
                prompt_estimate,
                completion_estimate,
                elapsed,
            ),
        };
        Ok(feedback.normalized())
    }
}

/// A pool of three remote experts sharing one endpoint.
pub fn remote_registry(endpoint: &str, retries: u32) -> super::ExpertRegistry {
    let mut registry = super::ExpertRegistry::new();
    for kind in ExpertKind::ALL {
        registry.register(Box::new(RemoteExpert::new(kind, endpoint, retries)));
    }
    registry
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Vertex;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn call() -> ExpertCall {
        ExpertCall {
            vertex: Vertex::new(
                "v1".parse().unwrap(),
                ExpertKind::Expr,
                "say hello",
                vec![],
            ),
            parent_payloads: vec![],
            repair_context: None,
        }
    }

    /// Minimal one-shot HTTP responder for exercising the wire protocol.
    fn serve_once(response_body: &'static str) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            if let Ok((mut stream, _)) = listener.accept() {
                let mut buf = [0u8; 8192];
                let _ = stream.read(&mut buf);
                let reply = format!(
                    "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                    response_body.len(),
                    response_body
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        format!("http://{addr}")
    }

    #[test]
    fn remote_expert_parses_full_response() {
        let endpoint = serve_once(
            r#"{"output": {"kind": "EXPR", "draft": "hello", "unsupported": []},
                "confidence": 0.9, "exception": false,
                "tokens_prompt": 11, "tokens_completion": 4, "wall_time": 0.5}"#,
        );
        let mut expert = RemoteExpert::new(ExpertKind::Expr, endpoint, 0);
        let feedback = expert.execute(&call()).unwrap();
        assert!(!feedback.exception);
        assert_eq!(feedback.confidence, 0.9);
        assert_eq!(feedback.tokens_prompt, 11);
        assert_eq!(feedback.wall_time, 0.5);
        match feedback.output {
            ExpertOutput::Expr(e) => assert_eq!(e.draft, "hello"),
            other => panic!("unexpected output {other:?}"),
        }
    }

    #[test]
    fn missing_confidence_forces_exception() {
        let endpoint = serve_once(
            r#"{"output": {"kind": "EXPR", "draft": "hello", "unsupported": []}}"#,
        );
        let mut expert = RemoteExpert::new(ExpertKind::Expr, endpoint, 0);
        let feedback = expert.execute(&call()).unwrap();
        assert!(feedback.exception);
        assert_eq!(feedback.confidence, 0.0);
    }

    #[test]
    fn garbage_response_is_an_in_protocol_exception() {
        let endpoint = serve_once("this is not json");
        let mut expert = RemoteExpert::new(ExpertKind::Expr, endpoint, 0);
        let feedback = expert.execute(&call()).unwrap();
        assert!(feedback.exception);
        // whitespace-token estimation kicked in
        assert_eq!(feedback.tokens_completion, 4);
    }

    #[test]
    fn unreachable_backend_is_an_infrastructure_error() {
        let mut expert = RemoteExpert::new(ExpertKind::Expr, "http://127.0.0.1:1", 1);
        assert!(matches!(
            expert.execute(&call()),
            Err(ExpertError::Unavailable { .. })
        ));
    }
}
