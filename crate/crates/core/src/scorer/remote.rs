//! Newline-delimited JSON scoring protocol for out-of-process teachers.
//!
//! Request: `{"id": 7, "input": "...", "candidates": ["...", ...]}`.
//! Response: `{"id": 7, "scores": [-1.5, null, ...]}`, natural-log scores
//! aligned with the candidates. `null` stands for negative infinity, which
//! JSON cannot spell.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::Scorer;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Request {
    id: u64,
    input: String,
    candidates: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Response {
    id: u64,
    scores: Vec<Option<f64>>,
}

struct Session {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
}

/// Client side of the protocol. One request is in flight at a time.
pub struct ExternalScorer {
    session: Mutex<Session>,
    timeout: Duration,
    child: Option<Mutex<Child>>,
    /// Shut down on drop so the peer sees end of input.
    socket: Option<TcpStream>,
}

impl ExternalScorer {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

    /// Builds a session over an arbitrary byte stream pair.
    pub fn from_streams<R, W>(reader: R, writer: W, timeout: Duration) -> Self
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        ExternalScorer {
            session: Mutex::new(Session {
                writer: Box::new(BufWriter::new(writer)),
                lines: rx,
                next_id: 0,
            }),
            timeout,
            child: None,
            socket: None,
        }
    }

    pub fn connect_tcp(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::Transport(format!("connect: {e}")))?;
        stream.set_nodelay(true).ok();
        let reader = stream
            .try_clone()
            .map_err(|e| Error::Transport(format!("clone stream: {e}")))?;
        let handle = stream
            .try_clone()
            .map_err(|e| Error::Transport(format!("clone stream: {e}")))?;
        let mut s = Self::from_streams(reader, stream, timeout);
        s.socket = Some(handle);
        Ok(s)
    }

    /// Spawns `program args…` and talks to it over its stdin and stdout.
    pub fn spawn(program: &str, args: &[String], timeout: Duration) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Transport(format!("spawn {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = child.stdout.take().expect("piped");
        let mut s = Self::from_streams(stdout, stdin, timeout);
        s.child = Some(Mutex::new(child));
        Ok(s)
    }

    /// `tcp://host:port` or `exec:program arg…`.
    pub fn open(endpoint: &str, timeout: Duration) -> Result<Self> {
        if let Some(addr) = endpoint.strip_prefix("tcp://") {
            Self::connect_tcp(addr, timeout)
        } else if let Some(cmd) = endpoint.strip_prefix("exec:") {
            let mut parts = cmd.split_whitespace().map(String::from);
            let program = parts
                .next()
                .ok_or_else(|| Error::Config("empty exec: endpoint".into()))?;
            let args: Vec<String> = parts.collect();
            Self::spawn(&program, &args, timeout)
        } else {
            Err(Error::Config(format!(
                "endpoint {endpoint:?} must start with tcp:// or exec:"
            )))
        }
    }
}

impl Drop for ExternalScorer {
    fn drop(&mut self) {
        if let Some(socket) = &self.socket {
            let _ = socket.shutdown(Shutdown::Both);
        }
        if let Some(child) = &self.child {
            let mut child = child.lock().unwrap_or_else(|e| e.into_inner());
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Scorer for ExternalScorer {
    fn score(&self, input: &str, candidate: &str) -> Result<f64> {
        Ok(self.score_batch(input, &[candidate.to_string()])?[0])
    }

    fn score_batch(&self, input: &str, candidates: &[String]) -> Result<Vec<f64>> {
        let mut s = self.session.lock().unwrap_or_else(|e| e.into_inner());
        let id = s.next_id;
        s.next_id += 1;
        let req = Request {
            id,
            input: input.to_string(),
            candidates: candidates.to_vec(),
        };
        let mut line = serde_json::to_string(&req)?;
        line.push('\n');
        s.writer
            .write_all(line.as_bytes())
            .and_then(|_| s.writer.flush())
            .map_err(|e| Error::Transport(format!("send request {id}: {e}")))?;

        let reply = match s.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(Error::Transport(format!("read response {id}: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                return Err(Error::Transport(format!(
                    "no response to request {id} within {:?}",
                    self.timeout
                )))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Transport(format!("peer closed before answering request {id}")))
            }
        };
        let resp: Response = serde_json::from_str(&reply)
            .map_err(|e| Error::Protocol(format!("response to request {id} is not valid: {e}")))?;
        if resp.id != id {
            return Err(Error::Protocol(format!("expected response id {id}, got {}", resp.id)));
        }
        if resp.scores.len() != candidates.len() {
            return Err(Error::Protocol(format!(
                "request {id} had {} candidates but the response has {} scores",
                candidates.len(),
                resp.scores.len()
            )));
        }
        Ok(resp
            .scores
            .into_iter()
            .map(|s| s.unwrap_or(f64::NEG_INFINITY))
            .collect())
    }
}

/// Answers requests from `reader` with `scorer` until end of input.
pub fn serve<S, R, W>(scorer: &S, reader: R, mut writer: W) -> Result<()>
where
    S: Scorer + ?Sized,
    R: BufRead,
    W: Write,
{
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: Request = serde_json::from_str(&line)
            .map_err(|e| Error::Protocol(format!("malformed request: {e}")))?;
        let scores = scorer.score_batch(&req.input, &req.candidates)?;
        let resp = Response {
            id: req.id,
            scores: scores
                .into_iter()
                .map(|s| if s == f64::NEG_INFINITY { None } else { Some(s) })
                .collect(),
        };
        serde_json::to_writer(&mut writer, &resp)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// Serves connections from `listener` one after another, each until it closes.
/// Returns after `max_connections` connections if given.
pub fn serve_tcp<S: Scorer + ?Sized>(
    scorer: &S,
    listener: &TcpListener,
    max_connections: Option<usize>,
) -> Result<()> {
    let mut served = 0;
    for stream in listener.incoming() {
        let stream = stream?;
        let reader = BufReader::new(stream.try_clone()?);
        serve(scorer, reader, BufWriter::new(stream))?;
        served += 1;
        if max_connections.is_some_and(|m| served >= m) {
            break;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::TableScorer;

    #[test]
    fn serve_answers_in_order_with_null_for_neg_infinity() {
        let table = TableScorer::new(-1.0).with("x", "a", f64::NEG_INFINITY).with("x", "b", -0.25);
        let input = b"{\"id\":3,\"input\":\"x\",\"candidates\":[\"a\",\"b\"]}\n\n";
        let mut out = Vec::new();
        serve(&table, &input[..], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "{\"id\":3,\"scores\":[null,-0.25]}\n");
    }

    #[test]
    fn malformed_request_is_a_protocol_error() {
        let table = TableScorer::new(0.0);
        let err = serve(&table, &b"{oops}\n"[..], Vec::new()).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn endpoint_syntax() {
        assert!(matches!(
            ExternalScorer::open("udp://x", Duration::from_secs(1)),
            Err(Error::Config(_))
        ));
    }
}
