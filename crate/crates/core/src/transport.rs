//! JSON request/response transports shared by the annotation and filter
//! clients: HTTP POST, a line-delimited subprocess, and in-process closures.

use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde_json::Value;

use crate::error::{Error, Result};

pub trait JsonTransport: Send + Sync {
    /// One request, one response. `Err` means the exchange itself failed.
    fn call(&self, request: &Value) -> Result<Value>;
}

/// POSTs each request as a JSON body and parses the JSON reply.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    pub url: String,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>) -> Self {
        Self { url: url.into() }
    }
}

impl JsonTransport for HttpTransport {
    fn call(&self, request: &Value) -> Result<Value> {
        let body = request.to_string();
        let mut resp = ureq::post(&self.url)
            .header("Content-Type", "application/json")
            .send(body.as_bytes())
            .map_err(|e| Error::Client(format!("POST {}: {e}", self.url)))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Client(format!("reading reply from {}: {e}", self.url)))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Client(format!("reply from {} is not JSON: {e}", self.url)))
    }
}

struct Pipes {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// A long-lived child process speaking one JSON object per line.
pub struct SubprocessTransport {
    program: String,
    pipes: Mutex<Pipes>,
}

impl SubprocessTransport {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(format!("spawning {program}"), e))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            program: program.to_string(),
            pipes: Mutex::new(Pipes {
                child,
                stdin,
                stdout,
            }),
        })
    }

    /// Parses a command line of whitespace-separated words.
    pub fn from_command_line(cmd: &str) -> Result<Self> {
        let mut words = cmd.split_whitespace().map(str::to_string);
        let program = words
            .next()
            .ok_or_else(|| Error::Config("empty subprocess command".into()))?;
        let args: Vec<String> = words.collect();
        Self::spawn(&program, &args)
    }
}

impl JsonTransport for SubprocessTransport {
    fn call(&self, request: &Value) -> Result<Value> {
        let mut p = self
            .pipes
            .lock()
            .map_err(|_| Error::Client("subprocess lock poisoned".into()))?;
        let fail =
            |what: &str, e: std::io::Error| Error::Client(format!("{} {what}: {e}", self.program));
        writeln!(p.stdin, "{request}").map_err(|e| fail("write", e))?;
        p.stdin.flush().map_err(|e| fail("flush", e))?;
        let mut line = String::new();
        let n = p.stdout.read_line(&mut line).map_err(|e| fail("read", e))?;
        if n == 0 {
            return Err(Error::Client(format!("{} closed its output", self.program)));
        }
        serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Client(format!("{} replied with invalid JSON: {e}", self.program)))
    }
}

impl Drop for SubprocessTransport {
    fn drop(&mut self) {
        if let Ok(p) = self.pipes.get_mut() {
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
    }
}

/// In-process transport backed by a closure.
pub struct FnTransport<F>(pub F);

impl<F> JsonTransport for FnTransport<F>
where
    F: Fn(&Value) -> Result<Value> + Send + Sync,
{
    fn call(&self, request: &Value) -> Result<Value> {
        (self.0)(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay: Duration,
    pub concurrency: usize,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_delay: Duration::from_millis(100),
            concurrency: 4,
        }
    }
}

/// Calls `transport`, retrying transport failures with exponential backoff.
/// Returns the reply (or last error) and the number of attempts made.
pub fn call_with_retry(
    transport: &dyn JsonTransport,
    request: &Value,
    policy: &RetryPolicy,
) -> (Result<Value>, u32) {
    let mut attempt = 0;
    loop {
        attempt += 1;
        match transport.call(request) {
            Ok(v) => return (Ok(v), attempt),
            Err(e) if attempt > policy.retries => return (Err(e), attempt),
            Err(e) => {
                tracing::warn!(attempt, error = %e, "transport failure, retrying");
                thread::sleep(policy.base_delay * 2u32.saturating_pow(attempt - 1));
            }
        }
    }
}

/// Maps `f` over `items` with at most `limit` worker threads; output order
/// matches input order.
pub fn bounded_map<I, O, F>(items: &[I], limit: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync,
{
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<O>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let workers = limit.max(1).min(items.len().max(1));
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("slot lock")
                .expect("every slot filled")
        })
        .collect()
}

/// Serve a line-delimited JSON protocol on `input`/`output` until EOF.
pub fn serve_lines(
    input: impl Read,
    mut output: impl Write,
    handler: impl Fn(&Value) -> Value,
) -> Result<()> {
    for line in BufReader::new(input).lines() {
        let line = line.map_err(|e| Error::io("reading request", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Value>(&line) {
            Ok(req) => handler(&req),
            Err(e) => serde_json::json!({ "error": format!("invalid request: {e}") }),
        };
        writeln!(output, "{reply}").map_err(|e| Error::io("writing reply", e))?;
        output.flush().map_err(|e| Error::io("writing reply", e))?;
    }
    Ok(())
}
