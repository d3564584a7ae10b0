//! Just enough HTTP/1.1 for the gateway, the simulator and the load
//! generator: `Content-Length` framed messages, keep-alive, no chunking.

use std::fmt::Write as _;

use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

const MAX_HEAD: usize = 16 * 1024;
const MAX_HEADERS: usize = 64;
pub const MAX_BODY: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("message head exceeds {MAX_HEAD} bytes")]
    HeadTooLarge,
    #[error("body of {0} bytes exceeds limit")]
    BodyTooLarge(usize),
    #[error("connection closed mid-message")]
    UnexpectedEof,
    #[error("unsupported transfer encoding {0:?}")]
    UnsupportedEncoding(String),
}

pub type Headers = Vec<(String, String)>;

fn find_header<'a>(headers: &'a Headers, name: &str) -> Option<&'a str> {
    headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case(name))
        .map(|(_, v)| v.as_str())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub method: String,
    pub target: String,
    pub headers: Headers,
    pub body: Vec<u8>,
}

impl Request {
    pub fn new(method: &str, target: &str) -> Self {
        Request {
            method: method.to_owned(),
            target: target.to_owned(),
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.headers.push((name.to_owned(), value.to_owned()));
        self
    }

    pub fn with_body(mut self, body: impl Into<Vec<u8>>) -> Self {
        self.body = body.into();
        self
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    pub fn wants_close(&self) -> bool {
        closes(&self.headers)
    }

    /// Serializes with a `Content-Length` header replacing any given one.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{} {} HTTP/1.1\r\n", self.method, self.target);
        write_headers(
            &mut head,
            &self.headers,
            self.body.len(),
            !self.body.is_empty() || self.method != "GET",
        );
        let mut out = head.into_bytes();
        out.extend_from_slice(&self.body);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub headers: Headers,
    pub body: Vec<u8>,
}

impl Response {
    pub fn new(status: u16) -> Self {
        Response {
            status,
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn json(status: u16, body: impl Into<Vec<u8>>) -> Self {
        Response::new(status)
            .with_header("Content-Type", "application/json")
            .with_body(body)
    }

    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.headers.push((name.to_owned(), value.to_owned()));
        self
    }

    pub fn with_body(mut self, body: impl Into<Vec<u8>>) -> Self {
        self.body = body.into();
        self
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    pub fn set_header(&mut self, name: &str, value: &str) {
        self.headers.retain(|(k, _)| !k.eq_ignore_ascii_case(name));
        self.headers.push((name.to_owned(), value.to_owned()));
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn wants_close(&self) -> bool {
        closes(&self.headers)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("HTTP/1.1 {} {}\r\n", self.status, reason_phrase(self.status));
        write_headers(&mut head, &self.headers, self.body.len(), true);
        let mut out = head.into_bytes();
        out.extend_from_slice(&self.body);
        out
    }
}

fn write_headers(head: &mut String, headers: &Headers, body_len: usize, with_length: bool) {
    for (k, v) in headers {
        if k.eq_ignore_ascii_case("content-length") || k.eq_ignore_ascii_case("transfer-encoding") {
            continue;
        }
        let _ = write!(head, "{k}: {v}\r\n");
    }
    if with_length {
        let _ = write!(head, "Content-Length: {body_len}\r\n");
    }
    head.push_str("\r\n");
}

fn closes(headers: &Headers) -> bool {
    find_header(headers, "connection").is_some_and(|v| v.split(',').any(|t| t.trim().eq_ignore_ascii_case("close")))
}

pub fn reason_phrase(status: u16) -> &'static str {
    match status {
        200 => "OK",
        201 => "Created",
        204 => "No Content",
        400 => "Bad Request",
        404 => "Not Found",
        405 => "Method Not Allowed",
        409 => "Conflict",
        413 => "Payload Too Large",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        502 => "Bad Gateway",
        503 => "Service Unavailable",
        504 => "Gateway Timeout",
        _ => "Status",
    }
}

/// Buffered message reader/writer over one connection, with byte counters.
pub struct Conn<S> {
    stream: S,
    buf: Vec<u8>,
    pub bytes_read: u64,
    pub bytes_written: u64,
}

impl<S: AsyncRead + AsyncWrite + Unpin> Conn<S> {
    pub fn new(stream: S) -> Self {
        Conn {
            stream,
            buf: Vec::new(),
            bytes_read: 0,
            bytes_written: 0,
        }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }

    pub fn get_ref(&self) -> &S {
        &self.stream
    }

    async fn fill(&mut self) -> Result<usize, HttpError> {
        let mut chunk = [0u8; 8192];
        let n = self.stream.read(&mut chunk).await?;
        self.buf.extend_from_slice(&chunk[..n]);
        self.bytes_read += n as u64;
        Ok(n)
    }

    /// Reads until the head is complete. Returns `None` on a clean EOF
    /// before any byte of a new message.
    async fn read_head<T>(
        &mut self,
        mut parse: impl FnMut(&[u8]) -> Result<Option<(usize, T)>, HttpError>,
    ) -> Result<Option<(T, usize)>, HttpError> {
        loop {
            if !self.buf.is_empty() {
                if let Some((len, head)) = parse(&self.buf)? {
                    return Ok(Some((head, len)));
                }
                if self.buf.len() > MAX_HEAD {
                    return Err(HttpError::HeadTooLarge);
                }
            }
            if self.fill().await? == 0 {
                return if self.buf.is_empty() {
                    Ok(None)
                } else {
                    Err(HttpError::UnexpectedEof)
                };
            }
        }
    }

    async fn read_body(&mut self, head_len: usize, len: Option<usize>) -> Result<Vec<u8>, HttpError> {
        self.buf.drain(..head_len);
        match len {
            Some(len) => {
                if len > MAX_BODY {
                    return Err(HttpError::BodyTooLarge(len));
                }
                while self.buf.len() < len {
                    if self.fill().await? == 0 {
                        return Err(HttpError::UnexpectedEof);
                    }
                }
                Ok(self.buf.drain(..len).collect())
            }
            None => {
                while self.fill().await? != 0 {
                    if self.buf.len() > MAX_BODY {
                        return Err(HttpError::BodyTooLarge(self.buf.len()));
                    }
                }
                Ok(std::mem::take(&mut self.buf))
            }
        }
    }

    pub async fn read_request(&mut self) -> Result<Option<Request>, HttpError> {
        let head = self
            .read_head(|buf| {
                let mut hdrs = [httparse::EMPTY_HEADER; MAX_HEADERS];
                let mut req = httparse::Request::new(&mut hdrs);
                match req.parse(buf) {
                    Ok(httparse::Status::Complete(n)) => Ok(Some((
                        n,
                        (
                            req.method.unwrap_or_default().to_owned(),
                            req.path.unwrap_or_default().to_owned(),
                            collect_headers(req.headers)?,
                        ),
                    ))),
                    Ok(httparse::Status::Partial) => Ok(None),
                    Err(e) => Err(HttpError::Malformed(e.to_string())),
                }
            })
            .await?;
        let Some(((method, target, headers), head_len)) = head else {
            return Ok(None);
        };
        // Requests without a length have no body.
        let len = content_length(&headers)?.unwrap_or(0);
        let body = self.read_body(head_len, Some(len)).await?;
        Ok(Some(Request {
            method,
            target,
            headers,
            body,
        }))
    }

    pub async fn read_response(&mut self) -> Result<Option<Response>, HttpError> {
        let head = self
            .read_head(|buf| {
                let mut hdrs = [httparse::EMPTY_HEADER; MAX_HEADERS];
                let mut resp = httparse::Response::new(&mut hdrs);
                match resp.parse(buf) {
                    Ok(httparse::Status::Complete(n)) => Ok(Some((
                        n,
                        (resp.code.unwrap_or_default(), collect_headers(resp.headers)?),
                    ))),
                    Ok(httparse::Status::Partial) => Ok(None),
                    Err(e) => Err(HttpError::Malformed(e.to_string())),
                }
            })
            .await?;
        let Some(((status, headers), head_len)) = head else {
            return Ok(None);
        };
        let len = match content_length(&headers)? {
            Some(n) => Some(n),
            None if status == 204 || status == 304 || (100..200).contains(&status) => Some(0),
            None => None,
        };
        let body = self.read_body(head_len, len).await?;
        Ok(Some(Response { status, headers, body }))
    }

    pub async fn write_all(&mut self, bytes: &[u8]) -> Result<(), HttpError> {
        self.stream.write_all(bytes).await?;
        self.stream.flush().await?;
        self.bytes_written += bytes.len() as u64;
        Ok(())
    }

    pub async fn send_request(&mut self, req: &Request) -> Result<(), HttpError> {
        self.write_all(&req.to_bytes()).await
    }

    pub async fn send_response(&mut self, resp: &Response) -> Result<(), HttpError> {
        self.write_all(&resp.to_bytes()).await
    }

    pub async fn shutdown(&mut self) {
        let _ = self.stream.shutdown().await;
    }
}

fn collect_headers(raw: &[httparse::Header<'_>]) -> Result<Headers, HttpError> {
    raw.iter()
        .map(|h| {
            let value = std::str::from_utf8(h.value)
                .map_err(|_| HttpError::Malformed(format!("non-UTF-8 value for header {}", h.name)))?;
            Ok((h.name.to_owned(), value.trim().to_owned()))
        })
        .collect()
}

fn content_length(headers: &Headers) -> Result<Option<usize>, HttpError> {
    if let Some(te) = find_header(headers, "transfer-encoding") {
        if !te.eq_ignore_ascii_case("identity") {
            return Err(HttpError::UnsupportedEncoding(te.to_owned()));
        }
    }
    find_header(headers, "content-length")
        .map(|v| {
            v.parse::<usize>()
                .map_err(|_| HttpError::Malformed(format!("bad Content-Length {v:?}")))
        })
        .transpose()
}
