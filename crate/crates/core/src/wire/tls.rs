//! Mutually authenticated TLS transport for framed messages.
//!
//! Blocking I/O throughout: the server runs one thread per connection and
//! the client owns a single connection it reopens on failure. Both sides
//! authenticate against the federation CA; the server takes the caller's
//! identity from the verified client certificate.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::Rng;
use rustls::pki_types::pem::PemObject;
use rustls::pki_types::{PrivateKeyDer, ServerName};
use rustls::server::WebPkiClientVerifier;
use rustls::{ClientConfig, ClientConnection, RootCertStore, ServerConfig, ServerConnection, StreamOwned};

use super::{decode, encode, read_frame, write_frame, ErrorCode, Message, WireError};
use crate::pki::{self, CertBundle, CertKind};

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(30);
const IDLE_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
}

impl Endpoint {
    pub fn new(host: impl Into<String>, port: u16) -> Self {
        Endpoint {
            host: host.into(),
            port,
        }
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CallError {
    #[error("gave up after {attempts} attempts in {elapsed:?}: {last}")]
    Timeout {
        attempts: u32,
        elapsed: Duration,
        last: String,
    },
    #[error("TLS failure: {0}")]
    TlsFailure(String),
    #[error("protocol error: {0}")]
    Protocol(#[from] WireError),
    #[error("bad TLS configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Reconnect backoff: `base * factor^n`, capped, scaled by a jitter factor
/// drawn from `[jitter_min, 1.0]`, all within an overall `timeout`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: f64,
    pub max_delay: Duration,
    pub jitter_min: f64,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base: Duration::from_secs(1),
            factor: 2.0,
            max_delay: Duration::from_secs(60),
            jitter_min: 0.5,
            timeout: Duration::from_secs(600),
        }
    }
}

impl RetryPolicy {
    pub fn with_timeout(timeout: Duration) -> Self {
        RetryPolicy {
            timeout,
            ..Self::default()
        }
    }

    /// Delay before retry number `attempt` (0-based), before jitter.
    pub fn nominal_delay(&self, attempt: u32) -> Duration {
        let secs = self.base.as_secs_f64() * self.factor.powi(attempt.min(64) as i32);
        Duration::from_secs_f64(secs.min(self.max_delay.as_secs_f64()))
    }

    pub fn delay<R: Rng>(&self, attempt: u32, rng: &mut R) -> Duration {
        let jitter = rng.gen_range(self.jitter_min..=1.0);
        self.nominal_delay(attempt).mul_f64(jitter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

/// Observer for every whole frame crossing a connection.
pub type FrameTap = Arc<dyn Fn(Direction, &[u8]) + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerInfo {
    /// CN of the verified client certificate.
    pub identity: String,
    pub protocol_version: String,
}

pub trait Handler: Send + Sync + 'static {
    fn handle(&self, peer: &PeerInfo, message: Message) -> Message;
}

fn provider() -> Arc<rustls::crypto::CryptoProvider> {
    Arc::new(rustls::crypto::ring::default_provider())
}

const ALL_VERSIONS: &[&rustls::SupportedProtocolVersion] =
    &[&rustls::version::TLS13, &rustls::version::TLS12];

fn roots(bundle: &CertBundle) -> Result<RootCertStore, CallError> {
    let mut store = RootCertStore::empty();
    for der in bundle.ca_ders().map_err(|e| CallError::Config(e.to_string()))? {
        store
            .add(der)
            .map_err(|e| CallError::Config(format!("CA certificate: {e}")))?;
    }
    Ok(store)
}

fn identity_parts(
    bundle: &CertBundle,
) -> Result<(Vec<rustls::pki_types::CertificateDer<'static>>, PrivateKeyDer<'static>), CallError> {
    let cert = bundle
        .entity_der()
        .map_err(|e| CallError::Config(e.to_string()))?;
    let key = PrivateKeyDer::from_pem_slice(bundle.private_key.as_bytes())
        .map_err(|e| CallError::Config(format!("private key: {e}")))?;
    Ok((vec![cert], key))
}

fn version_name(v: Option<rustls::ProtocolVersion>) -> String {
    match v {
        Some(rustls::ProtocolVersion::TLSv1_3) => "TLSv1.3".into(),
        Some(rustls::ProtocolVersion::TLSv1_2) => "TLSv1.2".into(),
        Some(other) => format!("{other:?}"),
        None => "unknown".into(),
    }
}

/// Client-side TLS settings: trust roots, client identity and the
/// server name to verify.
#[derive(Clone)]
pub struct ClientTls {
    config: Arc<ClientConfig>,
    server_name: ServerName<'static>,
}

impl std::fmt::Debug for ClientTls {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientTls")
            .field("server_name", &self.server_name)
            .finish_non_exhaustive()
    }
}

impl ClientTls {
    pub fn new(bundle: &CertBundle, server_fqdn: &str) -> Result<Self, CallError> {
        Self::with_versions(bundle, server_fqdn, ALL_VERSIONS)
    }

    pub fn with_versions(
        bundle: &CertBundle,
        server_fqdn: &str,
        versions: &[&'static rustls::SupportedProtocolVersion],
    ) -> Result<Self, CallError> {
        let (chain, key) = identity_parts(bundle)?;
        let config = ClientConfig::builder_with_provider(provider())
            .with_protocol_versions(versions)
            .map_err(|e| CallError::Config(e.to_string()))?
            .with_root_certificates(roots(bundle)?)
            .with_client_auth_cert(chain, key)
            .map_err(|e| CallError::Config(e.to_string()))?;
        Self::from_config(config, server_fqdn)
    }

    /// A client presenting no certificate at all.
    pub fn anonymous(trust: &CertBundle, server_fqdn: &str) -> Result<Self, CallError> {
        let config = ClientConfig::builder_with_provider(provider())
            .with_protocol_versions(ALL_VERSIONS)
            .map_err(|e| CallError::Config(e.to_string()))?
            .with_root_certificates(roots(trust)?)
            .with_no_client_auth();
        Self::from_config(config, server_fqdn)
    }

    fn from_config(config: ClientConfig, server_fqdn: &str) -> Result<Self, CallError> {
        let server_name = ServerName::try_from(server_fqdn.to_string())
            .map_err(|e| CallError::Config(format!("server name `{server_fqdn}`: {e}")))?;
        Ok(ClientTls {
            config: Arc::new(config),
            server_name,
        })
    }
}

type ClientStream = StreamOwned<ClientConnection, TcpStream>;

/// A reconnecting request/response client.
pub struct TlsClient {
    endpoint: Endpoint,
    tls: ClientTls,
    retry: RetryPolicy,
    tap: Option<FrameTap>,
    stream: Option<ClientStream>,
    io_timeout: Duration,
}

impl TlsClient {
    pub fn new(endpoint: Endpoint, tls: ClientTls, retry: RetryPolicy) -> Self {
        TlsClient {
            endpoint,
            tls,
            retry,
            tap: None,
            stream: None,
            io_timeout: Duration::from_secs(120),
        }
    }

    pub fn with_tap(mut self, tap: FrameTap) -> Self {
        self.tap = Some(tap);
        self
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// Negotiated version of the open connection, if any.
    pub fn protocol_version(&self) -> Option<String> {
        self.stream
            .as_ref()
            .map(|s| version_name(s.conn.protocol_version()))
    }

    pub fn disconnect(&mut self) {
        if let Some(mut s) = self.stream.take() {
            s.conn.send_close_notify();
            let _ = s.flush();
            let _ = s.sock.shutdown(Shutdown::Both);
        }
    }

    /// Sends one request and waits for its response, reconnecting with
    /// backoff on connection failures. Certificate and handshake
    /// rejections fail immediately.
    pub fn call(&mut self, request: &Message) -> Result<Message, CallError> {
        let frame = encode(request);
        let started = Instant::now();
        let mut attempt = 0u32;
        let mut rng = rand::thread_rng();
        loop {
            let last = match self.try_call(&frame) {
                Ok(reply) => return Ok(reply),
                Err(Failure::Fatal(e)) => {
                    self.stream = None;
                    return Err(e);
                }
                Err(Failure::Retryable(e)) => {
                    self.stream = None;
                    e
                }
            };
            attempt += 1;
            let elapsed = started.elapsed();
            // the last sleep is cut short so one final attempt lands on the deadline
            let delay = self
                .retry
                .delay(attempt - 1, &mut rng)
                .min(self.retry.timeout.saturating_sub(elapsed));
            if delay.is_zero() {
                return Err(CallError::Timeout {
                    attempts: attempt,
                    elapsed,
                    last: last.to_string(),
                });
            }
            log::debug!("call to {} failed ({last}); retrying in {delay:?}", self.endpoint);
            thread::sleep(delay);
        }
    }

    fn try_call(&mut self, frame: &[u8]) -> Result<Message, Failure> {
        if self.stream.is_none() {
            self.stream = Some(self.connect()?);
        }
        let stream = self.stream.as_mut().expect("connected above");
        if let Some(tap) = &self.tap {
            tap(Direction::Sent, frame);
        }
        write_frame(stream, frame).map_err(classify_io)?;
        let reply = match read_frame(stream) {
            Ok(Some(f)) => f,
            Ok(None) => return Err(Failure::Retryable(io::ErrorKind::UnexpectedEof.into())),
            Err(WireError::Io(e)) => return Err(classify_io(e)),
            Err(WireError::Truncated) => {
                return Err(Failure::Retryable(io::ErrorKind::UnexpectedEof.into()))
            }
            Err(e) => return Err(Failure::Fatal(e.into())),
        };
        if let Some(tap) = &self.tap {
            tap(Direction::Received, &reply);
        }
        decode(&reply).map_err(|e| Failure::Fatal(e.into()))
    }

    fn connect(&self) -> Result<ClientStream, Failure> {
        let addrs: Vec<SocketAddr> = (self.endpoint.host.as_str(), self.endpoint.port)
            .to_socket_addrs()
            .map_err(Failure::Retryable)?
            .collect();
        let mut last = io::Error::new(io::ErrorKind::NotFound, "no address");
        let sock = addrs
            .iter()
            .find_map(|a| match TcpStream::connect_timeout(a, HANDSHAKE_TIMEOUT) {
                Ok(s) => Some(s),
                Err(e) => {
                    last = e;
                    None
                }
            })
            .ok_or(Failure::Retryable(last))?;
        sock.set_nodelay(true).map_err(Failure::Retryable)?;
        sock.set_read_timeout(Some(self.io_timeout))
            .map_err(Failure::Retryable)?;
        sock.set_write_timeout(Some(self.io_timeout))
            .map_err(Failure::Retryable)?;
        let conn = ClientConnection::new(self.tls.config.clone(), self.tls.server_name.clone())
            .map_err(|e| Failure::Fatal(CallError::TlsFailure(e.to_string())))?;
        let mut stream = StreamOwned::new(conn, sock);
        while stream.conn.is_handshaking() {
            stream
                .conn
                .complete_io(&mut stream.sock)
                .map_err(classify_io)?;
        }
        Ok(stream)
    }
}

impl Drop for TlsClient {
    fn drop(&mut self) {
        self.disconnect();
    }
}

enum Failure {
    Retryable(io::Error),
    Fatal(CallError),
}

/// rustls reports protocol and certificate errors through `io::Error`
/// with a `rustls::Error` inside; those never get better by retrying.
fn classify_io(e: io::Error) -> Failure {
    if let Some(tls) = e.get_ref().and_then(|inner| inner.downcast_ref::<rustls::Error>()) {
        return Failure::Fatal(CallError::TlsFailure(tls.to_string()));
    }
    Failure::Retryable(e)
}

/// Running server; shuts down when dropped.
pub struct ServerHandle {
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.local_addr, Duration::from_secs(1));
        for c in self.connections.lock().unwrap_or_else(|p| p.into_inner()).drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Binds `addr` and serves framed requests from clients holding a
/// certificate issued by the bundle's CA for client use.
pub fn serve(
    addr: impl ToSocketAddrs,
    bundle: &CertBundle,
    handler: Arc<dyn Handler>,
) -> Result<ServerHandle, CallError> {
    let roots = Arc::new(roots(bundle)?);
    let verifier = WebPkiClientVerifier::builder_with_provider(roots, provider())
        .build()
        .map_err(|e| CallError::Config(e.to_string()))?;
    let (chain, key) = identity_parts(bundle)?;
    let config = ServerConfig::builder_with_provider(provider())
        .with_protocol_versions(ALL_VERSIONS)
        .map_err(|e| CallError::Config(e.to_string()))?
        .with_client_cert_verifier(verifier)
        .with_single_cert(chain, key)
        .map_err(|e| CallError::Config(e.to_string()))?;
    let config = Arc::new(config);

    let listener = TcpListener::bind(addr)?;
    let local_addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let connections = Arc::new(Mutex::new(Vec::new()));
    let acceptor = {
        let stop = stop.clone();
        let connections = connections.clone();
        thread::Builder::new()
            .name("tls-accept".into())
            .spawn(move || {
                for sock in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let sock = match sock {
                        Ok(s) => s,
                        Err(e) => {
                            log::warn!("accept failed: {e}");
                            continue;
                        }
                    };
                    if let Ok(clone) = sock.try_clone() {
                        let mut list = connections.lock().unwrap_or_else(|p| p.into_inner());
                        list.retain(|c: &TcpStream| c.peer_addr().is_ok());
                        list.push(clone);
                    }
                    let config = config.clone();
                    let handler = handler.clone();
                    let _ = thread::Builder::new()
                        .name("tls-conn".into())
                        .spawn(move || serve_connection(sock, config, handler));
                }
            })?
    };
    Ok(ServerHandle {
        local_addr,
        stop,
        connections,
        acceptor: Some(acceptor),
    })
}

fn serve_connection(sock: TcpStream, config: Arc<ServerConfig>, handler: Arc<dyn Handler>) {
    let peer_addr = sock.peer_addr().ok();
    let _ = sock.set_nodelay(true);
    let _ = sock.set_read_timeout(Some(HANDSHAKE_TIMEOUT));
    let conn = match ServerConnection::new(config) {
        Ok(c) => c,
        Err(e) => {
            log::warn!("TLS session setup failed: {e}");
            return;
        }
    };
    let mut stream = StreamOwned::new(conn, sock);
    while stream.conn.is_handshaking() {
        if let Err(e) = stream.conn.complete_io(&mut stream.sock) {
            log::info!("handshake with {peer_addr:?} rejected: {e}");
            reject(stream);
            return;
        }
    }
    let identity = stream
        .conn
        .peer_certificates()
        .and_then(|certs| certs.first())
        .map(|c| pki::identity_of(c, CertKind::Client));
    let identity = match identity {
        Some(Ok(id)) => id,
        _ => {
            log::info!("client {peer_addr:?} presented no usable certificate");
            return;
        }
    };
    let peer = PeerInfo {
        identity,
        protocol_version: version_name(stream.conn.protocol_version()),
    };
    let _ = stream.sock.set_read_timeout(Some(IDLE_TIMEOUT));

    loop {
        let frame = match read_frame(&mut stream) {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(WireError::Io(e)) => {
                log::debug!("connection from {} closed: {e}", peer.identity);
                break;
            }
            Err(e @ (WireError::BadMagic(_) | WireError::Oversize(_) | WireError::Truncated)) => {
                // The stream can no longer be resynchronised.
                let reply = Message::error(ErrorCode::Malformed, e.to_string());
                let _ = write_frame(&mut stream, &encode(&reply));
                break;
            }
            Err(e) => {
                let reply = Message::error(ErrorCode::Malformed, e.to_string());
                if write_frame(&mut stream, &encode(&reply)).is_err() {
                    break;
                }
                continue;
            }
        };
        let reply = match decode(&frame) {
            Ok(request) => handler.handle(&peer, request),
            Err(e) => Message::error(ErrorCode::Malformed, e.to_string()),
        };
        if write_frame(&mut stream, &encode(&reply)).is_err() {
            break;
        }
    }
    stream.conn.send_close_notify();
    let _ = stream.flush();
}

/// Flushes any pending alert, then drains the peer's writes so the close
/// does not turn into a reset that would hide the alert from the client.
fn reject(mut stream: StreamOwned<ServerConnection, TcpStream>) {
    while stream.conn.wants_write() {
        if stream.conn.write_tls(&mut stream.sock).is_err() {
            return;
        }
    }
    let _ = stream.sock.shutdown(Shutdown::Write);
    let _ = stream.sock.set_read_timeout(Some(Duration::from_secs(2)));
    let mut sink = [0u8; 4096];
    let deadline = Instant::now() + Duration::from_secs(2);
    while Instant::now() < deadline {
        match stream.sock.read(&mut sink) {
            Ok(0) | Err(_) => break,
            Ok(_) => {}
        }
    }
}
