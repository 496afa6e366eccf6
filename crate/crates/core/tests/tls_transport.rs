mod common;

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use rustls::pki_types::pem::PemObject;
use fedstar::aggregator::{Aggregator, Phase};
use fedstar::pki::{CertKind, KeyAlgorithm};
use fedstar::reference_task::ReferenceRunner;
use fedstar::wire::{
    CallError, ClientTls, ErrorCode, GetTasksRequest, Message, RequestHeader, MAGIC,
};
use fedstar::PlanHash;

fn aggregator() -> Aggregator {
    let p = plan();
    let init = ReferenceRunner::from_plan(&p, 1, 1).unwrap().initial_model();
    Aggregator::new(p, init).unwrap()
}

fn get_tasks(label: &str, hash: PlanHash) -> Message {
    Message::GetTasksRequest(GetTasksRequest {
        header: RequestHeader::new(label, hash),
    })
}

fn code(m: &Message) -> Option<u16> {
    match m {
        Message::ErrorResponse(e) => Some(e.code),
        _ => None,
    }
}

fn nobody_joined(r: &Running) -> bool {
    let s = r.recorder.inner.snapshot().unwrap();
    s.status.joined.is_empty() && s.status.phase == Phase::WaitingForJoin
}

#[test]
fn roster_member_reaches_the_handler_over_tls() {
    let pki = TestPki::new();
    let running = start(aggregator(), &pki.server);
    let mut client = running.client(&pki.client("one"));
    let reply = client.call(&get_tasks("one", plan().hash())).unwrap();
    match reply {
        Message::GetTasksResponse(r) => {
            assert!(r.task_names.is_empty());
            assert!(r.sleep_seconds > 0);
        }
        other => panic!("{other:?}"),
    }
    let version = client.protocol_version().unwrap();
    assert!(version == "TLSv1.3" || version == "TLSv1.2", "{version}");
    let peers = running.recorder.peers.lock().unwrap();
    assert_eq!(peers.len(), 1);
    assert_eq!(peers[0].identity, "one");
    assert_eq!(peers[0].protocol_version, version);
}

#[test]
fn tls12_is_accepted() {
    let pki = TestPki::new();
    let running = start(aggregator(), &pki.server);
    let tls = ClientTls::with_versions(&pki.client("one"), FQDN, &[&rustls::version::TLS12]).unwrap();
    let mut client = client_for(running.port(), tls, Duration::from_secs(5));
    assert!(matches!(client.call(&get_tasks("one", plan().hash())).unwrap(), Message::GetTasksResponse(_)));
    assert_eq!(client.protocol_version().unwrap(), "TLSv1.2");
    assert_eq!(running.recorder.peers.lock().unwrap()[0].identity, "one");
}

#[test]
fn client_without_certificate_fails_the_handshake() {
    let pki = TestPki::new();
    let running = start(aggregator(), &pki.server);
    let tls = ClientTls::anonymous(&pki.server, FQDN).unwrap();
    let mut client = client_for(running.port(), tls, Duration::from_secs(30));
    let started = Instant::now();
    let err = client.call(&get_tasks("one", plan().hash())).unwrap_err();
    assert!(matches!(err, CallError::TlsFailure(_)), "{err:?}");
    // rejected outright, not retried until the budget runs out
    assert!(started.elapsed() < Duration::from_secs(5));
    assert!(running.recorder.peers.lock().unwrap().is_empty());
    assert!(nobody_joined(&running));
}

#[test]
fn client_from_a_foreign_ca_fails_the_handshake() {
    let pki = TestPki::new();
    let foreign = TestPki::new();
    let running = start(aggregator(), &pki.server);
    // trusts the real server, but its own certificate is from elsewhere
    let mut bundle = foreign.client("one");
    bundle.ca_chain = pki.server.ca_chain.clone();
    let tls = ClientTls::new(&bundle, FQDN).unwrap();
    let mut client = client_for(running.port(), tls, Duration::from_secs(30));
    let err = client.call(&get_tasks("one", plan().hash())).unwrap_err();
    assert!(matches!(err, CallError::TlsFailure(_)), "{err:?}");
    assert!(running.recorder.peers.lock().unwrap().is_empty());
    assert!(nobody_joined(&running));
}

#[test]
fn server_from_a_foreign_ca_is_refused_by_the_client() {
    let pki = TestPki::new();
    let foreign = TestPki::new();
    let running = start(aggregator(), &foreign.server);
    let mut client = running.client(&pki.client("one"));
    let err = client.call(&get_tasks("one", plan().hash())).unwrap_err();
    assert!(matches!(err, CallError::TlsFailure(_)), "{err:?}");
}

#[test]
fn server_certificate_for_another_name_is_refused() {
    let pki = TestPki::new();
    let other = issue(&pki.ca, "elsewhere.example.com", CertKind::Server);
    let running = start(aggregator(), &other);
    let mut client = running.client(&pki.client("one"));
    assert!(matches!(
        client.call(&get_tasks("one", plan().hash())),
        Err(CallError::TlsFailure(_))
    ));
}

#[test]
fn signed_client_outside_the_roster_gets_401() {
    let pki = TestPki::new();
    let running = start(aggregator(), &pki.server);
    let mut client = running.client(&pki.client("three"));
    let reply = client.call(&get_tasks("three", plan().hash())).unwrap();
    assert_eq!(code(&reply), Some(ErrorCode::UnknownCollaborator.code()));
    assert!(nobody_joined(&running));
}

#[test]
fn mismatched_plan_hash_gets_409() {
    let pki = TestPki::new();
    let running = start(aggregator(), &pki.server);
    let mut client = running.client(&pki.client("one"));
    let reply = client.call(&get_tasks("one", PlanHash([7; 32]))).unwrap();
    assert_eq!(code(&reply), Some(ErrorCode::PlanHashMismatch.code()));
    assert!(nobody_joined(&running));
}

#[test]
fn spoofed_sender_label_gets_403() {
    let pki = TestPki::new();
    let running = start(aggregator(), &pki.server);
    let mut client = running.client(&pki.client("one"));
    let reply = client.call(&get_tasks("two", plan().hash())).unwrap();
    assert_eq!(code(&reply), Some(ErrorCode::IdentityMismatch.code()));
    assert!(nobody_joined(&running));
}

#[test]
fn rsa_client_certificates_work_too() {
    let pki = TestPki::new();
    let running = start(aggregator(), &pki.server);
    let (request, key) = fedstar::pki::generate_csr("two", CertKind::Client, KeyAlgorithm::Rsa3072).unwrap();
    let bundle = fedstar::pki::CertBundle {
        ca_chain: vec![pki.ca.chain_pem()],
        entity_cert: pki.ca.sign_csr(&request, CertKind::Client).unwrap(),
        private_key: key,
    };
    let mut client = running.client(&bundle);
    assert!(matches!(client.call(&get_tasks("two", plan().hash())).unwrap(), Message::GetTasksResponse(_)));
    assert_eq!(running.recorder.peers.lock().unwrap()[0].identity, "two");
}

#[test]
fn no_plaintext_path() {
    let pki = TestPki::new();
    let running = start(aggregator(), &pki.server);
    let mut sock = TcpStream::connect(("127.0.0.1", running.port())).unwrap();
    sock.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let mut frame = MAGIC.to_vec();
    frame.extend_from_slice(&[1, 0, 0, 0, 0]);
    sock.write_all(&frame).unwrap();
    let mut buf = Vec::new();
    let _ = sock.read_to_end(&mut buf);
    // whatever comes back is a TLS alert record, never a frame
    assert!(!buf.starts_with(&MAGIC));
    if let Some(&content_type) = buf.first() {
        assert_eq!(content_type, 0x15, "expected a TLS alert, got {buf:02x?}");
    }
    assert!(running.recorder.peers.lock().unwrap().is_empty());
}

#[test]
fn malformed_frame_inside_tls_gets_400() {
    use rustls::pki_types::ServerName;
    let pki = TestPki::new();
    let running = start(aggregator(), &pki.server);
    let bundle = pki.client("one");
    // TlsClient only sends well-formed frames, so drive rustls directly
    let roots = {
        let mut r = rustls::RootCertStore::empty();
        for der in bundle.ca_ders().unwrap() {
            r.add(der).unwrap();
        }
        r
    };
    let key = rustls::pki_types::PrivateKeyDer::from_pem_slice(bundle.private_key.as_bytes()).unwrap();
    let config = rustls::ClientConfig::builder_with_provider(Arc::new(rustls::crypto::ring::default_provider()))
        .with_safe_default_protocol_versions()
        .unwrap()
        .with_root_certificates(roots)
        .with_client_auth_cert(vec![bundle.entity_der().unwrap()], key)
        .unwrap();
    let conn = rustls::ClientConnection::new(Arc::new(config), ServerName::try_from(FQDN).unwrap()).unwrap();
    let sock = TcpStream::connect(("127.0.0.1", running.port())).unwrap();
    sock.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let mut stream = rustls::StreamOwned::new(conn, sock);
    // valid header, unknown message type 99
    let mut frame = MAGIC.to_vec();
    frame.extend_from_slice(&[99, 0, 0, 0, 0]);
    stream.write_all(&frame).unwrap();
    let reply = fedstar::wire::read_frame(&mut stream).unwrap().unwrap();
    let reply = fedstar::wire::decode(&reply).unwrap();
    assert_eq!(code(&reply), Some(ErrorCode::Malformed.code()));
    assert!(nobody_joined(&running));
}
