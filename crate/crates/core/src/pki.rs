//! Federation certificate authority: CA creation, CSRs, signing, the
//! issuance database, certificate-exchange packages and peer verification.
//!
//! The aggregator's workspace doubles as the CA. This is meant for test and
//! lab federations; production deployments should have a trusted CA issue
//! the certificates instead.
//!
//! Workspace layout (relative to the workspace root):
//!
//! ```text
//! cert/cert_chain.crt                   CA certificate, shared with everyone
//! cert/ca/root_ca.crt, root_ca.key      CA certificate and signing key
//! cert/ca/issued.db                     one line per issued certificate
//! cert/server/agg_<FQDN>.{csr,key,crt}  aggregator TLS identity
//! cert/client/col_<LABEL>.{csr,key,crt} collaborator TLS identity
//! col_<LABEL>_to_agg_cert_request.zip   CSR transport package
//! agg_to_col_<LABEL>_signed_cert.zip    signed certificate + chain package
//! ```

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, SystemTime};

use rcgen::{
    BasicConstraints, CertificateParams, CertificateSigningRequestParams, DistinguishedName,
    DnType, ExtendedKeyUsagePurpose, IsCa, KeyPair, KeyUsagePurpose, SanType, SerialNumber,
    PKCS_ECDSA_P384_SHA384, PKCS_RSA_SHA384,
};
use rustls_pki_types::pem::PemObject;
use rustls_pki_types::{CertificateDer, UnixTime};
use x509_parser::prelude::{FromDer, GeneralName, X509Certificate};

const CA_VALIDITY_DAYS: i64 = 3650;
const LEAF_VALIDITY_DAYS: i64 = 365;
const CA_COMMON_NAME: &str = "fedstar federation CA";

/// Serializes every issuance in this process.
static ISSUANCE_LOCK: Mutex<()> = Mutex::new(());

#[derive(Debug, thiserror::Error)]
pub enum PkiError {
    #[error("a certificate authority already exists at {0}")]
    AlreadyExists(PathBuf),
    #[error("no certificate authority at {0}")]
    NoCa(PathBuf),
    #[error("invalid {kind} name `{name}`")]
    InvalidName { name: String, kind: CertKind },
    #[error("bad certificate signing request: {0}")]
    BadCsr(String),
    #[error("serial {0} was already issued")]
    DuplicateSerial(u64),
    #[error("certificate is not issued by the federation CA")]
    UntrustedIssuer,
    #[error("certificate is outside its validity window")]
    Expired,
    #[error("certificate is not valid for {0} use")]
    WrongUsage(CertKind),
    #[error("certificate rejected: {0}")]
    Invalid(String),
    #[error("bad package {path}: {reason}")]
    BadPackage { path: PathBuf, reason: String },
    #[error("certificate generation failed: {0}")]
    Generation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<rcgen::Error> for PkiError {
    fn from(e: rcgen::Error) -> Self {
        PkiError::Generation(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PkiError + '_ {
    move |source| PkiError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CertKind {
    /// Aggregator certificates: serverAuth, DNS subjectAltName = FQDN.
    Server,
    /// Collaborator certificates: clientAuth, CN = label.
    Client,
}

impl CertKind {
    pub fn opposite(self) -> Self {
        match self {
            CertKind::Server => CertKind::Client,
            CertKind::Client => CertKind::Server,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            CertKind::Server => "server",
            CertKind::Client => "client",
        }
    }
}

impl fmt::Display for CertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The only key types the API can produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KeyAlgorithm {
    #[default]
    EcdsaP384,
    Rsa3072,
}

impl KeyAlgorithm {
    fn generate(self) -> Result<KeyPair, PkiError> {
        match self {
            KeyAlgorithm::EcdsaP384 => Ok(KeyPair::generate_for(&PKCS_ECDSA_P384_SHA384)?),
            KeyAlgorithm::Rsa3072 => {
                use rsa::pkcs8::EncodePrivateKey;
                let key = rsa::RsaPrivateKey::new(&mut rand::rngs::OsRng, 3072)
                    .map_err(|e| PkiError::Generation(e.to_string()))?;
                let der = key
                    .to_pkcs8_der()
                    .map_err(|e| PkiError::Generation(e.to_string()))?;
                let pkcs8 = rustls_pki_types::PrivatePkcs8KeyDer::from(der.as_bytes());
                Ok(KeyPair::from_pkcs8_der_and_sign_algo(&pkcs8, &PKCS_RSA_SHA384)?)
            }
        }
    }
}

/// CA chain, entity certificate and private key of one participant, all PEM.
#[derive(Clone, PartialEq, Eq)]
pub struct CertBundle {
    pub ca_chain: Vec<String>,
    pub entity_cert: String,
    pub private_key: String,
}

impl fmt::Debug for CertBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CertBundle")
            .field("ca_chain", &self.ca_chain.len())
            .field("entity_cert", &"<pem>")
            .finish_non_exhaustive()
    }
}

impl CertBundle {
    pub fn load(chain: &Path, cert: &Path, key: &Path) -> Result<Self, PkiError> {
        let chain_pem = fs::read_to_string(chain).map_err(io_err(chain))?;
        Ok(CertBundle {
            ca_chain: split_pem_certs(&chain_pem),
            entity_cert: fs::read_to_string(cert).map_err(io_err(cert))?,
            private_key: fs::read_to_string(key).map_err(io_err(key))?,
        })
    }

    pub fn entity_der(&self) -> Result<CertificateDer<'static>, PkiError> {
        pem_to_der(&self.entity_cert)
    }

    pub fn ca_ders(&self) -> Result<Vec<CertificateDer<'static>>, PkiError> {
        self.ca_chain.iter().map(|p| pem_to_der(p)).collect()
    }

    /// Checks the bundle's invariants: the entity certificate chains to the
    /// CA and is in its validity window, and the private key matches it.
    pub fn check(&self, kind: CertKind) -> Result<String, PkiError> {
        let identity = verify_peer(self, &self.entity_der()?, kind)?;
        let key = KeyPair::from_pem(&self.private_key)
            .map_err(|e| PkiError::Invalid(format!("private key: {e}")))?;
        let der = self.entity_der()?;
        let (_, cert) = X509Certificate::from_der(&der)
            .map_err(|e| PkiError::Invalid(e.to_string()))?;
        if cert.public_key().raw != key.public_key_der().as_slice() {
            return Err(PkiError::Invalid("private key does not match certificate".into()));
        }
        Ok(identity)
    }
}

fn pem_to_der(pem: &str) -> Result<CertificateDer<'static>, PkiError> {
    CertificateDer::from_pem_slice(pem.as_bytes())
        .map_err(|e| PkiError::Invalid(format!("certificate PEM: {e}")))
}

fn split_pem_certs(pem: &str) -> Vec<String> {
    CertificateDer::pem_slice_iter(pem.as_bytes())
        .filter_map(Result::ok)
        .map(|der| der_to_pem(&der))
        .collect()
}

fn der_to_pem(der: &[u8]) -> String {
    pem_block("CERTIFICATE", der)
}

fn pem_block(label: &str, der: &[u8]) -> String {
    let config = pem::EncodeConfig::new().set_line_ending(pem::LineEnding::LF);
    pem::encode_config(&pem::Pem::new(label, der.to_vec()), config)
}

/// A certificate signing request plus what the CA needs to know about it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SigningRequest {
    pub subject_common_name: String,
    pub csr_pem: String,
    pub key_algorithm: KeyAlgorithm,
}

impl SigningRequest {
    /// Parses a PEM CSR, checking its self-signature.
    pub fn from_pem(csr_pem: &str) -> Result<Self, PkiError> {
        let der = rustls_pki_types::CertificateSigningRequestDer::from_pem_slice(csr_pem.as_bytes())
            .map_err(|e| PkiError::BadCsr(e.to_string()))?;
        let (_, csr) = x509_parser::certification_request::X509CertificationRequest::from_der(
            der.as_ref(),
        )
        .map_err(|e| PkiError::BadCsr(e.to_string()))?;
        csr.verify_signature()
            .map_err(|_| PkiError::BadCsr("signature does not verify".into()))?;
        let info = &csr.certification_request_info;
        let subject_common_name = info
            .subject
            .iter_common_name()
            .next()
            .and_then(|cn| cn.as_str().ok())
            .ok_or_else(|| PkiError::BadCsr("missing common name".into()))?
            .to_string();
        let alg_oid = info.subject_pki.algorithm.algorithm.to_id_string();
        let key_algorithm = match alg_oid.as_str() {
            // rsaEncryption
            "1.2.840.113549.1.1.1" => KeyAlgorithm::Rsa3072,
            // id-ecPublicKey
            "1.2.840.10045.2.1" => KeyAlgorithm::EcdsaP384,
            other => return Err(PkiError::BadCsr(format!("unsupported key algorithm {other}"))),
        };
        Ok(SigningRequest {
            subject_common_name,
            csr_pem: csr_pem.to_string(),
            key_algorithm,
        })
    }
}

/// Generates a fresh key and a CSR for `common_name`.
///
/// Server names must be hostnames and get a DNS subjectAltName; client
/// names are alphanumeric-with-dots labels carried in the CN only.
pub fn generate_csr(
    common_name: &str,
    kind: CertKind,
    algorithm: KeyAlgorithm,
) -> Result<(SigningRequest, String), PkiError> {
    let valid = match kind {
        CertKind::Server => crate::plan::is_hostname(common_name),
        CertKind::Client => crate::plan::is_label(common_name),
    };
    if !valid {
        return Err(PkiError::InvalidName {
            name: common_name.to_string(),
            kind,
        });
    }
    let key = algorithm.generate()?;
    let mut params = CertificateParams::default();
    params.distinguished_name = distinguished_name(common_name);
    if kind == CertKind::Server {
        params.subject_alt_names = vec![SanType::DnsName(common_name.try_into()?)];
    }
    let csr = params.serialize_request(&key)?;
    let request = SigningRequest {
        subject_common_name: common_name.to_string(),
        csr_pem: csr.pem()?,
        key_algorithm: algorithm,
    };
    Ok((request, key.serialize_pem()))
}

fn distinguished_name(common_name: &str) -> DistinguishedName {
    let mut dn = DistinguishedName::new();
    dn.push(DnType::CommonName, common_name);
    dn.push(DnType::OrganizationName, "fedstar federation");
    dn
}

fn validity(days: i64) -> (time::OffsetDateTime, time::OffsetDateTime) {
    let now = time::OffsetDateTime::now_utc();
    (now - time::Duration::hours(1), now + time::Duration::days(days))
}

/// Paths of the PKI tree inside a workspace.
#[derive(Debug, Clone)]
pub struct PkiLayout {
    root: PathBuf,
}

impl PkiLayout {
    pub fn new(workspace_root: impl Into<PathBuf>) -> Self {
        PkiLayout {
            root: workspace_root.into(),
        }
    }

    pub fn cert_dir(&self) -> PathBuf {
        self.root.join("cert")
    }

    pub fn chain(&self) -> PathBuf {
        self.cert_dir().join("cert_chain.crt")
    }

    pub fn ca_dir(&self) -> PathBuf {
        self.cert_dir().join("ca")
    }

    pub fn ca_cert(&self) -> PathBuf {
        self.ca_dir().join("root_ca.crt")
    }

    pub fn ca_key(&self) -> PathBuf {
        self.ca_dir().join("root_ca.key")
    }

    pub fn issuance_db(&self) -> PathBuf {
        self.ca_dir().join("issued.db")
    }

    pub fn server_file(&self, fqdn: &str, ext: &str) -> PathBuf {
        self.cert_dir().join("server").join(format!("agg_{fqdn}.{ext}"))
    }

    pub fn client_file(&self, label: &str, ext: &str) -> PathBuf {
        self.cert_dir().join("client").join(format!("col_{label}.{ext}"))
    }

    pub fn request_package(&self, label: &str) -> PathBuf {
        self.root.join(request_package_name(label))
    }

    pub fn signed_package(&self, label: &str) -> PathBuf {
        self.root.join(signed_package_name(label))
    }

    pub fn server_bundle(&self, fqdn: &str) -> Result<CertBundle, PkiError> {
        CertBundle::load(
            &self.chain(),
            &self.server_file(fqdn, "crt"),
            &self.server_file(fqdn, "key"),
        )
    }

    pub fn client_bundle(&self, label: &str) -> Result<CertBundle, PkiError> {
        CertBundle::load(
            &self.chain(),
            &self.client_file(label, "crt"),
            &self.client_file(label, "key"),
        )
    }
}

pub fn request_package_name(label: &str) -> String {
    format!("col_{label}_to_agg_cert_request.zip")
}

pub fn signed_package_name(label: &str) -> String {
    format!("agg_to_col_{label}_signed_cert.zip")
}

/// One line of the issuance database.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IssuedRecord {
    pub serial: u64,
    pub kind: CertKind,
    pub common_name: String,
    pub not_after: String,
}

pub struct CertificateAuthority {
    layout: PkiLayout,
    bundle: CertBundle,
}

impl fmt::Debug for CertificateAuthority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CertificateAuthority")
            .field("layout", &self.layout)
            .finish_non_exhaustive()
    }
}

/// Creates a self-signed ECDSA-P384/SHA-384 CA (10 years, pathlen 0), the
/// shared `cert_chain.crt`, and an empty issuance database.
pub fn create_ca(workspace_dir: &Path) -> Result<CertificateAuthority, PkiError> {
    let layout = PkiLayout::new(workspace_dir);
    if !workspace_dir.is_dir() {
        return Err(PkiError::Io {
            path: workspace_dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "workspace does not exist"),
        });
    }
    if layout.ca_cert().exists() || layout.ca_key().exists() {
        return Err(PkiError::AlreadyExists(layout.ca_dir()));
    }
    let key = KeyPair::generate_for(&PKCS_ECDSA_P384_SHA384)?;
    let mut params = CertificateParams::default();
    params.distinguished_name = distinguished_name(CA_COMMON_NAME);
    params.is_ca = IsCa::Ca(BasicConstraints::Constrained(0));
    params.key_usages = vec![
        KeyUsagePurpose::KeyCertSign,
        KeyUsagePurpose::CrlSign,
        KeyUsagePurpose::DigitalSignature,
    ];
    (params.not_before, params.not_after) = validity(CA_VALIDITY_DAYS);
    let cert = params.self_signed(&key)?;

    let ca_dir = layout.ca_dir();
    fs::create_dir_all(&ca_dir).map_err(io_err(&ca_dir))?;
    let cert_pem = cert.pem();
    write_file(&layout.ca_cert(), cert_pem.as_bytes())?;
    write_private(&layout.ca_key(), &key.serialize_pem())?;
    write_file(&layout.chain(), cert_pem.as_bytes())?;
    write_file(&layout.issuance_db(), b"")?;

    Ok(CertificateAuthority {
        bundle: CertBundle {
            ca_chain: vec![cert_pem.clone()],
            entity_cert: cert_pem,
            private_key: key.serialize_pem(),
        },
        layout,
    })
}

impl CertificateAuthority {
    pub fn open(workspace_dir: &Path) -> Result<Self, PkiError> {
        let layout = PkiLayout::new(workspace_dir);
        if !layout.ca_cert().exists() {
            return Err(PkiError::NoCa(layout.ca_dir()));
        }
        let bundle = CertBundle::load(&layout.ca_cert(), &layout.ca_cert(), &layout.ca_key())?;
        Ok(CertificateAuthority { layout, bundle })
    }

    /// CA certificate, as the trust root everybody verifies against.
    pub fn bundle(&self) -> &CertBundle {
        &self.bundle
    }

    /// Trust-only bundle (no private key) for distributing the chain.
    pub fn chain_pem(&self) -> String {
        self.bundle.ca_chain.concat()
    }

    pub fn layout(&self) -> &PkiLayout {
        &self.layout
    }

    pub fn issued(&self) -> Result<Vec<IssuedRecord>, PkiError> {
        read_issuance_db(&self.layout.issuance_db())
    }

    /// Signs a CSR as a SERVER or CLIENT leaf (1 year, SHA-384) and records
    /// the serial. Serials increase strictly, starting at 1.
    pub fn sign_csr(&self, request: &SigningRequest, kind: CertKind) -> Result<String, PkiError> {
        let csr = CertificateSigningRequestParams::from_pem(&request.csr_pem)
            .map_err(|e| PkiError::BadCsr(e.to_string()))?;
        let parsed = SigningRequest::from_pem(&request.csr_pem)?;
        let cn = parsed.subject_common_name;
        let has_dns_san = csr
            .params
            .subject_alt_names
            .iter()
            .any(|san| matches!(san, SanType::DnsName(name) if name.as_str() == cn));
        match kind {
            CertKind::Server if !crate::plan::is_hostname(&cn) || !has_dns_san => {
                return Err(PkiError::BadCsr(format!(
                    "server request for `{cn}` needs a hostname CN and a matching DNS subjectAltName"
                )))
            }
            CertKind::Client if !crate::plan::is_label(&cn) => {
                return Err(PkiError::InvalidName { name: cn, kind })
            }
            _ => {}
        }

        let _guard = ISSUANCE_LOCK.lock().unwrap_or_else(|p| p.into_inner());
        let db_path = self.layout.issuance_db();
        let records = read_issuance_db(&db_path)?;
        let serial = records.iter().map(|r| r.serial).max().unwrap_or(0) + 1;
        if records.iter().any(|r| r.serial == serial) {
            return Err(PkiError::DuplicateSerial(serial));
        }

        let ca_params = CertificateParams::from_ca_cert_pem(&self.bundle.entity_cert)?;
        let ca_key = KeyPair::from_pem(&self.bundle.private_key)?;
        let ca_cert = ca_params.self_signed(&ca_key)?;

        let mut params = csr.params;
        params.serial_number = Some(SerialNumber::from(serial));
        (params.not_before, params.not_after) = validity(LEAF_VALIDITY_DAYS);
        params.is_ca = IsCa::ExplicitNoCa;
        params.use_authority_key_identifier_extension = true;
        params.key_usages = match request.key_algorithm {
            KeyAlgorithm::EcdsaP384 => vec![KeyUsagePurpose::DigitalSignature],
            KeyAlgorithm::Rsa3072 => vec![
                KeyUsagePurpose::DigitalSignature,
                KeyUsagePurpose::KeyEncipherment,
            ],
        };
        params.extended_key_usages = vec![match kind {
            CertKind::Server => ExtendedKeyUsagePurpose::ServerAuth,
            CertKind::Client => ExtendedKeyUsagePurpose::ClientAuth,
        }];
        let not_after = params.not_after;
        let signed = CertificateSigningRequestParams {
            params,
            public_key: csr.public_key,
        }
        .signed_by(&ca_cert, &ca_key)?;

        let line = format!(
            "{serial}\t{kind}\t{cn}\t{}\n",
            not_after
                .format(&time::format_description::well_known::Rfc3339)
                .unwrap_or_default()
        );
        let mut db = fs::OpenOptions::new()
            .append(true)
            .open(&db_path)
            .map_err(io_err(&db_path))?;
        db.write_all(line.as_bytes()).map_err(io_err(&db_path))?;
        Ok(signed.pem())
    }
}

fn read_issuance_db(path: &Path) -> Result<Vec<IssuedRecord>, PkiError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let bad = || PkiError::Invalid(format!("corrupt issuance database line `{line}`"));
            let mut fields = line.split('\t');
            let serial = fields.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let kind = match fields.next() {
                Some("server") => CertKind::Server,
                Some("client") => CertKind::Client,
                _ => return Err(bad()),
            };
            let common_name = fields.next().ok_or_else(bad)?.to_string();
            let not_after = fields.next().unwrap_or_default().to_string();
            Ok(IssuedRecord {
                serial,
                kind,
                common_name,
                not_after,
            })
        })
        .collect()
}

/// Verifies `presented` against the bundle's CA chain for `expected_kind`
/// use, at the current time, and returns the certificate's identity (CN for
/// clients; first DNS subjectAltName, else CN, for servers).
pub fn verify_peer(
    chain_root: &CertBundle,
    presented: &CertificateDer<'_>,
    expected_kind: CertKind,
) -> Result<String, PkiError> {
    verify_peer_at(chain_root, presented, expected_kind, SystemTime::now())
}

pub fn verify_peer_at(
    chain_root: &CertBundle,
    presented: &CertificateDer<'_>,
    expected_kind: CertKind,
    at: SystemTime,
) -> Result<String, PkiError> {
    let ca_ders = chain_root.ca_ders()?;
    let anchors = ca_ders
        .iter()
        .map(|der| {
            webpki::anchor_from_trusted_cert(der)
                .map(|a| a.to_owned())
                .map_err(|e| PkiError::Invalid(format!("trust anchor: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let cert = webpki::EndEntityCert::try_from(presented)
        .map_err(|e| PkiError::Invalid(e.to_string()))?;
    let usage = match expected_kind {
        CertKind::Server => webpki::KeyUsage::server_auth(),
        CertKind::Client => webpki::KeyUsage::client_auth(),
    };
    let since_epoch = at.duration_since(SystemTime::UNIX_EPOCH).unwrap_or(Duration::ZERO);
    cert.verify_for_usage(
        rustls::crypto::ring::default_provider()
            .signature_verification_algorithms
            .all,
        &anchors,
        &[],
        UnixTime::since_unix_epoch(since_epoch),
        usage,
        None,
        None,
    )
    .map_err(|e| map_webpki_error(e, expected_kind))?;
    identity_of(presented, expected_kind)
}

#[allow(deprecated)]
fn map_webpki_error(e: webpki::Error, kind: CertKind) -> PkiError {
    use webpki::Error as E;
    match e {
        E::UnknownIssuer | E::InvalidSignatureForPublicKey => {
            PkiError::UntrustedIssuer
        }
        E::CertExpired { .. } | E::CertNotValidYet { .. } => PkiError::Expired,
        E::RequiredEkuNotFound | E::RequiredEkuNotFoundContext(_) => PkiError::WrongUsage(kind),
        other => PkiError::Invalid(format!("{other:?}")),
    }
}

/// Reads the identity out of a certificate without verifying it.
pub fn identity_of(cert: &CertificateDer<'_>, kind: CertKind) -> Result<String, PkiError> {
    let (_, parsed) =
        X509Certificate::from_der(cert.as_ref()).map_err(|e| PkiError::Invalid(e.to_string()))?;
    if kind == CertKind::Server {
        if let Ok(Some(san)) = parsed.subject_alternative_name() {
            if let Some(dns) = san.value.general_names.iter().find_map(|n| match n {
                GeneralName::DNSName(d) => Some(d.to_string()),
                _ => None,
            }) {
                return Ok(dns);
            }
        }
    }
    let cn = parsed
        .subject()
        .iter_common_name()
        .next()
        .and_then(|cn| cn.as_str().ok())
        .map(str::to_string);
    cn.ok_or_else(|| PkiError::Invalid("certificate has no common name".into()))
}

/// Dotted OID of the certificate's signature algorithm.
pub fn signature_algorithm_oid(cert_pem: &str) -> Result<String, PkiError> {
    let der = pem_to_der(cert_pem)?;
    let (_, parsed) =
        X509Certificate::from_der(der.as_ref()).map_err(|e| PkiError::Invalid(e.to_string()))?;
    Ok(parsed.signature_algorithm.algorithm.to_id_string())
}

/// OID of ecdsa-with-SHA384.
pub const ECDSA_WITH_SHA384: &str = "1.2.840.10045.4.3.3";

pub fn serial_of(cert_pem: &str) -> Result<u64, PkiError> {
    let der = pem_to_der(cert_pem)?;
    let (_, parsed) =
        X509Certificate::from_der(der.as_ref()).map_err(|e| PkiError::Invalid(e.to_string()))?;
    u64::try_from(parsed.serial.clone()).map_err(|_| PkiError::Invalid("serial too large".into()))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), PkiError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

/// Writes a private key readable by the owner only.
pub fn write_private(path: &Path, pem: &str) -> Result<(), PkiError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut options = fs::OpenOptions::new();
    options.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        options.mode(0o600);
    }
    let mut file = options.open(path).map_err(io_err(path))?;
    file.write_all(pem.as_bytes()).map_err(io_err(path))
}

pub fn write_certificate(path: &Path, pem: &str) -> Result<(), PkiError> {
    write_file(path, pem.as_bytes())
}

/// Writes `col_<LABEL>_to_agg_cert_request.zip` containing exactly
/// `col_<LABEL>.csr`.
pub fn write_request_package(path: &Path, label: &str, csr_pem: &str) -> Result<(), PkiError> {
    write_zip(path, &[(format!("col_{label}.csr"), csr_pem.as_bytes())])
}

/// Returns `(label, request)` from a CSR package.
pub fn read_request_package(path: &Path) -> Result<(String, SigningRequest), PkiError> {
    let entries = read_zip(path)?;
    let bad = |reason: &str| PkiError::BadPackage {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let [(name, bytes)] = entries.as_slice() else {
        return Err(bad("expected exactly one CSR file"));
    };
    let label = name
        .strip_prefix("col_")
        .and_then(|n| n.strip_suffix(".csr"))
        .ok_or_else(|| bad("entry is not named col_<LABEL>.csr"))?
        .to_string();
    let pem = String::from_utf8(bytes.clone()).map_err(|_| bad("CSR is not UTF-8"))?;
    let request = SigningRequest::from_pem(&pem)?;
    if request.subject_common_name != label {
        return Err(bad("CSR common name does not match the package label"));
    }
    Ok((label, request))
}

/// Writes `agg_to_col_<LABEL>_signed_cert.zip` with the signed certificate
/// and the CA chain.
pub fn write_signed_package(
    path: &Path,
    label: &str,
    cert_pem: &str,
    chain_pem: &str,
) -> Result<(), PkiError> {
    write_zip(
        path,
        &[
            (format!("col_{label}.crt"), cert_pem.as_bytes()),
            ("cert_chain.crt".to_string(), chain_pem.as_bytes()),
        ],
    )
}

/// Returns `(label, certificate pem, chain pem)`.
pub fn read_signed_package(path: &Path) -> Result<(String, String, String), PkiError> {
    let bad = |reason: &str| PkiError::BadPackage {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut label = None;
    let mut cert = None;
    let mut chain = None;
    for (name, bytes) in read_zip(path)? {
        let text = String::from_utf8(bytes).map_err(|_| bad("non-UTF-8 entry"))?;
        if name == "cert_chain.crt" {
            chain = Some(text);
        } else if let Some(l) = name.strip_prefix("col_").and_then(|n| n.strip_suffix(".crt")) {
            label = Some(l.to_string());
            cert = Some(text);
        } else {
            return Err(bad(&format!("unexpected entry `{name}`")));
        }
    }
    match (label, cert, chain) {
        (Some(l), Some(c), Some(ch)) => Ok((l, c, ch)),
        _ => Err(bad("needs col_<LABEL>.crt and cert_chain.crt")),
    }
}

fn write_zip(path: &Path, entries: &[(String, &[u8])]) -> Result<(), PkiError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut zip = zip::ZipWriter::new(file);
    let options = zip::write::SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Stored);
    for (name, bytes) in entries {
        zip.start_file(name.as_str(), options)
            .and_then(|_| zip.write_all(bytes).map_err(Into::into))
            .map_err(|e| PkiError::BadPackage {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
    }
    zip.finish().map_err(|e| PkiError::BadPackage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(())
}

fn read_zip(path: &Path) -> Result<Vec<(String, Vec<u8>)>, PkiError> {
    let bad = |e: &dyn fmt::Display| PkiError::BadPackage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut archive = zip::ZipArchive::new(file).map_err(|e| bad(&e))?;
    let mut out = Vec::with_capacity(archive.len());
    for i in 0..archive.len() {
        let mut entry = archive.by_index(i).map_err(|e| bad(&e))?;
        let name = entry
            .enclosed_name()
            .and_then(|p| p.to_str().map(str::to_string))
            .filter(|n| !n.contains('/'))
            .ok_or_else(|| bad(&"entry path escapes the package"))?;
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes).map_err(|e| bad(&e))?;
        out.push((name, bytes));
    }
    Ok(out)
}
