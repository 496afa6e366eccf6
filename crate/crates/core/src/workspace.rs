//! Workspace lifecycle: templates, plan initialization, certificate steps,
//! export/import archives, and the OFMF model file format.
//!
//! Layout of a workspace root:
//!
//! ```text
//! .workspace          template name
//! plan/plan.yaml      the federation plan
//! save/               initial and final model files
//! cert/               PKI tree (see `pki`)
//! data/shard.yaml     this node's shard of the reference dataset
//! requirements.txt    informational dependency manifest
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::pki::{self, CertKind, KeyAlgorithm, PkiError, PkiLayout};
use crate::plan::{self, FlPlan, PlanError, PlanHash};
use crate::reference_task::{init_model, DatasetConfig};

pub const PLAN_FILE: &str = "plan/plan.yaml";
pub const SHARD_FILE: &str = "data/shard.yaml";
pub const REQUIREMENTS_FILE: &str = "requirements.txt";
pub const MARKER_FILE: &str = ".workspace";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum WorkspaceError {
    #[error("{0} already exists")]
    Exists(PathBuf),
    #[error("unknown template `{name}`; available: {}", available.join(", "))]
    UnknownTemplate { name: String, available: Vec<String> },
    #[error("{path} is not a workspace: {reason}")]
    NotAWorkspace { path: PathBuf, reason: String },
    #[error("missing {what} at {path}")]
    Missing { what: String, path: PathBuf },
    #[error("could not detect this host's FQDN ({0}); pass one explicitly")]
    FqdnDetectFailure(String),
    #[error("invalid hostname `{0}`")]
    InvalidHostname(String),
    #[error("plan hash {actual} does not match manifest {expected}")]
    HashMismatch { expected: String, actual: String },
    #[error("bad archive: {0}")]
    BadArchive(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Pki(#[from] PkiError),
    #[error(transparent)]
    ModelFile(#[from] model_file::ModelFileError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WorkspaceError + '_ {
    move |source| WorkspaceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A built-in workspace template.
#[derive(Debug, Clone, Copy)]
pub struct Template {
    pub name: &'static str,
    pub description: &'static str,
    pub plan: &'static str,
    pub requirements: &'static str,
}

const MLP_BLOBS_PLAN: &str = "\
# Federated MLP classifier on synthetic Gaussian blobs.
aggregator:
  settings:
    fqdn: localhost
    port: 50051
    rounds_to_train: 5
    init_model_path: save/mlp_blobs_init.ofmf
    final_model_path: save/mlp_blobs_latest.ofmf
collaborators:
  - one
  - two
tasks:
  train:
    kind: TRAIN
    hyperparams:
      batch_size: 32
      epochs_per_round: 2
      learning_rate: 0.05
      optimizer: sgd
      opt_treatment: RESET
      seed: 1
      classes: 4
      samples_per_class: 400
      held_out_per_class: 100
      feature_dim: 8
      data_seed: 7
      model_seed: 0
  validate:
    kind: VALIDATE
assigner:
  groups:
    - group_name: train_and_validate
      percentage: 1.0
      task_names: [train, validate]
straggler_policy:
  mode: ALL
assignment_seed: 42
";

pub const TEMPLATES: &[Template] = &[Template {
    name: "mlp_blobs",
    description: "three-layer MLP on a synthetic 4-class Gaussian blobs dataset",
    plan: MLP_BLOBS_PLAN,
    requirements: "# Informational: the reference task has no external dependencies.\nfedstar==0.1.0\n",
}];

pub fn template(name: &str) -> Result<&'static Template, WorkspaceError> {
    TEMPLATES
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| WorkspaceError::UnknownTemplate {
            name: name.to_string(),
            available: TEMPLATES.iter().map(|t| t.name.to_string()).collect(),
        })
}

/// `{shard_index, shard_count}` of the reference dataset on this node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardSpec {
    pub shard_index: usize,
    pub shard_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub plan_hash: String,
    pub template_name: String,
    pub created_at: String,
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

/// Materializes `template` at `prefix`, which must not exist yet.
pub fn create_workspace(prefix: &Path, template_name: &str) -> Result<Workspace, WorkspaceError> {
    let t = template(template_name)?;
    if prefix.exists() {
        return Err(WorkspaceError::Exists(prefix.to_path_buf()));
    }
    // The template must be a valid plan before anything is written.
    plan::parse_plan(t.plan)?;
    for dir in ["plan", "save", "cert", "data"] {
        let d = prefix.join(dir);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    write(&prefix.join(PLAN_FILE), t.plan.as_bytes())?;
    write(&prefix.join(REQUIREMENTS_FILE), t.requirements.as_bytes())?;
    write(&prefix.join(MARKER_FILE), format!("{}\n", t.name).as_bytes())?;
    Workspace::open(prefix)
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), WorkspaceError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn is_safe_relative(path: &str) -> bool {
    let p = Path::new(path);
    !path.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)))
}

/// The host name as the OS reports it, if it is a valid hostname.
pub fn detect_fqdn() -> Result<String, WorkspaceError> {
    let name = gethostname::gethostname()
        .into_string()
        .map_err(|_| WorkspaceError::FqdnDetectFailure("hostname is not UTF-8".into()))?;
    let name = name.trim().to_ascii_lowercase();
    if plan::is_hostname(&name) {
        Ok(name)
    } else {
        Err(WorkspaceError::FqdnDetectFailure(format!("`{name}` is not a hostname")))
    }
}

impl Workspace {
    pub fn open(root: &Path) -> Result<Self, WorkspaceError> {
        let ws = Workspace {
            root: root.to_path_buf(),
        };
        if !ws.plan_path().is_file() {
            return Err(WorkspaceError::NotAWorkspace {
                path: root.to_path_buf(),
                reason: format!("no {PLAN_FILE}"),
            });
        }
        let plan = ws.load_plan()?;
        for (what, path) in [
            ("init_model_path", &plan.settings().init_model_path),
            ("final_model_path", &plan.settings().final_model_path),
        ] {
            if !is_safe_relative(path) || !path.starts_with("save/") {
                return Err(WorkspaceError::NotAWorkspace {
                    path: root.to_path_buf(),
                    reason: format!("{what} `{path}` must be a relative path under save/"),
                });
            }
        }
        Ok(ws)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn plan_path(&self) -> PathBuf {
        self.root.join(PLAN_FILE)
    }

    pub fn load_plan(&self) -> Result<FlPlan, WorkspaceError> {
        let path = self.plan_path();
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(plan::parse_plan(&text)?)
    }

    pub fn save_plan(&self, plan: &FlPlan) -> Result<(), WorkspaceError> {
        plan.validate()?;
        write(&self.plan_path(), plan::serialize_plan(plan).as_bytes())
    }

    pub fn template_name(&self) -> String {
        fs::read_to_string(self.root.join(MARKER_FILE))
            .map(|s| s.trim().to_string())
            .unwrap_or_else(|_| "custom".to_string())
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn init_model_path(&self) -> Result<PathBuf, WorkspaceError> {
        Ok(self.resolve(&self.load_plan()?.settings().init_model_path))
    }

    pub fn final_model_path(&self) -> Result<PathBuf, WorkspaceError> {
        Ok(self.resolve(&self.load_plan()?.settings().final_model_path))
    }

    pub fn pki(&self) -> PkiLayout {
        PkiLayout::new(&self.root)
    }

    pub fn shard(&self) -> Result<ShardSpec, WorkspaceError> {
        let path = self.root.join(SHARD_FILE);
        let text = fs::read_to_string(&path).map_err(|_| WorkspaceError::Missing {
            what: "shard configuration (run `collaborator generate-cert-request`)".into(),
            path: path.clone(),
        })?;
        let spec: ShardSpec = serde_yaml::from_str(&text).map_err(|e| WorkspaceError::NotAWorkspace {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if spec.shard_count == 0 || spec.shard_index == 0 || spec.shard_index > spec.shard_count {
            return Err(WorkspaceError::NotAWorkspace {
                path,
                reason: format!("shard {} of {} is invalid", spec.shard_index, spec.shard_count),
            });
        }
        Ok(spec)
    }

    pub fn set_shard(&self, spec: ShardSpec) -> Result<(), WorkspaceError> {
        let text = serde_yaml::to_string(&spec).expect("shard spec serializes");
        write(&self.root.join(SHARD_FILE), text.as_bytes())
    }

    /// Sets the aggregator FQDN (override, else detected) and writes the
    /// initial model derived from the TRAIN task's dataset settings.
    pub fn initialize_plan(&self, fqdn_override: Option<&str>) -> Result<FlPlan, WorkspaceError> {
        let mut plan = self.load_plan()?;
        let fqdn = match fqdn_override {
            Some(f) if plan::is_hostname(f) => f.to_string(),
            Some(f) => return Err(WorkspaceError::InvalidHostname(f.to_string())),
            None => detect_fqdn()?,
        };
        plan.aggregator.settings.fqdn = fqdn;
        self.save_plan(&plan)?;
        let cfg = DatasetConfig::from_plan(&plan).map_err(|e| WorkspaceError::NotAWorkspace {
            path: self.plan_path(),
            reason: e.to_string(),
        })?;
        let model = init_model(cfg.input_dim(), cfg.classes, cfg.model_seed);
        model_file::save(&self.resolve(&plan.settings().init_model_path), &model)?;
        Ok(plan)
    }

    /// Makes this workspace the federation CA.
    pub fn certify(&self) -> Result<pki::CertificateAuthority, WorkspaceError> {
        Ok(pki::create_ca(&self.root)?)
    }

    /// Key and CSR for the aggregator's TLS identity.
    pub fn aggregator_cert_request(&self, fqdn: &str, algorithm: KeyAlgorithm) -> Result<PathBuf, WorkspaceError> {
        let (request, key) = pki::generate_csr(fqdn, CertKind::Server, algorithm)?;
        let layout = self.pki();
        pki::write_private(&layout.server_file(fqdn, "key"), &key)?;
        let csr = layout.server_file(fqdn, "csr");
        write(&csr, request.csr_pem.as_bytes())?;
        Ok(csr)
    }

    /// Signs the aggregator CSR with this workspace's CA.
    pub fn aggregator_certify(&self, fqdn: &str) -> Result<PathBuf, WorkspaceError> {
        let ca = pki::CertificateAuthority::open(&self.root)?;
        let layout = self.pki();
        let csr_path = layout.server_file(fqdn, "csr");
        let pem = fs::read_to_string(&csr_path).map_err(|_| WorkspaceError::Missing {
            what: "aggregator certificate request".into(),
            path: csr_path.clone(),
        })?;
        let cert = ca.sign_csr(&pki::SigningRequest::from_pem(&pem)?, CertKind::Server)?;
        let crt = layout.server_file(fqdn, "crt");
        pki::write_certificate(&crt, &cert)?;
        Ok(crt)
    }

    /// Key, CSR and CSR package for a collaborator, plus its shard file.
    pub fn collaborator_cert_request(
        &self,
        label: &str,
        shard: ShardSpec,
        algorithm: KeyAlgorithm,
    ) -> Result<PathBuf, WorkspaceError> {
        let (request, key) = pki::generate_csr(label, CertKind::Client, algorithm)?;
        let layout = self.pki();
        pki::write_private(&layout.client_file(label, "key"), &key)?;
        write(&layout.client_file(label, "csr"), request.csr_pem.as_bytes())?;
        let package = layout.request_package(label);
        pki::write_request_package(&package, label, &request.csr_pem)?;
        self.set_shard(shard)?;
        Ok(package)
    }

    /// CA side: signs a collaborator's CSR package and writes the signed
    /// package into this workspace's root.
    pub fn certify_request_package(&self, package: &Path) -> Result<PathBuf, WorkspaceError> {
        let ca = pki::CertificateAuthority::open(&self.root)?;
        let (label, request) = pki::read_request_package(package)?;
        let cert = ca.sign_csr(&request, CertKind::Client)?;
        let out = self.pki().signed_package(&label);
        pki::write_signed_package(&out, &label, &cert, &ca.chain_pem())?;
        Ok(out)
    }

    /// Collaborator side: installs the signed certificate and CA chain after
    /// checking they fit the locally held key. Returns the label.
    pub fn import_signed_package(&self, package: &Path) -> Result<String, WorkspaceError> {
        let (label, cert, chain) = pki::read_signed_package(package)?;
        let layout = self.pki();
        let key_path = layout.client_file(&label, "key");
        let key = fs::read_to_string(&key_path).map_err(|_| WorkspaceError::Missing {
            what: format!("private key for `{label}`"),
            path: key_path.clone(),
        })?;
        let bundle = pki::CertBundle {
            ca_chain: vec![chain.clone()],
            entity_cert: cert.clone(),
            private_key: key,
        };
        bundle.check(CertKind::Client)?;
        pki::write_certificate(&layout.client_file(&label, "crt"), &cert)?;
        pki::write_certificate(&layout.chain(), &chain)?;
        Ok(label)
    }

    pub fn manifest(&self) -> Result<Manifest, WorkspaceError> {
        Ok(Manifest {
            plan_hash: self.load_plan()?.hash().to_hex(),
            template_name: self.template_name(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        })
    }

    /// Files that go into an export, relative to the root and sorted.
    /// Everything under `cert/` and any zip at the root stays behind.
    pub fn exportable_files(&self) -> Result<Vec<PathBuf>, WorkspaceError> {
        let mut out = Vec::new();
        for entry in walkdir::WalkDir::new(&self.root).sort_by_file_name() {
            let entry = entry.map_err(|e| WorkspaceError::Io {
                path: self.root.clone(),
                source: e.into(),
            })?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry
                .path()
                .strip_prefix(&self.root)
                .expect("walk stays under root")
                .to_path_buf();
            let top = rel.components().next().map(|c| c.as_os_str().to_owned());
            if top.as_deref() == Some("cert".as_ref()) {
                continue;
            }
            let is_root_zip = rel.components().count() == 1
                && rel.extension().is_some_and(|e| e.eq_ignore_ascii_case("zip"));
            if is_root_zip || rel.extension().is_some_and(|e| e == "key") {
                continue;
            }
            out.push(rel);
        }
        Ok(out)
    }

    /// Writes `<root>/<dir name>.zip` with the exportable files and a
    /// manifest, and returns its path.
    pub fn export(&self) -> Result<PathBuf, WorkspaceError> {
        let name = self
            .root
            .canonicalize()
            .map_err(io_err(&self.root))?
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "workspace".into());
        let out = self.root.join(format!("{name}.zip"));
        self.export_to(&out)?;
        Ok(out)
    }

    pub fn export_to(&self, out: &Path) -> Result<(), WorkspaceError> {
        let manifest = self.manifest()?;
        let files = self.exportable_files()?;
        let tmp = public_tempfile(out.parent().unwrap_or(Path::new("."))).map_err(io_err(out))?;
        {
            let mut zip = zip::ZipWriter::new(tmp.as_file());
            let options = zip::write::SimpleFileOptions::default()
                .compression_method(zip::CompressionMethod::Deflated)
                .last_modified_time(zip::DateTime::default())
                .unix_permissions(0o644);
            let bad = |e: zip::result::ZipError| WorkspaceError::BadArchive(e.to_string());
            let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
            zip.start_file(MANIFEST_FILE, options).map_err(bad)?;
            zip.write_all(&json).map_err(io_err(out))?;
            for rel in files {
                let name = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                let full = self.root.join(&rel);
                let bytes = fs::read(&full).map_err(io_err(&full))?;
                zip.start_file(name, options).map_err(bad)?;
                zip.write_all(&bytes).map_err(io_err(out))?;
            }
            zip.finish().map_err(bad)?;
        }
        tmp.persist(out).map_err(|e| WorkspaceError::Io {
            path: out.to_path_buf(),
            source: e.error,
        })?;
        Ok(())
    }
}

/// A world-readable temporary file for atomic writes of shareable files.
fn public_tempfile(dir: &Path) -> std::io::Result<tempfile::NamedTempFile> {
    use std::os::unix::fs::PermissionsExt;
    tempfile::Builder::new()
        .permissions(fs::Permissions::from_mode(0o644))
        .tempfile_in(dir)
}

/// Unpacks an archive into `dest` (which must not exist) and checks the
/// plan against the manifest. Returns the workspace and the contents of
/// its dependency manifest.
pub fn import_workspace(archive: &Path, dest: &Path) -> Result<(Workspace, String), WorkspaceError> {
    if dest.exists() {
        return Err(WorkspaceError::Exists(dest.to_path_buf()));
    }
    let file = fs::File::open(archive).map_err(io_err(archive))?;
    let mut zip = zip::ZipArchive::new(file).map_err(|e| WorkspaceError::BadArchive(e.to_string()))?;
    let mut manifest = None;
    let mut entries: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    for i in 0..zip.len() {
        let mut entry = zip
            .by_index(i)
            .map_err(|e| WorkspaceError::BadArchive(e.to_string()))?;
        if entry.is_dir() {
            continue;
        }
        let name = entry.name().to_string();
        let rel = entry
            .enclosed_name()
            .filter(|p| p.components().all(|c| matches!(c, Component::Normal(_))))
            .ok_or_else(|| WorkspaceError::BadArchive(format!("entry `{name}` escapes the workspace")))?;
        let mut bytes = Vec::new();
        entry
            .read_to_end(&mut bytes)
            .map_err(|e| WorkspaceError::BadArchive(e.to_string()))?;
        if name == MANIFEST_FILE {
            manifest = Some(
                serde_json::from_slice::<Manifest>(&bytes)
                    .map_err(|e| WorkspaceError::BadArchive(format!("manifest: {e}")))?,
            );
        } else {
            entries.push((rel, bytes));
        }
    }
    let manifest = manifest.ok_or_else(|| WorkspaceError::BadArchive("no manifest.json".into()))?;
    let plan_bytes = entries
        .iter()
        .find(|(p, _)| p == Path::new(PLAN_FILE))
        .map(|(_, b)| b)
        .ok_or_else(|| WorkspaceError::BadArchive(format!("no {PLAN_FILE}")))?;
    let plan_text = std::str::from_utf8(plan_bytes)
        .map_err(|_| WorkspaceError::BadArchive("plan is not UTF-8".into()))?;
    let actual = plan::parse_plan(plan_text)?.hash();
    let expected = PlanHash::from_hex(&manifest.plan_hash)
        .ok_or_else(|| WorkspaceError::BadArchive("manifest plan_hash is not 64 hex digits".into()))?;
    if actual != expected {
        return Err(WorkspaceError::HashMismatch {
            expected: manifest.plan_hash,
            actual: actual.to_hex(),
        });
    }
    for (rel, bytes) in &entries {
        write(&dest.join(rel), bytes)?;
    }
    for dir in ["save", "cert", "data"] {
        let d = dest.join(dir);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let requirements = fs::read_to_string(dest.join(REQUIREMENTS_FILE)).unwrap_or_default();
    Ok((Workspace::open(dest)?, requirements))
}

/// The OFMF model file: magic `OFMF`, BE u16 version, BE u32 tensor count,
/// then per tensor a BE u32 name length, the UTF-8 name, a BE u32 rank, BE
/// u32 dims and the little-endian f32 payload; then a 48-byte SHA-384 of
/// everything before it.
pub mod model_file {
    use std::collections::HashSet;
    use std::fs;
    use std::path::{Path, PathBuf};

    use sha2::{Digest, Sha384};

    use crate::tensorstore::{element_count, ModelTensor};

    pub const MAGIC: [u8; 4] = *b"OFMF";
    pub const VERSION: u16 = 1;
    pub const CHECKSUM_LEN: usize = 48;

    #[derive(Debug, thiserror::Error)]
    pub enum ModelFileError {
        #[error("not a model file (magic {0:02x?})")]
        BadMagic(Vec<u8>),
        #[error("unsupported model file version {0}")]
        UnsupportedVersion(u16),
        #[error("model file checksum mismatch")]
        ChecksumMismatch,
        #[error("model file truncated")]
        Truncated,
        #[error("invalid model file: {0}")]
        Invalid(String),
        #[error("{path}: {source}")]
        Io {
            path: PathBuf,
            #[source]
            source: std::io::Error,
        },
    }

    pub fn encode(tensors: &[ModelTensor]) -> Result<Vec<u8>, ModelFileError> {
        let mut names = HashSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_be_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_be_bytes());
        for t in tensors {
            t.check().map_err(|e| ModelFileError::Invalid(e.to_string()))?;
            if !names.insert(t.name.as_str()) {
                return Err(ModelFileError::Invalid(format!("duplicate tensor `{}`", t.name)));
            }
            out.extend_from_slice(&(t.name.len() as u32).to_be_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_be_bytes());
            for d in &t.shape {
                out.extend_from_slice(&d.to_be_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha384::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    struct Cursor<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8], ModelFileError> {
            let end = self.pos.checked_add(n).ok_or(ModelFileError::Truncated)?;
            let s = self.bytes.get(self.pos..end).ok_or(ModelFileError::Truncated)?;
            self.pos = end;
            Ok(s)
        }

        fn u32(&mut self) -> Result<u32, ModelFileError> {
            Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Vec<ModelTensor>, ModelFileError> {
        if bytes.len() < 4 {
            return Err(ModelFileError::Truncated);
        }
        if bytes[..4] != MAGIC {
            return Err(ModelFileError::BadMagic(bytes[..4].to_vec()));
        }
        if bytes.len() < 10 + CHECKSUM_LEN {
            return Err(ModelFileError::Truncated);
        }
        let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha384::digest(body).as_slice() != checksum {
            return Err(ModelFileError::ChecksumMismatch);
        }
        let mut c = Cursor { bytes: body, pos: 4 };
        let version = u16::from_be_bytes(c.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(ModelFileError::UnsupportedVersion(version));
        }
        let count = c.u32()? as usize;
        // each tensor needs at least 8 header bytes
        if count > body.len() / 8 {
            return Err(ModelFileError::Truncated);
        }
        let mut names = HashSet::new();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = c.u32()? as usize;
            let name = std::str::from_utf8(c.take(name_len)?)
                .map_err(|_| ModelFileError::Invalid("tensor name is not UTF-8".into()))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(ModelFileError::Invalid(format!("duplicate tensor `{name}`")));
            }
            let ndim = c.u32()? as usize;
            if ndim > (body.len() - c.pos) / 4 {
                return Err(ModelFileError::Truncated);
            }
            let shape = (0..ndim).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?;
            let n = element_count(&shape);
            let payload = c.take(n.checked_mul(4).ok_or(ModelFileError::Truncated)?)?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let t = ModelTensor::new(name, shape, data);
            t.check().map_err(|e| ModelFileError::Invalid(e.to_string()))?;
            out.push(t);
        }
        if c.pos != body.len() {
            return Err(ModelFileError::Invalid(format!(
                "{} unexpected bytes before the checksum",
                body.len() - c.pos
            )));
        }
        Ok(out)
    }

    /// Writes via a temporary file in the same directory and a rename.
    pub fn save(path: &Path, tensors: &[ModelTensor]) -> Result<(), ModelFileError> {
        let bytes = encode(tensors)?;
        let io = |source| ModelFileError::Io {
            path: path.to_path_buf(),
            source,
        };
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        fs::create_dir_all(dir).map_err(io)?;
        let mut tmp = super::public_tempfile(dir).map_err(io)?;
        std::io::Write::write_all(&mut tmp, &bytes).map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vec<ModelTensor>, ModelFileError> {
        let bytes = fs::read(path).map_err(|source| ModelFileError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        decode(&bytes)
    }

    #[cfg(test)]
    mod tests {
        use super::*;
        use proptest::prelude::*;

        #[test]
        fn layout_matches_hand_encoding() {
            let t = ModelTensor::new("ab", vec![2], vec![1.0, -2.0]);
            let bytes = encode(&[t]).unwrap();
            let mut expected = b"OFMF".to_vec();
            expected.extend_from_slice(&[0, 1, 0, 0, 0, 1]);
            expected.extend_from_slice(&[0, 0, 0, 2, b'a', b'b']);
            expected.extend_from_slice(&[0, 0, 0, 1, 0, 0, 0, 2]);
            expected.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0]);
            assert_eq!(&bytes[..bytes.len() - CHECKSUM_LEN], &expected[..]);
            assert_eq!(&bytes[bytes.len() - CHECKSUM_LEN..], Sha384::digest(&expected).as_slice());
        }

        #[test]
        fn empty_list_is_valid() {
            let bytes = encode(&[]).unwrap();
            assert_eq!(bytes.len(), 10 + CHECKSUM_LEN);
            assert_eq!(&bytes[6..10], &[0, 0, 0, 0]);
            assert!(decode(&bytes).unwrap().is_empty());
        }

        #[test]
        fn corruption_is_detected() {
            let t = ModelTensor::new("w", vec![3], vec![1.0, 2.0, 3.0]);
            let bytes = encode(&[t]).unwrap();
            for i in 0..bytes.len() {
                let mut bad = bytes.clone();
                bad[i] ^= 0x01;
                let err = decode(&bad).unwrap_err();
                if i < 4 {
                    assert!(matches!(err, ModelFileError::BadMagic(_)));
                } else {
                    assert!(matches!(err, ModelFileError::ChecksumMismatch), "byte {i}: {err:?}");
                }
            }
            assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(ModelFileError::ChecksumMismatch)));
            assert!(matches!(decode(&bytes[..20]), Err(ModelFileError::Truncated)));
            assert!(matches!(decode(b"OFM"), Err(ModelFileError::Truncated)));
        }

        #[test]
        fn duplicate_names_are_rejected() {
            let t = ModelTensor::new("w", vec![1], vec![1.0]);
            assert!(matches!(encode(&[t.clone(), t]), Err(ModelFileError::Invalid(_))));
        }

        fn tensors() -> impl Strategy<Value = Vec<ModelTensor>> {
            proptest::collection::btree_map(
                "[a-z][a-z0-9_/]{0,10}",
                proptest::collection::vec(1u32..5, 0..4),
                0..6,
            )
            .prop_flat_map(|m| {
                m.into_iter()
                    .map(|(name, shape)| {
                        let n = element_count(&shape);
                        proptest::collection::vec(-1e30f32..1e30, n)
                            .prop_map(move |data| ModelTensor::new(name.clone(), shape.clone(), data))
                    })
                    .collect::<Vec<_>>()
            })
        }

        proptest! {
            #[test]
            fn round_trip_is_byte_exact(ts in tensors()) {
                let bytes = encode(&ts).unwrap();
                let back = decode(&bytes).unwrap();
                prop_assert_eq!(&back, &ts);
                prop_assert_eq!(encode(&back).unwrap(), bytes);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_then_open() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ws");
        let ws = create_workspace(&root, "mlp_blobs").unwrap();
        assert_eq!(ws.template_name(), "mlp_blobs");
        for p in ["plan/plan.yaml", "requirements.txt", "save", "cert", "data"] {
            assert!(root.join(p).exists(), "{p}");
        }
        assert!(matches!(create_workspace(&root, "mlp_blobs"), Err(WorkspaceError::Exists(_))));
        match create_workspace(&dir.path().join("x"), "resnet") {
            Err(WorkspaceError::UnknownTemplate { available, .. }) => {
                assert_eq!(available, vec!["mlp_blobs".to_string()])
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn initialize_sets_fqdn_and_writes_deterministic_init_model() {
        let dir = tempfile::tempdir().unwrap();
        let ws = create_workspace(&dir.path().join("ws"), "mlp_blobs").unwrap();
        let plan = ws
            .initialize_plan(Some("aggregator-hostname.internal-domain.com"))
            .unwrap();
        assert_eq!(plan.settings().fqdn, "aggregator-hostname.internal-domain.com");
        assert_eq!(ws.load_plan().unwrap(), plan);
        let path = ws.init_model_path().unwrap();
        let first = fs::read(&path).unwrap();
        let model = model_file::load(&path).unwrap();
        let shapes: Vec<Vec<u32>> = model.iter().map(|t| t.shape.clone()).collect();
        assert_eq!(shapes[0], vec![8, 64]);
        assert_eq!(shapes[5], vec![4]);
        ws.initialize_plan(Some("aggregator-hostname.internal-domain.com")).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        assert!(matches!(ws.initialize_plan(Some("bad host")), Err(WorkspaceError::InvalidHostname(_))));
    }

    #[test]
    fn export_excludes_secrets_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ws = create_workspace(&dir.path().join("ws"), "mlp_blobs").unwrap();
        ws.initialize_plan(Some("localhost")).unwrap();
        ws.certify().unwrap();
        ws.aggregator_cert_request("localhost", KeyAlgorithm::EcdsaP384).unwrap();
        ws.aggregator_certify("localhost").unwrap();
        let archive = ws.export().unwrap();
        assert_eq!(archive.parent().unwrap(), ws.root());

        let mut zip = zip::ZipArchive::new(fs::File::open(&archive).unwrap()).unwrap();
        let names: Vec<String> = zip.file_names().map(str::to_string).collect();
        assert!(names.iter().all(|n| !n.ends_with(".key") && !n.starts_with("cert/")));
        assert!(names.contains(&MANIFEST_FILE.to_string()));
        let manifest: Manifest =
            serde_json::from_reader(zip.by_name(MANIFEST_FILE).unwrap()).unwrap();
        assert_eq!(manifest.plan_hash, ws.load_plan().unwrap().hash().to_hex());
        assert_eq!(manifest.template_name, "mlp_blobs");
        assert!(chrono::DateTime::parse_from_rfc3339(&manifest.created_at).is_ok());

        let dest = dir.path().join("imported");
        let (imported, requirements) = import_workspace(&archive, &dest).unwrap();
        assert!(requirements.contains("fedstar"));
        assert_eq!(imported.load_plan().unwrap().hash(), ws.load_plan().unwrap().hash());
        for rel in ws.exportable_files().unwrap() {
            assert_eq!(fs::read(ws.root().join(&rel)).unwrap(), fs::read(dest.join(&rel)).unwrap());
        }
        // a second export ignores the first archive
        assert!(ws.exportable_files().unwrap().iter().all(|p| p.extension().is_none_or(|e| e != "zip")));
    }

    #[test]
    fn tampered_plan_in_archive_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ws = create_workspace(&dir.path().join("ws"), "mlp_blobs").unwrap();
        ws.initialize_plan(Some("localhost")).unwrap();
        let archive = ws.export().unwrap();

        // rewrite the archive with one plan byte changed
        let mut src = zip::ZipArchive::new(fs::File::open(&archive).unwrap()).unwrap();
        let tampered = dir.path().join("tampered.zip");
        let mut out = zip::ZipWriter::new(fs::File::create(&tampered).unwrap());
        for i in 0..src.len() {
            let mut e = src.by_index(i).unwrap();
            let mut bytes = Vec::new();
            e.read_to_end(&mut bytes).unwrap();
            if e.name() == PLAN_FILE {
                let text = String::from_utf8(bytes).unwrap().replace("rounds_to_train: 5", "rounds_to_train: 6");
                bytes = text.into_bytes();
            }
            out.start_file(e.name(), zip::write::SimpleFileOptions::default()).unwrap();
            out.write_all(&bytes).unwrap();
        }
        out.finish().unwrap();
        assert!(matches!(
            import_workspace(&tampered, &dir.path().join("dest")),
            Err(WorkspaceError::HashMismatch { .. })
        ));
        assert!(!dir.path().join("dest").exists());
    }

    #[test]
    fn traversal_entries_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let evil = dir.path().join("evil.zip");
        let mut out = zip::ZipWriter::new(fs::File::create(&evil).unwrap());
        out.start_file("../escape.txt", zip::write::SimpleFileOptions::default()).unwrap();
        out.write_all(b"x").unwrap();
        out.finish().unwrap();
        assert!(matches!(
            import_workspace(&evil, &dir.path().join("dest")),
            Err(WorkspaceError::BadArchive(_))
        ));
        assert!(!dir.path().join("escape.txt").exists());
    }

    #[test]
    fn certificate_exchange_between_workspaces() {
        let dir = tempfile::tempdir().unwrap();
        let agg = create_workspace(&dir.path().join("agg"), "mlp_blobs").unwrap();
        agg.initialize_plan(Some("localhost")).unwrap();
        agg.certify().unwrap();
        let (col, _) = import_workspace(&agg.export().unwrap(), &dir.path().join("col")).unwrap();
        let request = col
            .collaborator_cert_request("one", ShardSpec { shard_index: 1, shard_count: 2 }, KeyAlgorithm::EcdsaP384)
            .unwrap();
        assert_eq!(request, col.root().join("col_one_to_agg_cert_request.zip"));
        assert_eq!(col.shard().unwrap(), ShardSpec { shard_index: 1, shard_count: 2 });
        let signed = agg.certify_request_package(&request).unwrap();
        assert_eq!(signed, agg.root().join("agg_to_col_one_signed_cert.zip"));
        assert_eq!(col.import_signed_package(&signed).unwrap(), "one");
        let bundle = col.pki().client_bundle("one").unwrap();
        assert_eq!(bundle.check(CertKind::Client).unwrap(), "one");
    }

    #[test]
    fn model_paths_must_stay_under_save() {
        let dir = tempfile::tempdir().unwrap();
        let ws = create_workspace(&dir.path().join("ws"), "mlp_blobs").unwrap();
        let mut plan = ws.load_plan().unwrap();
        plan.aggregator.settings.final_model_path = "../outside.ofmf".into();
        fs::write(ws.plan_path(), plan::serialize_plan(&plan)).unwrap();
        assert!(matches!(Workspace::open(ws.root()), Err(WorkspaceError::NotAWorkspace { .. })));
    }
}
