//! A federation CA signs an aggregator and a collaborator certificate, then
//! verifies both and extracts the identities the server will see.

use fedstar::pki::{self, CertKind, KeyAlgorithm};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let ca = pki::create_ca(dir.path())?;
    println!("CA at {}", ca.layout().ca_dir().display());

    let (server_csr, _server_key) = pki::generate_csr("agg.example.org", CertKind::Server, KeyAlgorithm::EcdsaP384)?;
    let server_pem = ca.sign_csr(&server_csr, CertKind::Server)?;
    println!("server cert signature: {}", pki::signature_algorithm_oid(&server_pem)?);

    let (client_csr, client_key) = pki::generate_csr("col.one", CertKind::Client, KeyAlgorithm::EcdsaP384)?;
    let bundle = pki::CertBundle {
        ca_chain: vec![ca.chain_pem()],
        entity_cert: ca.sign_csr(&client_csr, CertKind::Client)?,
        private_key: client_key,
    };
    let identity = pki::verify_peer(&bundle, &bundle.entity_der()?, CertKind::Client)?;
    println!("client identity: {identity}");

    // A client certificate is not good for serving.
    match pki::verify_peer(&bundle, &bundle.entity_der()?, CertKind::Server) {
        Err(e) => println!("as a server certificate: rejected ({e})"),
        Ok(_) => anyhow::bail!("client certificate accepted for server use"),
    }

    for record in ca.issued()? {
        println!("issued: {record:?}");
    }
    Ok(())
}
