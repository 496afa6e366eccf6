//! The operator runbook, driven through the real binary: one aggregator
//! workspace, two imported collaborator workspaces, three processes.

use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use fedstar::collaborator::TaskRunner;
use fedstar::reference_task::ReferenceRunner;
use fedstar::workspace::{model_file, Workspace};

pub const BIN: &str = env!("CARGO_BIN_EXE_fedstar");
pub const LABELS: [&str; 2] = ["one", "two"];

pub fn fedstar(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("FEDSTAR_WORKSPACE")
        .output()
        .expect("binary runs")
}

fn step(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = fedstar(dir, args);
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "`fedstar {}` in {} exited {:?}:\n{}{}",
            args.join(" "),
            dir.display(),
            out.status.code(),
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn spawn(dir: &Path, args: &[&str]) -> Child {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("FEDSTAR_WORKSPACE")
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("binary runs")
}

#[derive(Debug)]
pub struct Outcome {
    pub aggregator_dir: PathBuf,
    pub final_model: PathBuf,
    pub accuracy: f64,
    pub elapsed: Duration,
    pub aggregator_log: String,
}

/// Runs the runbook under `root` with the aggregator on `port`.
pub fn run(root: &Path, port: u16) -> Result<Outcome, String> {
    let started = Instant::now();
    let agg = root.join("agg");

    // create the aggregator workspace
    step(root, &["workspace", "create", "--prefix", "agg", "--template", "mlp_blobs"])?;
    // nothing to install: the requirements file is informational.
    // The port is moved off the default so parallel runs do not collide.
    let plan_path = agg.join("plan/plan.yaml");
    let text = std::fs::read_to_string(&plan_path).map_err(|e| e.to_string())?;
    std::fs::write(&plan_path, text.replace("port: 50051", &format!("port: {port}"))).map_err(|e| e.to_string())?;
    // initialize the plan
    step(&agg, &["plan", "initialize", "-a", "localhost"])?;
    // become the certificate authority
    step(&agg, &["workspace", "certify"])?;
    // aggregator certificate
    step(&agg, &["aggregator", "generate-cert-request", "--fqdn", "localhost"])?;
    step(&agg, &["aggregator", "certify", "--fqdn", "localhost"])?;
    // export
    step(&agg, &["workspace", "export"])?;
    let archive = agg.join("agg.zip");

    let mut collaborator_dirs = Vec::new();
    for label in LABELS {
        let host = root.join(label);
        std::fs::create_dir_all(&host).map_err(|e| e.to_string())?;
        // copy and import the archive
        step(&host, &["workspace", "import", "--archive", archive.to_str().unwrap()])?;
        let ws = host.join("agg");
        // certificate request
        step(&ws, &["collaborator", "generate-cert-request", "-n", label])?;
        let request = ws.join(format!("col_{label}_to_agg_cert_request.zip"));
        // the CA signs it
        step(&agg, &["collaborator", "certify", "--request-pkg", request.to_str().unwrap()])?;
        let signed = agg.join(format!("agg_to_col_{label}_signed_cert.zip"));
        // import the signed certificate
        step(&ws, &["collaborator", "certify", "--import", signed.to_str().unwrap()])?;
        collaborator_dirs.push((label, ws));
    }

    // start the aggregator; start each collaborator
    let aggregator = spawn(&agg, &["aggregator", "start", "--linger", "5"]);
    let collaborators: Vec<_> = collaborator_dirs
        .iter()
        .map(|(label, ws)| (label, spawn(ws, &["collaborator", "start", "-n", label])))
        .collect();

    let mut failures = Vec::new();
    for (label, child) in collaborators {
        let out = match child.wait_with_output() {
            Ok(out) => out,
            Err(e) => {
                failures.push(format!("collaborator {label}: {e}"));
                continue;
            }
        };
        if !out.status.success() {
            failures.push(format!(
                "collaborator {label} exited {:?}: {}",
                out.status.code(),
                String::from_utf8_lossy(&out.stderr)
            ));
        }
    }
    let out = aggregator.wait_with_output().map_err(|e| e.to_string())?;
    let aggregator_log = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    if !out.status.success() {
        failures.push(format!("aggregator exited {:?}: {aggregator_log}", out.status.code()));
    }
    if !failures.is_empty() {
        return Err(failures.join("\n"));
    }

    let ws = Workspace::open(&agg).map_err(|e| e.to_string())?;
    let final_model = ws.final_model_path().map_err(|e| e.to_string())?;
    let model = model_file::load(&final_model).map_err(|e| e.to_string())?;
    let plan = ws.load_plan().map_err(|e| e.to_string())?;
    let mut runner = ReferenceRunner::from_plan(&plan, 1, 1).map_err(|e| e.to_string())?;
    let hyper = plan.tasks["validate"].hyperparams.clone();
    let eval = runner.validate(&model, &hyper, plan.rounds_to_train()).map_err(|e| e.to_string())?;
    Ok(Outcome {
        aggregator_dir: agg,
        final_model,
        accuracy: eval.metrics["accuracy"],
        elapsed: started.elapsed(),
        aggregator_log,
    })
}
