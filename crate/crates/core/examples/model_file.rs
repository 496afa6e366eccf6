//! Saving and loading models in the checksummed binary format.

use fedstar::reference_task::init_model;
use fedstar::workspace::model_file;

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.ofmf");
    let model = init_model(8, 4, 0);
    model_file::save(&path, &model)?;
    let bytes = std::fs::read(&path)?;
    println!("{} tensors, {} bytes", model.len(), bytes.len());
    for t in &model {
        println!("  {:<3} {:?}", t.name, t.shape);
    }
    assert_eq!(model_file::load(&path)?, model);

    let mut damaged = bytes.clone();
    damaged[bytes.len() / 2] ^= 0x40;
    std::fs::write(&path, &damaged)?;
    println!("after flipping one bit: {}", model_file::load(&path).unwrap_err());
    Ok(())
}
