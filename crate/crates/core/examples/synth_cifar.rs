//! Writes CIFAR-10-format binary batches of synthetic stripe images.
//!
//! Usage: `synth_cifar DIR [SEED]`

use std::path::PathBuf;

fn main() -> odenorm::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data/synthetic-cifar".into()));
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    odenorm::data::write_synthetic_cifar10(&dir, seed)?;
    println!("wrote {}", dir.display());
    Ok(())
}
