//! Write the planted-chain corpus and its verb index to a directory.
//!
//! ```text
//! cargo run -p goalweaver --example planted -- out/
//! ```

use std::path::PathBuf;

use goalweaver::synth::{planted_corpus, PlantedConfig, SAMPLE_VERBNET_TSV};

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "planted".into()));
    std::fs::create_dir_all(&dir)?;
    let corpus = planted_corpus(&PlantedConfig::default());
    std::fs::write(dir.join("corpus.txt"), corpus.to_blocks())?;
    std::fs::write(dir.join("verbnet.tsv"), SAMPLE_VERBNET_TSV)?;
    println!("{} stories written to {}", corpus.len(), dir.display());
    Ok(())
}
