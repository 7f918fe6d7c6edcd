//! Regenerates `data/synthetic.jsonl`.
//!
//! ```text
//! cargo run -p fedcollm --example write_synthetic
//! ```

use fedcollm::data::synthetic::{generate_jsonl, BUNDLED_DOCS, BUNDLED_SEED};

fn main() -> std::io::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/synthetic.jsonl");
    std::fs::write(path, generate_jsonl(BUNDLED_DOCS, BUNDLED_SEED))?;
    println!("wrote {path}");
    Ok(())
}
