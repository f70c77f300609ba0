//! Regenerates the committed lookup tables under `data/`.

use std::path::Path;

use matura_core::tables::{Tables, TABLE_SEED};

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    Tables::generate(TABLE_SEED).write_dir(&dir).expect("write tables");
    println!("wrote {}", dir.display());
}
