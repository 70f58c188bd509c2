//! Writes the backbone oracle inputs consumed by `scripts/backbone_oracle.py`.
//!
//! `cargo run --release -p tajweed-core --example backbone_oracle_inputs -- OUT_DIR`

#[path = "../tests/common/backbone_oracle.rs"]
mod backbone_oracle;

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| ".".into());
    std::fs::create_dir_all(&dir).expect("create output dir");
    let path = backbone_oracle::write_inputs(std::path::Path::new(&dir));
    println!("{}", path.display());
}
