//! Regenerates the golden checkpoint triple used by the thm1 verify suite.
//!
//! Usage: cargo run -p hot-core --example gen_golden [dir]
//! The default target is the crate's data/ directory.

use std::path::PathBuf;

fn main() {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(hot_core::verify::default_golden_dir);
    hot_core::verify::write_thm1_golden(&dir).expect("golden files written");
    println!("wrote golden checkpoint to {}", dir.display());
}
