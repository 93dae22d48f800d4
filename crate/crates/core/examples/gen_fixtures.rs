//! Regenerate the repository's golden-fixture directory (frozen inputs,
//! expected values, manifest). Usage:
//!
//! ```text
//! cargo run --release --example gen_fixtures [FIXTURES_DIR]
//! ```
//!
//! Defaults to `<repo root>/fixtures`. Oracle scripts under
//! `fixtures/oracles/` are tracked source files and are left untouched.

use std::path::PathBuf;

use selfdana_core::fixtures::generate_fixtures;

fn main() {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            PathBuf::from(env!("CARGO_MANIFEST_DIR"))
                .join("../..")
                .join("fixtures")
        });
    match generate_fixtures(&dir) {
        Ok(manifest) => {
            println!(
                "wrote {} fixtures to {}",
                manifest.fixtures.len(),
                dir.display()
            );
        }
        Err(e) => {
            eprintln!("fixture generation failed: {e}");
            std::process::exit(2);
        }
    }
}
