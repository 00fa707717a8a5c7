//! Regenerates `conformance/golden_vectors.json` at the workspace root.

use std::path::Path;

fn main() -> polserve::Result<()> {
    let file = polserve::golden::build_vectors()?;
    for v in &file.vectors {
        v.check()?;
    }
    let out = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../conformance/golden_vectors.json");
    std::fs::write(&out, file.to_json())?;
    println!("wrote {} vectors to {}", file.vectors.len(), out.display());
    Ok(())
}
