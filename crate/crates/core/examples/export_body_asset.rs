//! Writes the built-in body model to JSON, as a starting point for custom assets.
//!
//! ```text
//! cargo run --example export_body_asset -- my_body.json
//! ```

use pairfit::body::build_default_asset;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "body.json".to_string());
    let asset = build_default_asset();
    std::fs::write(&path, asset.to_json())?;
    println!(
        "wrote {path}: {} joints, {} capsules, {} surface samples, {} regions, {} keypoints",
        asset.joint_count(),
        asset.capsules.len(),
        asset.surface_samples.len(),
        asset.region_count,
        asset.keypoints.len()
    );
    Ok(())
}
