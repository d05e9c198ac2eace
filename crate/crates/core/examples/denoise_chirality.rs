//! Flips the sides of annotated contacts at random, as a vision-language
//! annotator might, then restores them from the 2D keypoints.
//!
//! ```text
//! cargo run --release --example denoise_chirality
//! ```

use pairfit::body::default_asset;
use pairfit::denoise::{denoise_chirality, KeypointEvidence};
use pairfit::keypoints::pair_scale;
use pairfit::synth::{contact_entries, corrupt, generate_scene, CorruptionConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let asset = default_asset();
    let scene = generate_scene("random-contact", asset, 11)?;
    let truth = contact_entries(&scene.contact, asset);
    let cfg = CorruptionConfig { p_flip: 0.5, ..CorruptionConfig::clean() };
    let obs = corrupt(&scene, &cfg, asset, 4)?;
    let ev = KeypointEvidence {
        kps_a: &obs.keypoints[0],
        kps_b: &obs.keypoints[1],
        part_keypoints: &asset.part_keypoints,
        scale: pair_scale(&obs.keypoints[0], &obs.keypoints[1], 0.3).ok_or("no keypoints")?,
        conf_min: 0.3,
    };
    println!("{:<34} {:<34} {:<34} weight", "truth", "annotated", "denoised");
    for (t, seen) in truth.iter().zip(&obs.annotation.contacts) {
        let out = denoise_chirality(seen, &ev);
        let show = |a: &dyn std::fmt::Display, b: &dyn std::fmt::Display| format!("{a} / {b}");
        println!(
            "{:<34} {:<34} {:<34} {:.3}{}",
            show(&t.part_left, &t.part_right),
            show(&seen.part_left, &seen.part_right),
            show(&out.part_left, &out.part_right),
            out.proximity_weight,
            if out.swapped { "  (swapped)" } else { "" }
        );
    }
    Ok(())
}
