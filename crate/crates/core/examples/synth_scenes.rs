//! Generates synthetic contacting pairs and shows which regions touch.
//!
//! ```text
//! cargo run --release --example synth_scenes -- 10 scenes.jsonl
//! ```

use pairfit::body::default_asset;
use pairfit::pipeline::write_jsonl;
use pairfit::synth::{contact_entries, generate_scenes, TEMPLATES};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let count: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(10);
    let out = std::env::args().nth(2);
    let asset = default_asset();
    let scenes = generate_scenes(&TEMPLATES, count, asset, 0)?;
    for s in &scenes {
        let entries = contact_entries(&s.contact, asset);
        let parts: Vec<String> = entries.iter().take(3).map(|e| format!("{} / {}", e.part_left, e.part_right)).collect();
        println!(
            "{:<15} seed {:>3}  {:>3} region pairs  {:>2} part pairs  e.g. {}",
            s.template,
            s.seed,
            s.contact.count(),
            entries.len(),
            parts.join(", ")
        );
    }
    if let Some(path) = out {
        write_jsonl(&scenes, &path)?;
        println!("wrote {path}");
    }
    Ok(())
}
