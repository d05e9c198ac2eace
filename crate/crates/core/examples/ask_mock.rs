//! Runs the annotation step offline: crops a pair from an image, builds the
//! prompt, answers it from a directory of canned responses and parses the
//! reply. A second query is served from the cache.
//!
//! ```text
//! cargo run --example ask_mock
//! ```

use std::sync::Arc;

use image::{Rgb, RgbImage};
use pairfit::ask::{build_prompt, crop_image, parse_annotation, AskClient, MockProvider, RetryPolicy};
use pairfit::keypoints::BBox;

const REPLY: &str = r#"Here is the annotation:
```json
{"interaction": "handshake",
 "people": {"person_left": "man in a grey suit", "person_right": "woman in a blue dress"},
 "orientation": "front to front",
 "contacts": [
   {"body_part_person_left": {"part_name": "hand", "body_side": "right"},
    "body_part_person_right": {"part_name": "hand", "body_side": "right"},
    "confidence": 0.9}]}
```"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut img = RgbImage::new(320, 240);
    for (x, y, px) in img.enumerate_pixels_mut() {
        *px = Rgb([(x % 256) as u8, (y % 256) as u8, 128]);
    }
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, image::ImageFormat::Png)?;

    let bbox = BBox { x: 60.0, y: 40.0, w: 200.0, h: 160.0 };
    let crop = crop_image(bytes.get_ref(), &bbox, 0.1)?;
    let mock = MockProvider::new(dir.path().join("responses"));
    std::fs::create_dir_all(dir.path().join("responses"))?;
    std::fs::write(mock.response_path(&crop), REPLY)?;

    let client = AskClient::new(Arc::new(mock), Some(dir.path().join("cache")), RetryPolicy::default(), 2);
    let prompt = build_prompt(Some("handshake"));
    println!("prompt: {} characters, starts {:?}", prompt.len(), prompt.lines().next().unwrap_or(""));
    let raw = client.query(&crop, &prompt)?;
    let ann = parse_annotation(&raw)?;
    println!("{} ({}), {} contact(s)", ann.interaction, ann.orientation, ann.contacts.len());
    for c in &ann.contacts {
        println!("  {} / {}  confidence {}", c.part_left, c.part_right, c.confidence);
    }
    client.query(&crop, &prompt)?;
    println!("provider calls after two queries: {}", client.provider_calls());
    Ok(())
}
