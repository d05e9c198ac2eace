//! Compares every analytic gradient with central finite differences.
//!
//! ```text
//! cargo run --release --example gradcheck -- 5
//! ```

use pairfit::gradcheck::{check_all, FD_STEP, TOLERANCE};

fn main() {
    let configs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    println!("step {FD_STEP:e}, tolerance {TOLERANCE:e}, {configs} random configurations each");
    for r in check_all(configs, 0) {
        println!("{:<20} worst relative error {:.2e}  {}", r.target.name(), r.max_relative_error, if r.passed { "ok" } else { "FAIL" });
    }
}
