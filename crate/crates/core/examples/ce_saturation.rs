//! Cross-entropy saturates as the true logit grows while the decision margin
//! keeps growing linearly. Logits are (k, 1, ..., 1) over ten classes.
//!
//!     cargo run --example ce_saturation

use decision_surface::decision::{cross_entropy, margin};
use decision_surface::Result;

fn main() -> Result<()> {
    println!("{:>3} {:>10} {:>8}", "k", "CE", "margin");
    for k in 0..10 {
        let mut logits = vec![1.0; 10];
        logits[0] = k as f64;
        println!("{k:>3} {:>10.4} {:>8.1}", cross_entropy(&logits, 0)?, margin(&logits, 0)?);
    }
    Ok(())
}
