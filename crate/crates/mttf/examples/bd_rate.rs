//! BD-rate between two rate-distortion curves, with both interpolation
//! variants.
//!
//! ```bash
//! cargo run --example bd_rate
//! ```

use mttf::eval::{bd_rate, BdMethod, RDPoint};

fn main() -> mttf::Result<()> {
    // A conventional-codec-shaped anchor and a generative-codec-shaped test
    // curve on the 1-DISTS axis.
    let anchor = vec![
        RDPoint { rate_kbps: 20.0, quality: 0.60 },
        RDPoint { rate_kbps: 35.0, quality: 0.68 },
        RDPoint { rate_kbps: 60.0, quality: 0.76 },
        RDPoint { rate_kbps: 110.0, quality: 0.84 },
    ];
    let test = vec![
        RDPoint { rate_kbps: 5.0, quality: 0.62 },
        RDPoint { rate_kbps: 9.0, quality: 0.70 },
        RDPoint { rate_kbps: 16.0, quality: 0.78 },
        RDPoint { rate_kbps: 30.0, quality: 0.86 },
    ];

    println!("anchor: {anchor:?}");
    println!("test:   {test:?}");
    let pchip = bd_rate(&anchor, &test, BdMethod::Pchip)?;
    let cubic = bd_rate(&anchor, &test, BdMethod::CubicFit)?;
    println!("BD-rate (pchip interpolation): {pchip:+.2}%");
    println!("BD-rate (cubic polynomial fit): {cubic:+.2}%");

    // Sanity identities.
    println!(
        "identity check: {:+.6}% (same curve twice)",
        bd_rate(&anchor, &anchor, BdMethod::Pchip)?
    );
    let doubled: Vec<RDPoint> = anchor
        .iter()
        .map(|p| RDPoint { rate_kbps: 2.0 * p.rate_kbps, quality: p.quality })
        .collect();
    println!(
        "scaling check:  {:+.6}% (rates doubled at equal quality)",
        bd_rate(&anchor, &doubled, BdMethod::Pchip)?
    );
    Ok(())
}
