//! Fuse two encoders' patch tokens, fold them five at a time and project
//! them to the language-model width, then check the analytic derivative.
//!
//! cargo run --release --example fusion_forward -- [lm_width]

use groundcxr::fusion::{
    check_gradient, fused_forward, group_tokens, EmbeddingMatrix, GroupMode, ProjectionWeights, Provenance,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let width: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(512);
    // 224px inputs: 16px patches give 14x14 tokens, 32px patches 7x7
    let z1 = EmbeddingMatrix::seeded(14 * 14, Provenance::Encoder1, 1);
    let z2 = EmbeddingMatrix::seeded(7 * 7, Provenance::Encoder2, 2);
    let weights = ProjectionWeights::seeded(width, width, 3);

    let (v, trace) = fused_forward(&z1, &z2, &weights, GroupMode::Strict)?;
    println!("{}", serde_json::to_string_pretty(&trace)?);
    println!("output mean {:.3e}", v.mean().unwrap_or(0.0));

    let odd = EmbeddingMatrix::seeded(7, Provenance::Fused, 4);
    println!("7 tokens, strict: {}", group_tokens(&odd, GroupMode::Strict).unwrap_err());
    println!("7 tokens, padded: {} grouped rows", group_tokens(&odd, GroupMode::PadZeros)?.rows());

    let small = ProjectionWeights::seeded(8, 4, 5);
    let q = group_tokens(&EmbeddingMatrix::seeded(20, Provenance::Fused, 6), GroupMode::Strict)?;
    let check = check_gradient(&small, &q, 1e-5)?;
    println!("gradient check: max relative error {:.2e} over {} directions", check.max_relative_error, check.directions);
    Ok(())
}
