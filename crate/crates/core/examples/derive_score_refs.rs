//! Regenerates the committed score references in `crates/core/data/`.
//!
//! ```text
//! cargo run -p o2o-core --example derive_score_refs
//! ```

use std::path::Path;

use o2o_core::envs::{derive_score_reference, EnvId, SCORE_REFERENCE_EPISODES, SCORE_REFERENCE_SEED};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    for id in EnvId::ALL {
        let reference = derive_score_reference(&id.spec(), SCORE_REFERENCE_EPISODES, SCORE_REFERENCE_SEED);
        let path = dir.join(format!("{id}.score.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&reference)? + "\n")?;
        println!("{}: random {:.4} expert {:.4}", id, reference.random_return, reference.expert_return);
    }
    Ok(())
}
