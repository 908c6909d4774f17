//! Exports trained anchors to the text format and reads them back. The header
//! carries full provenance: aggregation method, the epoch of the last full
//! aggregation, how many streaming EMA steps followed, and the refresh
//! schedule when the anchors came out of a training run.

use anchorset::anchors::{aggregate_weighted, read_anchors, write_anchors};
use anchorset::data::{generate_synthetic, SyntheticSpec};
use anchorset::eval::EMBED_BATCH;
use anchorset::trainer::{train, TrainConfig};
use std::fs;

fn main() -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        num_classes: 8,
        input_dim: 12,
        per_class: 16,
        cluster_spread: 0.8,
        center_spread: 2.2,
        noise_dims: 3,
        seed: 9,
    };
    let data = generate_synthetic(&spec)?;
    let cfg = TrainConfig {
        e_start: 6,
        e_end: 10,
        seed: 9,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &data, None)?;

    let dir = tempfile::tempdir()?;

    // Anchors as the trainer left them (per-epoch schedule stamped).
    let trained = out.anchors.expect("stage II used anchors");
    let trained_path = dir.path().join("anchors_trained.txt");
    write_anchors(&trained, &trained_path)?;

    // One-shot export from the final model with the other aggregation method;
    // no schedule involved, so the header omits it.
    let (emb, probs) = out.model.embed_dataset_with_probs(&data, EMBED_BATCH)?;
    let oneshot = aggregate_weighted(&emb, &probs, cfg.e_end)?;
    let oneshot_path = dir.path().join("anchors_weighted.txt");
    write_anchors(&oneshot, &oneshot_path)?;

    for path in [&trained_path, &oneshot_path] {
        let text = fs::read_to_string(path)?;
        println!("{}:", path.file_name().unwrap().to_string_lossy());
        println!("  {}", text.lines().next().unwrap());
        let back = read_anchors(path)?;
        assert_eq!(back.anchors.rows(), spec.num_classes);
        println!(
            "  read back {} anchors, method {:?}, schedule {:?}, ema steps {}",
            back.num_classes(),
            back.provenance.method,
            back.provenance.schedule,
            back.provenance.ema_steps
        );
    }
    Ok(())
}
