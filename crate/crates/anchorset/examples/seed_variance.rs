//! Re-trains the anchor pipeline and the parametric-center baseline across
//! seeds and compares how much final retrieval quality scatters. Anchors are
//! recomputed statistics of the dataset, so reseeding only moves the encoder
//! init and batch order; parametric centers add their own randomly
//! initialized, jointly optimized parameters and spread much wider.

use anchorset::data::{benchmark_splits, SyntheticSpec};
use anchorset::eval::{seed_variance_experiment, PipelineVariant};
use anchorset::trainer::TrainConfig;

fn main() -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        num_classes: 20,
        input_dim: 16,
        per_class: 24,
        cluster_spread: 1.0,
        center_spread: 2.4,
        noise_dims: 5,
        seed: 0,
    };
    let (train_set, query, gallery) = benchmark_splits(&spec, 8, 2)?;
    // The squared-distance center loss is much more step-size sensitive than
    // the anchor loss; 0.005 keeps both pipelines stable so the comparison is
    // about variance, not divergence. Both variants get the same config and
    // differ only in their loss sets.
    let base = TrainConfig {
        base_lr: 0.005,
        e_start: 12,
        e_end: 20,
        eval_every: 100,
        ..TrainConfig::default()
    };
    let report = seed_variance_experiment(
        &base,
        6,
        &[PipelineVariant::Anchor, PipelineVariant::ParametricCenter],
        &train_set,
        &query,
        &gallery,
        2,
    )?;

    print!("{}", report.to_csv());
    println!();
    for s in &report.summaries {
        println!(
            "{:<18} mAP mean {:.4}, std {:.4}, range [{:.4}, {:.4}]",
            s.variant.as_str(),
            s.mean_map,
            s.std_map,
            s.min_map,
            s.max_map
        );
    }
    let anchor = report.summary_for(PipelineVariant::Anchor).unwrap();
    let center = report.summary_for(PipelineVariant::ParametricCenter).unwrap();
    println!(
        "\nanchor std / center std = {:.3}",
        anchor.std_map / center.std_map
    );
    Ok(())
}
