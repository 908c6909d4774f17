//! Sweeps the Stage-II start epoch crossed with the aggregation method on a
//! small benchmark. Starting the anchor stage at epoch 0 builds anchors from
//! a raw random embedding and drags retrieval down; starting after Stage I
//! has converged is where the compaction pays off.

use anchorset::anchors::AggregationMethod;
use anchorset::data::{benchmark_splits, SyntheticSpec};
use anchorset::trainer::{train, TrainConfig};

fn main() -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        num_classes: 20,
        input_dim: 16,
        per_class: 24,
        cluster_spread: 1.0,
        center_spread: 2.4,
        noise_dims: 5,
        seed: 2,
    };
    let (train_set, query, gallery) = benchmark_splits(&spec, 8, 2)?;

    println!(
        "{:>7} {:>10} {:>8} {:>8} {:>12}",
        "e_start", "aggregation", "rank@1", "mAP", "final intra"
    );
    for e_start in [0usize, 8, 16] {
        for aggregation in [AggregationMethod::Average, AggregationMethod::Weighted] {
            let cfg = TrainConfig {
                e_start,
                e_end: 24,
                aggregation,
                eval_every: 100, // only the final eval matters here
                seed: 2,
                ..TrainConfig::default()
            };
            let out = train(&cfg, &train_set, Some((&query, &gallery)))?;
            let (_, eval) = out.log.final_eval().expect("final epoch evaluates");
            let intra = out
                .log
                .records
                .last()
                .and_then(|r| r.losses.get("train_intra").copied())
                .unwrap();
            println!(
                "{:>7} {:>10} {:>8.4} {:>8.4} {:>12.4}",
                e_start,
                aggregation.as_str(),
                eval.rank1,
                eval.map,
                intra
            );
        }
    }
    Ok(())
}
