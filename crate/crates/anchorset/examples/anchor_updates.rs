//! Shows the three ways anchors come into being and stay fresh: one-shot
//! aggregation (average and confidence-weighted), the streaming EMA update,
//! and the schedule decision table that tells the trainer when to refresh.

use anchorset::anchors::{
    aggregate_average, aggregate_weighted, ema_update, schedule_should_update, SchedulePhase,
    UpdateSchedule,
};
use anchorset::data::{generate_synthetic, SyntheticSpec};
use anchorset::encoder::EncoderModel;
use anchorset::matrix::Matrix;

fn main() -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        num_classes: 5,
        input_dim: 8,
        per_class: 20,
        cluster_spread: 0.7,
        center_spread: 2.0,
        noise_dims: 2,
        seed: 3,
    };
    let data = generate_synthetic(&spec)?;
    let model = EncoderModel::init(spec.input_dim, &[16], 6, spec.num_classes, true, 3)?;
    let (emb, probs) = model.embed_dataset_with_probs(&data, 64)?;

    // Average: per-class mean of the embedded features.
    let avg = aggregate_average(&emb, 0)?;
    // Weighted: each sample contributes by its own-class softmax confidence.
    let weighted = aggregate_weighted(&emb, &probs, 0)?;
    println!(
        "aggregated {} anchors of dim {} (method {:?}, counts {:?})",
        avg.num_classes(),
        avg.feat_dim(),
        avg.provenance.method,
        avg.class_counts
    );
    for j in 0..avg.num_classes() {
        let d: f64 = avg
            .anchors
            .row(j)
            .iter()
            .zip(weighted.anchors.row(j))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        println!("class {j}: |average - weighted| = {d:.4}");
    }

    // Streaming refresh: feed batches through the EMA rule. The step size for
    // class j is 1/N_j with N_j its training-set population, and the batch
    // term is a sum, not a mean, so bigger batches move anchors further.
    let mut streamed = avg.clone();
    let batch = 16;
    for start in (0..emb.len()).step_by(batch) {
        let end = (start + batch).min(emb.len());
        let mut feats = Matrix::zeros(end - start, streamed.feat_dim());
        for (row, i) in (start..end).enumerate() {
            feats.row_mut(row).copy_from_slice(emb.features.row(i));
        }
        ema_update(&mut streamed, &feats, &emb.labels[start..end])?;
    }
    let drift: f64 = streamed
        .anchors
        .data()
        .iter()
        .zip(avg.anchors.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    println!(
        "after {} EMA steps: total drift from the one-shot average {drift:.4}",
        streamed.provenance.ema_steps
    );

    // When does each schedule actually refresh? e_start = 4 here.
    println!("\nschedule decision table (e_start = 4):");
    println!("{:<14} {:>12} {:>10} {:>13}", "schedule", "stage2 start", "epoch end", "iteration end");
    for schedule in [
        UpdateSchedule::Fixed,
        UpdateSchedule::PerEpoch,
        UpdateSchedule::PerIteration,
    ] {
        let row: Vec<bool> = [
            SchedulePhase::Stage2Start,
            SchedulePhase::EpochEnd,
            SchedulePhase::IterationEnd,
        ]
        .iter()
        .map(|&phase| schedule_should_update(schedule, phase, 5, 4))
        .collect();
        println!(
            "{:<14} {:>12} {:>10} {:>13}",
            schedule.as_str(),
            row[0],
            row[1],
            row[2]
        );
    }
    Ok(())
}
