//! Validates every hand-written gradient against central finite differences.
//!
//! The encoder's backward pass is derived by hand, so each loss is composed
//! with the full network (affine layers, ReLU, normalization neck,
//! classifier) and every single parameter is perturbed both ways. The same
//! check runs as a unit test; this example prints the worst relative error
//! per loss so the margins are visible.

use anchorset::encoder::{EncoderModel, ForwardMode};
use anchorset::losses::{
    anchor_loss, batch_hard_triplet, cross_entropy_ls, parametric_center_loss,
    triplet_anchor_loss, CenterBank, DistanceMetric, LossOutput,
};
use anchorset::matrix::Matrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (batch, input_dim, feat_dim, classes) = (6, 5, 4, 3);
    let model = EncoderModel::init(input_dim, &[8], feat_dim, classes, true, 7)?;

    let mut x = Matrix::zeros(batch, input_dim);
    for v in x.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    let mut anchors = Matrix::zeros(classes, feat_dim);
    for v in anchors.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let bank = CenterBank::init_random(classes, feat_dim, 1.0, 5);

    // Loss value as a pure function of the model, for finite differences.
    type LossFn<'a> = Box<dyn Fn(&EncoderModel) -> f64 + 'a>;
    let losses: Vec<(&str, bool, LossFn)> = vec![
        (
            "classification",
            true,
            Box::new(|m: &EncoderModel| {
                let c = m.forward(&x, ForwardMode::Training).unwrap();
                cross_entropy_ls(&c.logits, &labels, 0.1).unwrap().value
            }),
        ),
        (
            "triplet",
            false,
            Box::new(|m: &EncoderModel| {
                let c = m.forward(&x, ForwardMode::Training).unwrap();
                batch_hard_triplet(&c.features, &labels, 0.3, DistanceMetric::Euclidean)
                    .unwrap()
                    .value
            }),
        ),
        (
            "anchor",
            false,
            Box::new(|m: &EncoderModel| {
                let c = m.forward(&x, ForwardMode::Training).unwrap();
                anchor_loss(&c.features, &labels, &anchors, DistanceMetric::Euclidean)
                    .unwrap()
                    .value
            }),
        ),
        (
            "triplet_anchor",
            false,
            Box::new(|m: &EncoderModel| {
                let c = m.forward(&x, ForwardMode::Training).unwrap();
                triplet_anchor_loss(
                    &c.features,
                    &labels,
                    &anchors,
                    0.2,
                    DistanceMetric::Euclidean,
                )
                .unwrap()
                .value
            }),
        ),
        (
            "center",
            false,
            Box::new(|m: &EncoderModel| {
                let c = m.forward(&x, ForwardMode::Training).unwrap();
                parametric_center_loss(&c.features, &labels, &bank)
                    .unwrap()
                    .value
            }),
        ),
    ];

    for (name, to_logits, f) in &losses {
        let cache = model.forward(&x, ForwardMode::Training)?;
        let out: LossOutput = match *name {
            "classification" => cross_entropy_ls(&cache.logits, &labels, 0.1)?,
            "triplet" => batch_hard_triplet(&cache.features, &labels, 0.3, DistanceMetric::Euclidean)?,
            "anchor" => anchor_loss(&cache.features, &labels, &anchors, DistanceMetric::Euclidean)?,
            "triplet_anchor" => triplet_anchor_loss(
                &cache.features,
                &labels,
                &anchors,
                0.2,
                DistanceMetric::Euclidean,
            )?,
            _ => parametric_center_loss(&cache.features, &labels, &bank)?,
        };
        let grads = if *to_logits {
            model.backward(&cache, None, Some(&out.grad_inputs))?
        } else {
            model.backward(&cache, Some(&out.grad_inputs), None)?
        };

        let mut worst = 0.0f64;
        for idx in 0..model.num_params() {
            let mut plus = model.clone();
            *plus.param_mut(idx) += STEP;
            let mut minus = model.clone();
            *minus.param_mut(idx) -= STEP;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(grads.param(idx), numeric));
        }
        println!(
            "{name:>15}: worst relative error {worst:.2e} over {} parameters",
            model.num_params()
        );
        assert!(worst <= 1e-4, "{name} gradient mismatch");
    }

    // The center loss also differentiates its centers.
    let cache = model.forward(&x, ForwardMode::Training)?;
    let out = parametric_center_loss(&cache.features, &labels, &bank)?;
    let grad_centers = out.grad_centers.expect("center loss returns center grads");
    let mut worst = 0.0f64;
    for j in 0..classes {
        for d in 0..feat_dim {
            let mut plus = bank.clone();
            *plus.centers.row_mut(j).get_mut(d).unwrap() += STEP;
            let mut minus = bank.clone();
            *minus.centers.row_mut(j).get_mut(d).unwrap() -= STEP;
            let vp = parametric_center_loss(&cache.features, &labels, &plus)?.value;
            let vm = parametric_center_loss(&cache.features, &labels, &minus)?.value;
            let numeric = (vp - vm) / (2.0 * STEP);
            worst = worst.max(rel_err(grad_centers.get(j, d), numeric));
        }
    }
    println!("  center params: worst relative error {worst:.2e}");
    assert!(worst <= 1e-4);
    Ok(())
}
