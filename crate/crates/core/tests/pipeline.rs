//! Library-level runs across generator, trainer and evaluator.

use coembed::embedstore::{split_dataset, UNLABELED};
use coembed::evalkit::{evaluate, evaluate_indices, Modality};
use coembed::synthgen::{generate, SynthConfig};
use coembed::trainer::{fit, init_heads, TrainConfig};
use nalgebra::DMatrix;
use ndarray::Array2;

fn to_dmatrix(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// Largest entry of |A T - B| with T from the normal equations (A^T A) T = A^T B.
fn least_squares_residual(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let (a, b) = (to_dmatrix(a), to_dmatrix(b));
    let gram = a.transpose() * &a;
    let cutoff = 1e-9 * gram.norm();
    let t = gram.pseudo_inverse(cutoff).unwrap() * (a.transpose() * &b);
    (a * t - b).amax()
}

#[test]
fn noiseless_pairs_admit_an_exact_linear_map() {
    let (dataset, truth) = generate(&SynthConfig::default()).unwrap();
    assert!(least_squares_residual(&truth.clean_a(), &truth.clean_b()) < 1e-8);

    // the stored f32 vectors carry ~1e-7 quantization, so only the f64 copy is exact
    let all: Vec<usize> = (0..dataset.len()).collect();
    let stored = least_squares_residual(&dataset.gather_a(&all), &dataset.gather_b(&all));
    assert!(stored < 1e-4, "{stored}");

    let noisy = SynthConfig {
        noise_sigma: 0.1,
        ..SynthConfig::default()
    };
    let (noisy, _) = generate(&noisy).unwrap();
    assert!(least_squares_residual(&noisy.gather_a(&all), &noisy.gather_b(&all)) > 0.05);
}

#[test]
fn ground_truth_maps_reproduce_the_records() {
    let (dataset, truth) = generate(&SynthConfig {
        n_pairs: 50,
        ..SynthConfig::default()
    })
    .unwrap();
    let a = truth.mix_a_head().apply(&truth.latents).unwrap();
    let b = truth.mix_b_head().apply(&truth.latents).unwrap();
    for (i, r) in dataset.records.iter().enumerate() {
        for (j, &v) in r.vec_a.iter().enumerate() {
            assert_eq!(v, a[[i, j]] as f32);
        }
        for (j, &v) in r.vec_b.iter().enumerate() {
            assert_eq!(v, b[[i, j]] as f32);
        }
    }
}

#[test]
fn unlabeled_data_has_no_class_metrics() {
    let (mut dataset, _) = generate(&SynthConfig {
        n_pairs: 120,
        ..SynthConfig::default()
    })
    .unwrap();
    dataset.labeled = false;
    for r in &mut dataset.records {
        r.label = UNLABELED;
    }
    let config = TrainConfig::default();
    let heads = init_heads(&dataset, &config).unwrap();
    let split = split_dataset(&dataset, config.train_fraction, config.seed).unwrap();
    let (report, points) = evaluate(&dataset, &heads, &split, &[1, 5]).unwrap();
    assert_eq!(report.class_match_accuracy, None);
    assert_eq!(report.silhouette, None);
    assert_eq!(report.n_queries, split.val.len());
    assert_eq!(points.rows.len(), 2 * split.val.len());
    assert!(points.rows.iter().all(|p| p.label == UNLABELED));
    assert!(points.rows.chunks(2).all(|c| c[0].modality == Modality::A && c[1].modality == Modality::B));
    assert!(points.rows.chunks(2).all(|c| c[0].pair_id == c[1].pair_id));
}

#[test]
fn training_improves_on_the_untrained_head() {
    let (dataset, _) = generate(&SynthConfig {
        n_pairs: 600,
        seed: 9,
        ..SynthConfig::default()
    })
    .unwrap();
    let config = TrainConfig {
        epochs: 50,
        batch_size: 128,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let split = split_dataset(&dataset, config.train_fraction, config.seed).unwrap();
    let untrained = init_heads(&dataset, &config).unwrap();
    let (before, _) = evaluate(&dataset, &untrained, &split, &[1, 10]).unwrap();
    let (heads, report) = fit(&dataset, &config).unwrap();
    let (after, _) = evaluate(&dataset, &heads, &split, &[1, 10]).unwrap();

    assert!(report.train_loss.last().unwrap() < &report.train_loss[0]);
    assert!(report.val_loss.last().unwrap() < &report.val_loss[0]);
    let (b, a) = (before.recall_at(10).unwrap(), after.recall_at(10).unwrap());
    assert!(a.a_to_b > b.a_to_b && a.b_to_a > b.b_to_a, "{before:?} -> {after:?}");
    assert!(after.class_match_accuracy.unwrap().a_to_b > before.class_match_accuracy.unwrap().a_to_b);
}

#[test]
fn perfect_heads_retrieve_everything() {
    // modality A through the exact map into B's space
    let (dataset, truth) = generate(&SynthConfig {
        n_pairs: 300,
        ..SynthConfig::default()
    })
    .unwrap();
    let a = to_dmatrix(&truth.mix_a);
    let b = to_dmatrix(&truth.mix_b);
    let map = &b * a.pseudo_inverse(1e-12).unwrap();
    let mut heads = init_heads(&dataset, &TrainConfig::default()).unwrap();
    heads.a.layers[0].weights = Array2::from_shape_fn((64, 32), |(i, j)| map[(i, j)]);
    let all: Vec<usize> = (0..dataset.len()).collect();
    let (report, _) = evaluate_indices(&dataset, &heads, &all, &[1]).unwrap();
    let r1 = report.recall_at(1).unwrap();
    assert_eq!((r1.a_to_b, r1.b_to_a), (1.0, 1.0));
    assert_eq!(report.class_match_accuracy.unwrap().a_to_b, 1.0);
}
