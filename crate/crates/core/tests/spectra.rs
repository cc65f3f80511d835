use glmha::attention::Variant;
use glmha::config::AttnConfig;
use glmha::rng::seeded;
use glmha::spectra::{attn_spectrum_sweep, energy_cdf, jacobi_svd, spectra_csv, LayerSelector};
use glmha::train::{make_task, train, Model, ModelSpec, TaskSpec, TrainSettings};
use glmha::{best_rank_m_error, spectrum, Error, Tensor};
use nalgebra::DMatrix;
use rand::Rng;

fn to_na(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = t.dims2().unwrap();
    DMatrix::from_row_slice(r, c, t.data())
}

/// Singular values as square roots of the eigenvalues of MᵀM (or MMᵀ for wide M).
fn eig_oracle(t: &Tensor) -> Vec<f64> {
    let m = to_na(t);
    let gram = if m.nrows() >= m.ncols() {
        m.transpose() * &m
    } else {
        &m * m.transpose()
    };
    let mut ev: Vec<f64> = gram
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ev
}

fn random_matrix(seed: u64) -> Tensor {
    let mut rng = seeded(seed, 0);
    let r = rng.random_range(8..=16);
    let c = rng.random_range(8..=16);
    Tensor::randn(&[r, c], 1.0, &mut rng).unwrap()
}

#[test]
fn singular_values_match_gram_eigenvalues() {
    for seed in 0..50 {
        let m = random_matrix(seed);
        let report = spectrum(&m).unwrap();
        let oracle = eig_oracle(&m);
        let top = oracle[0];
        for (s, o) in report.singular_values.iter().zip(&oracle) {
            // squaring loses precision for tiny values, so compare relative to the largest
            assert!((s - o).abs() <= 1e-8 * top, "seed {seed}: {s} vs {o}");
        }
        let cdf = energy_cdf(&oracle);
        for (a, b) in report.energy_cdf.iter().zip(&cdf) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}

#[test]
fn singular_values_match_reference_svd() {
    for seed in 100..120 {
        let m = random_matrix(seed);
        let mut reference: Vec<f64> = to_na(&m).svd(false, false).singular_values.iter().copied().collect();
        reference.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let ours = jacobi_svd(&m).unwrap().s;
        for (s, r) in ours.iter().zip(&reference) {
            assert!((s - r).abs() <= 1e-9 * r.max(1e-300), "{s} vs {r}");
        }
    }
}

#[test]
fn factors_reconstruct_and_are_orthonormal() {
    for seed in 200..210 {
        let m = random_matrix(seed);
        let svd = jacobi_svd(&m).unwrap();
        let (u, v) = (to_na(&svd.u), to_na(&svd.v));
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(svd.s.clone()));
        let rebuilt = &u * s * v.transpose();
        assert!((rebuilt - to_na(&m)).abs().max() < 1e-10);
        let p = svd.s.len();
        assert!((u.transpose() * &u - DMatrix::identity(p, p)).abs().max() < 1e-10);
        assert!((v.transpose() * &v - DMatrix::identity(p, p)).abs().max() < 1e-10);
        assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn truncation_error_matches_explicit_reconstruction() {
    for seed in 300..350 {
        let m = random_matrix(seed);
        let na = to_na(&m);
        let svd = na.clone().svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap());
        for rank in [0, 1, 4, order.len()] {
            let mut approx = DMatrix::zeros(na.nrows(), na.ncols());
            for &i in &order[..rank] {
                approx += svd.singular_values[i] * u.column(i) * vt.row(i);
            }
            let brute = (&na - approx).norm();
            let err = best_rank_m_error(&m, rank).unwrap();
            assert!((err.frobenius - brute).abs() < 1e-10, "seed {seed} rank {rank}");
            assert!((err.relative - brute / na.norm()).abs() < 1e-10);
        }
    }
}

#[test]
fn eckart_young_lower_bounds_random_low_rank_fits() {
    let mut rng = seeded(400, 0);
    let m = Tensor::randn(&[10, 12], 1.0, &mut rng).unwrap();
    let na = to_na(&m);
    for rank in [1, 3, 6] {
        let best = best_rank_m_error(&m, rank).unwrap().frobenius;
        for _ in 0..100 {
            let a = to_na(&Tensor::randn(&[10, rank], 1.0, &mut rng).unwrap());
            let b = to_na(&Tensor::randn(&[rank, 12], 1.0, &mut rng).unwrap());
            assert!(best <= (&na - a * b).norm() + 1e-12);
        }
    }
}

#[test]
fn special_matrices() {
    let u = Tensor::new(&[4, 1], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let v = Tensor::new(&[1, 5], vec![0.3, 1.0, -1.0, 2.0, 0.1]).unwrap();
    let rank1 = glmha::ops::matmul(&u, &v).unwrap();
    let r = spectrum(&rank1).unwrap();
    assert!(r.energy_cdf.iter().all(|&c| (c - 1.0).abs() < 1e-12));
    assert_eq!(r.rank_at(0.99), 1);
    assert!(best_rank_m_error(&rank1, 1).unwrap().frobenius < 1e-12);

    let r = spectrum(&Tensor::eye(5).unwrap()).unwrap();
    for (m, c) in r.energy_cdf.iter().enumerate() {
        assert!((c - (m + 1) as f64 / 5.0).abs() < 1e-12);
    }

    let z = Tensor::zeros(&[3, 4]).unwrap();
    let r = spectrum(&z).unwrap();
    assert!(r.zero_matrix);
    assert!(r.energy_cdf.iter().all(|&c| c == 0.0));

    let m = random_matrix(7);
    let full = best_rank_m_error(&m, 0).unwrap();
    assert!((full.frobenius - m.frobenius_norm()).abs() < 1e-10);
    assert!((full.relative - 1.0).abs() < 1e-12);
}

#[test]
fn error_paths() {
    let bad = Tensor::new(&[2, 2], vec![1.0, f64::NAN, 0.0, 1.0]).unwrap();
    assert!(matches!(spectrum(&bad), Err(Error::Numeric { .. })));
    let m = random_matrix(8);
    let p = m.shape()[0].min(m.shape()[1]);
    assert!(matches!(best_rank_m_error(&m, p + 1), Err(Error::Domain { .. })));
}

fn small_model(heads: usize, depth: usize) -> (Model, Vec<Tensor>) {
    let spec = ModelSpec::uniform(Variant::Csa, AttnConfig::new(8, heads, 1.0, 4, 4), depth);
    let model = Model::init(&spec, 3).unwrap();
    let mut rng = seeded(5, 0);
    let inputs = (0..3)
        .map(|_| Tensor::randn(&[8, 16], 1.0, &mut rng).unwrap())
        .collect();
    (model, inputs)
}

#[test]
fn sweep_over_one_head_and_instance_is_that_spectrum() {
    let (model, inputs) = small_model(1, 2);
    let layers = attn_spectrum_sweep(&model, &inputs[..1], &LayerSelector::All).unwrap();
    let maps = model.attention_maps(&inputs[0]).unwrap();
    for (l, layer) in layers.iter().enumerate() {
        let direct = spectrum(&maps[l][0]).unwrap();
        assert_eq!(layer.matrices, 1);
        for (a, b) in layer.mean_energy_cdf.iter().zip(&direct.energy_cdf) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn duplicating_instances_leaves_the_average_unchanged() {
    let (model, inputs) = small_model(2, 2);
    let once = attn_spectrum_sweep(&model, &inputs, &LayerSelector::All).unwrap();
    let doubled: Vec<Tensor> = inputs.iter().chain(&inputs).cloned().collect();
    let twice = attn_spectrum_sweep(&model, &doubled, &LayerSelector::All).unwrap();
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(b.matrices, 2 * a.matrices);
        for (x, y) in a.mean_energy_cdf.iter().zip(&b.mean_energy_cdf) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn selector_must_match_a_layer() {
    let (model, inputs) = small_model(2, 2);
    let one = attn_spectrum_sweep(&model, &inputs, &LayerSelector::Layers(vec![1])).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].layer, 1);
    assert!(matches!(
        attn_spectrum_sweep(&model, &inputs, &LayerSelector::Layers(vec![5])),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        attn_spectrum_sweep(&model, &[], &LayerSelector::All),
        Err(Error::Config(_))
    ));
}

#[test]
fn trained_model_spectra_are_well_formed() {
    let task = make_task(&TaskSpec {
        train_size: 64,
        val_size: 8,
        ..TaskSpec::default()
    })
    .unwrap();
    let spec = ModelSpec::uniform(Variant::Csa, AttnConfig::new(16, 2, 2.0, 8, 8), 2);
    let settings = TrainSettings {
        steps: 100,
        eval_every: 50,
        ..TrainSettings::default()
    };
    let (model, _) = train(&spec, &task, &settings).unwrap();
    let inputs: Vec<Tensor> = task.val.iter().map(|s| s.input.clone()).collect();
    let layers = attn_spectrum_sweep(&model, &inputs, &LayerSelector::All).unwrap();
    assert_eq!(layers.len(), 2);
    for layer in &layers {
        assert!(layer.mean_energy_cdf.windows(2).all(|w| w[0] <= w[1] + 1e-15));
        assert!((layer.mean_energy_cdf.last().unwrap() - 1.0).abs() < 1e-12);
        let r90 = layer.rank_at.iter().find(|r| r.threshold == 0.9).unwrap().rank;
        assert!((1..=16).contains(&r90));
    }
    let csv = spectra_csv(&layers).unwrap();
    assert!(csv.starts_with("layer,m,cdf_value\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 8);
}
