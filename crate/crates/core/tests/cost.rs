use glmha::attention::{BlockParams, Variant};
use glmha::cost::{cost_report, enumerate_params, instrumented_flops, sweep, SweepGrid};
use glmha::rng::seeded;
use glmha::{count_flops, count_params, param_reduction_ratio, AttnConfig};

fn eq8(n: f64, h: f64, k: f64, r: f64) -> f64 {
    ((2.0 * n * n - n * n / (h * h) - n * k * k) * r - 2.0 * n * n) / (3.0 * n * n * r)
}

fn eq8_grid() -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for n in [16, 32, 48, 64, 128, 256] {
        for h in [1, 2, 4, 8] {
            for k in [1, 3, 5] {
                for r in [1, 2, 4] {
                    // n/r must split evenly across heads
                    if n % (h * r) == 0 {
                        out.push((n, h, k, r));
                    }
                }
            }
        }
    }
    out
}

#[test]
fn reduction_ratio_matches_enumerated_tensors() {
    let grid = eq8_grid();
    assert!(grid.len() >= 100);
    assert!(param_reduction_ratio(16, 8, 3, 4).is_err());
    for (n, h, k, r) in grid {
        let cfg = AttnConfig::new(n, h, r as f64, 8, 8).with_kernel(k);
        let mut rng = seeded(0, 0);
        let csa = BlockParams::init(Variant::Csa, &cfg, &mut rng).unwrap().param_count() as f64;
        let glmha = BlockParams::init(Variant::Glmha, &cfg, &mut rng).unwrap().param_count() as f64;
        let enumerated = (csa - glmha) / csa;
        let ratio = param_reduction_ratio(n, h, k, r).unwrap();
        let closed = eq8(n as f64, h as f64, k as f64, r as f64);
        for other in [enumerated, closed] {
            assert!(
                (ratio - other).abs() <= 1e-12 * other.abs().max(1e-300),
                "{n} {h} {k} {r}: {ratio} vs {other}"
            );
        }
    }
}

#[test]
fn formula_params_equal_enumeration() {
    for (n, h, k, r) in eq8_grid() {
        let cfg = AttnConfig::new(n, h, r as f64, 8, 8).with_kernel(k);
        for v in Variant::ALL {
            assert_eq!(count_params(&cfg, v).unwrap(), enumerate_params(&cfg, v).unwrap());
        }
    }
}

#[test]
fn ratio_grows_with_sequence_length() {
    for (h, k, r) in [(1, 3, 2), (2, 3, 2), (4, 3, 4), (8, 5, 2)] {
        let ratios: Vec<f64> = [16, 32, 64, 128, 256]
            .iter()
            .map(|&n| param_reduction_ratio(n, h, k, r).unwrap())
            .collect();
        assert!(ratios.windows(2).all(|w| w[1] > w[0]), "{ratios:?}");
    }
}

#[test]
fn closed_form_flops_equal_instrumented_counts() {
    let cfgs = [
        AttnConfig::new(2, 1, 1.0, 1, 1).with_kernel(1),
        AttnConfig::new(4, 1, 2.0, 3, 3),
        AttnConfig::new(4, 2, 2.0, 3, 4),
        AttnConfig::new(6, 3, 1.0, 5, 3),
        AttnConfig::new(8, 2, 2.0, 3, 3),
        AttnConfig::new(8, 4, 2.0, 4, 4).with_kernel(1),
        AttnConfig::new(12, 2, 3.0, 5, 5).with_kernel(5),
        AttnConfig::new(16, 2, 4.0, 4, 6),
        AttnConfig::new(16, 4, 1.5, 6, 6),
        AttnConfig::new(9, 1, 2.0, 3, 7),
        AttnConfig::new(31, 1, 2.0, 4, 4),
        AttnConfig::new(62, 2, 2.0, 3, 3),
    ];
    for cfg in &cfgs {
        for v in Variant::ALL {
            assert_eq!(
                count_flops(cfg, v).unwrap(),
                instrumented_flops(cfg, v).unwrap(),
                "{v} {cfg:?}"
            );
        }
    }
}

#[test]
fn large_width_examples() {
    let cfg = AttnConfig::new(64, 8, 2.0, 16, 16);
    assert_eq!(count_params(&cfg, Variant::Csa).unwrap(), 12288);
    assert_eq!(count_params(&cfg, Variant::Glmha).unwrap(), 8832);
    assert_eq!(count_params(&cfg, Variant::PostProj).unwrap(), 16384);
    assert!((param_reduction_ratio(64, 8, 3, 2).unwrap() - 0.28125).abs() < 1e-15);

    let cfg = AttnConfig::new(48, 8, 2.0, 16, 16);
    assert!(count_flops(&cfg, Variant::Glmha).unwrap() < count_flops(&cfg, Variant::Csa).unwrap());

    let cfg = AttnConfig::new(31, 1, 2.0, 4, 4);
    assert!(count_flops(&cfg, Variant::PostProj).unwrap() > count_flops(&cfg, Variant::Csa).unwrap());

    let report = cost_report(&AttnConfig::new(64, 8, 2.0, 16, 16), Variant::Glmha).unwrap();
    assert!(report.reduction_vs_csa.params_pct > 0.0 && report.reduction_vs_csa.flops_pct > 0.0);
}

#[test]
fn glmha_flops_strictly_decrease_in_r() {
    let grid = SweepGrid {
        channels: vec![32],
        heads: vec![2],
        reductions: vec![1.0, 2.0, 4.0],
        kernels: vec![3],
        spatial: vec![(8, 8)],
        alpha: 0.6,
    };
    let table = sweep(&grid, &[Variant::Glmha]).unwrap();
    let flops: Vec<u64> = table.rows.iter().map(|r| r.flops).collect();
    assert_eq!(flops.len(), 3);
    assert!(flops.windows(2).all(|w| w[1] < w[0]));
}
