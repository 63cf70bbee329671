use mesa_core::theory::{
    position_inversion, position_weight, relu_position_net, threshold_scan, Construction, TheoryConfig, Verdict,
};

fn stair(d: usize, n: usize, e: usize) -> usize {
    if d <= n {
        d
    } else {
        n + (d - n).div_ceil(e)
    }
}

/// `e^{-(t-1)} / Σ_{j<t} e^{-j}`, summed from the smallest term up.
fn weight_oracle(t: usize) -> f64 {
    let s: f64 = (0..t).rev().map(|j| (-(j as f64)).exp()).sum();
    (-((t - 1) as f64)).exp() / s
}

fn scan(construction: Construction, cfg: &TheoryConfig) -> mesa_core::ThresholdReport {
    let weights = construction.build(cfg).unwrap();
    threshold_scan(&weights, construction, cfg).unwrap()
}

#[test]
fn theorem1_csv_matches_golden() {
    let cfg = TheoryConfig::new(8, 0.0).with_t_max(12);
    let report = scan(Construction::Theorem1, &cfg);
    let csv = report.to_csv_string().unwrap();
    let golden = include_str!("golden/theorem1_M8_H0_T12.csv");
    let mut got = csv::Reader::from_reader(csv.as_bytes());
    let mut want = csv::Reader::from_reader(golden.as_bytes());
    assert_eq!(got.headers().unwrap(), want.headers().unwrap());
    let got: Vec<_> = got.records().map(Result::unwrap).collect();
    let want: Vec<_> = want.records().map(Result::unwrap).collect();
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(&g[0], &w[0]);
        for col in 1..4 {
            let (a, b): (f64, f64) = (g[col].parse().unwrap(), w[col].parse().unwrap());
            assert!((a - b).abs() <= 1e-9, "t={} col={col}: {a} vs {b}", &g[0]);
        }
        assert_eq!(&g[4], &w[4]);
    }
}

#[test]
fn theorem1_verdicts_flip_at_m() {
    for m in [4, 8, 32] {
        for h in [0.0, 0.5, 1.0] {
            let report = scan(Construction::Theorem1, &TheoryConfig::new(m, h).with_t_max(3 * m));
            assert_eq!(report.crossing, Some(m));
            assert_eq!(report.row(m).verdict, Verdict::Boundary);
            assert_eq!(report.row(m - 1).verdict, Verdict::Success);
            assert_eq!(report.row(m + 1).verdict, Verdict::Failure);
        }
    }
}

#[test]
fn theorem2_layer_one_weight_and_positions() {
    let cfg = TheoryConfig::new(16, 0.0).with_t_max(200);
    let report = scan(Construction::Theorem2, &cfg);
    for t in 1..=200 {
        let oracle = weight_oracle(t);
        assert!((report.layer1_bos_weight[t - 1] - oracle).abs() <= 1e-12 * oracle.max(1e-300).max(1.0));
        assert!((report.layer1_bos_weight[t - 1] / oracle - 1.0).abs() < 1e-9, "t = {t}");
        assert_eq!(report.recovered_positions[t - 1], t as f64);
    }
    assert_eq!(report.crossing, Some(16));
}

#[test]
fn woven_positions_follow_the_weave() {
    // layer 1 sees woven distances, so dim 3 recovers W(t - 1) + 1
    for (n, e) in [(4usize, 2usize), (8, 5), (2, 3)] {
        let cfg = TheoryConfig::new(8 * n, 0.0).with_weave(n as u64, e as u64).with_t_max(300);
        let report = scan(Construction::Corollary, &cfg);
        for t in 1..=300 {
            assert_eq!(report.recovered_positions[t - 1], (stair(t - 1, n, e) + 1) as f64, "N={n} E={e} t={t}");
        }
    }
}

#[test]
fn woven_threshold_matches_softmax_oracle() {
    for (construction, n, e) in [
        (Construction::Theorem3, 2usize, 1usize),
        (Construction::Theorem3, 4, 1),
        (Construction::Corollary, 4, 2),
        (Construction::Corollary, 8, 5),
    ] {
        let m = 4 * n;
        let cfg = TheoryConfig::new(m, 0.0).with_weave(n as u64, e as u64).with_t_max(150);
        let report = scan(construction, &cfg);
        let weave = |d: usize| match construction {
            Construction::Theorem3 => d.min(n),
            _ => stair(d, n, e),
        };
        for t in 2..=150 {
            let p = |j: usize| report.recovered_positions[j - 1];
            let scores: Vec<f64> = (1..=t).map(|i| p(t) - p(i) - weave(t - i) as f64).collect();
            let top = scores.iter().copied().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - top).exp()).sum();
            let alpha = (scores[0] - top).exp() / z;
            let row = report.row(t);
            assert!((row.alpha_bos - alpha).abs() < 1e-12, "{construction} t={t}");
            assert!((row.observed - (m as f64 * alpha - 1.0)).abs() < 1e-9, "{construction} t={t}");
        }
    }
}

#[test]
fn rerope_rescue_holds_to_the_horizon() {
    for n in [2u64, 4, 8] {
        for m in [4 * n as usize, 8 * n as usize] {
            let cfg = TheoryConfig::new(m, 0.0).with_weave(n, 1);
            let cfg = cfg.with_t_max(cfg.scan_limit());
            let report = scan(Construction::Theorem3, &cfg);
            assert_eq!(report.crossing, None, "N={n} M={m}");
        }
    }
}

#[test]
fn hand_instance() {
    let cfg = TheoryConfig::new(4, 0.0).with_weave(2, 1).with_t_max(6);
    let row = scan(Construction::Theorem3, &cfg).row(6).clone();
    // scores [0, -1, -2, -2, -1, 0]
    let alpha = 1.0 / (2.0 + 2.0 * (-1.0f64).exp() + 2.0 * (-2.0f64).exp());
    assert!((row.alpha_bos - alpha).abs() < 1e-12);
    assert!((row.alpha_bos - 0.332621).abs() < 1e-6);
    assert!((row.observed - (4.0 * alpha - 1.0)).abs() < 1e-12);
}

#[test]
fn inversion_round_trips_every_position() {
    for t in 1..=700 {
        assert_eq!(position_inversion(position_weight(t), 700).unwrap(), t);
        assert_eq!(position_inversion(weight_oracle(t), 700).unwrap(), t);
    }
    assert!(position_inversion(0.0, 700).is_err());
    assert!(position_inversion(f64::NAN, 700).is_err());
    assert!(position_inversion(0.5, 701).is_err());
}

#[test]
fn relu_net_agrees_with_lookup() {
    let ff = relu_position_net(3, 64).unwrap();
    for t in 1..=64 {
        let x = position_weight(t);
        // the residual adds x back
        let out = ff.apply(&[1.0, 0.0, x]).unwrap();
        assert!((out[2] + x - t as f64).abs() < 1e-6, "t = {t}: {}", out[2] + x);
    }
}
