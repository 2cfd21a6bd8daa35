use lsla_core::attention::*;
use lsla_core::numcore::gradcheck::{fd_gradcheck, worst_rel, DEFAULT_STEP};
use lsla_core::numcore::ops::matmul;
use lsla_core::numcore::rng::{normal_tensor, seeded, SeededRng};
use lsla_core::numcore::{Tape, Tensor};
use proptest::prelude::*;

fn randomize(params: &mut AttentionParams, rng: &mut SeededRng, std: f64) {
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    for name in names {
        let t = params.tensor_mut(&name).unwrap();
        *t = normal_tensor(rng, t.shape(), std);
    }
}

fn zero_biases(params: &mut AttentionParams) {
    for name in ["q.bias", "k.bias", "v.bias", "proj.bias"] {
        if let Some(t) = params.tensor_mut(name) {
            *t = Tensor::zeros(t.shape());
        }
    }
}

/// Region id of each token of the shifted map: which side of the wrap it
/// came from along each axis.
fn brute_force_exclusions(h: usize, w: usize, m: usize, shift: usize) -> Vec<bool> {
    let region = |y: usize, x: usize| ((y + shift) >= h, (x + shift) >= w);
    let n = m * m;
    let mut out = Vec::new();
    for wy in 0..h / m {
        for wx in 0..w / m {
            for q in 0..n {
                for k in 0..n {
                    let rq = region(wy * m + q / m, wx * m + q % m);
                    let rk = region(wy * m + k / m, wx * m + k % m);
                    out.push(rq != rk);
                }
            }
        }
    }
    out
}

#[test]
fn shift_mask_matches_region_labelling() {
    for (h, m, s) in [(4, 2, 1), (14, 7, 3), (12, 4, 2), (21, 7, 3)] {
        let mask = build_shift_mask(h, h, m, s).unwrap();
        let oracle = brute_force_exclusions(h, h, m, s);
        let got: Vec<bool> = (0..mask.windows())
            .flat_map(|w| {
                let mask = &mask;
                (0..m * m).flat_map(move |q| (0..m * m).map(move |k| mask.is_excluded(w, q, k)))
            })
            .collect();
        assert_eq!(got, oracle, "h={h} m={m} shift={s}");
    }
    // only the last window of the 4x4 case mixes regions in both directions
    let mask = build_shift_mask(4, 4, 2, 1).unwrap();
    assert!(!mask.is_excluded(0, 0, 3));
    assert!(mask.is_excluded(3, 0, 3));
}

#[test]
fn reduction_to_fixed_scale_lsa() {
    let mut rng = seeded(1);
    let full = AttentionConfig::lsla(12, 3, 3);
    let plain = AttentionConfig::plain(12, 3, 3, Variant::Qxx);
    let mut p = AttentionParams::init(&full, &mut rng).unwrap();
    randomize(&mut p, &mut rng, 0.5);
    p.dynamic_scale = Some(Tensor::full(&[9, 9], full.fixed_scale()));
    p.inner_bias = Some(PosBias::Direct(Tensor::zeros(&[3, 9, 9])));
    p.outer_bias = Some(PosBias::Direct(Tensor::zeros(&[3, 9, 9])));
    let plain_p = AttentionParams {
        dynamic_scale: None,
        inner_bias: None,
        outer_bias: None,
        ..p.clone()
    };
    let x = normal_tensor(&mut rng, &[5, 9, 12], 1.0);
    let a = attend(&full, &p, &x, None).unwrap();
    let b = attend(&plain, &plain_p, &x, None).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-12, "{}", a.max_abs_diff(&b));
}

#[test]
fn hand_evaluated_single_head() {
    let cfg = AttentionConfig {
        final_projection: false,
        ..AttentionConfig::plain(1, 1, 1, Variant::Qxx)
    };
    let mut p = AttentionParams::zeros(&cfg).unwrap();
    p.q.weight = Tensor::identity(1);
    let x = Tensor::new(&[1, 2, 1], vec![1.0, 0.0]).unwrap();
    let y = attend(&cfg, &p, &x, None).unwrap();
    let e = std::f64::consts::E;
    assert!((y.data()[0] - e / (e + 1.0)).abs() < 1e-15);
    assert!((y.data()[0] - 0.7311).abs() < 1e-4);
}

#[test]
fn qkv_is_reproduced_by_constructed_qxx() {
    let mut rng = seeded(2);
    for variant in [Variant::Qkv, Variant::Qxv] {
        for proj in [true, false] {
            let cfg = AttentionConfig {
                final_projection: proj,
                ..AttentionConfig::plain(6, 1, 2, variant)
            };
            let mut p = AttentionParams::init(&cfg, &mut rng).unwrap();
            randomize(&mut p, &mut rng, 0.6);
            zero_biases(&mut p);
            let (qcfg, qp) = qkv_as_qxx(&cfg, &p).unwrap();
            assert_eq!(qcfg.variant, Variant::Qxx);
            let x = normal_tensor(&mut rng, &[3, 4, 6], 1.0);
            let a = attend(&cfg, &p, &x, None).unwrap();
            let b = attend(&qcfg, &qp, &x, None).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-10, "{variant} proj={proj}: {}", a.max_abs_diff(&b));
        }
    }
}

#[test]
fn constructor_rejects_nonzero_biases() {
    let cfg = AttentionConfig::plain(4, 1, 2, Variant::Qkv);
    let mut p = AttentionParams::init(&cfg, &mut seeded(3)).unwrap();
    p.q.bias = Tensor::full(&[4], 0.1);
    assert!(qkv_as_qxx(&cfg, &p).is_err());
}

#[test]
fn equivalence_identities_on_random_inputs() {
    let mut rng = seeded(4);
    let (wq, wk) = (normal_tensor(&mut rng, &[4, 4], 1.0), normal_tensor(&mut rng, &[4, 4], 1.0));
    let (wv, wo) = (normal_tensor(&mut rng, &[4, 4], 1.0), normal_tensor(&mut rng, &[4, 4], 1.0));
    let qbar = construct_equivalent_qbar(&wq, &wk).unwrap();
    let fused = fuse_vo(&wv, &wo).unwrap();
    for _ in 0..20 {
        let x = normal_tensor(&mut rng, &[9, 4], 1.0);
        let a = normal_tensor(&mut rng, &[9, 9], 1.0);
        let lhs = matmul(&matmul(&x, &qbar).unwrap(), &x.transpose2().unwrap()).unwrap();
        let q = matmul(&x, &wq).unwrap();
        let k = matmul(&x, &wk).unwrap();
        let rhs = matmul(&q, &k.transpose2().unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        let ax = matmul(&a, &x).unwrap();
        let lhs = matmul(&ax, &fused).unwrap();
        let rhs = matmul(&matmul(&matmul(&a, &x).unwrap(), &wv).unwrap(), &wo).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }
}

fn lsla_with_random_params(
    bias_mode: BiasParamMode,
    seed: u64,
) -> (AttentionConfig, AttentionParams, SeededRng) {
    let mut rng = seeded(seed);
    let cfg = AttentionConfig {
        bias_mode,
        ..AttentionConfig::lsla(8, 2, 7)
    };
    let mut p = AttentionParams::init(&cfg, &mut rng).unwrap();
    randomize(&mut p, &mut rng, 0.3);
    (cfg, p, rng)
}

#[test]
fn masked_pairs_get_exactly_zero_weight() {
    for mode in [BiasParamMode::Direct, BiasParamMode::RelativeTable] {
        let (cfg, p, mut rng) = lsla_with_random_params(mode, 5);
        let mask = build_shift_mask(14, 14, 7, 3).unwrap();
        let x = normal_tensor(&mut rng, &[8, 49, 8], 1.0);
        let (_, pre, post) = attend_with_weights(&cfg, &p, &x, Some(&mask)).unwrap();
        let mut excluded = 0;
        for w in 0..8 {
            for h in 0..2 {
                for q in 0..49 {
                    for k in 0..49 {
                        let i = ((w * 2 + h) * 49 + q) * 49 + k;
                        if mask.is_excluded(w % 4, q, k) {
                            excluded += 1;
                            assert_eq!(pre.data()[i], 0.0);
                            assert_eq!(post.data()[i], 0.0);
                        }
                    }
                }
            }
        }
        assert!(excluded > 0);
    }
}

#[test]
fn row_sum_law() {
    let (cfg, p, mut rng) = lsla_with_random_params(BiasParamMode::Direct, 6);
    let mask = build_shift_mask(14, 14, 7, 3).unwrap();
    let x = normal_tensor(&mut rng, &[4, 49, 8], 1.0);
    let (_, pre, post) = attend_with_weights(&cfg, &p, &x, Some(&mask)).unwrap();
    let bo = p.outer_bias.as_ref().unwrap().expanded(&cfg);
    for w in 0..4 {
        for h in 0..2 {
            for q in 0..49 {
                let row = ((w * 2 + h) * 49 + q) * 49;
                let pre_sum: f64 = pre.data()[row..row + 49].iter().sum();
                let post_sum: f64 = post.data()[row..row + 49].iter().sum();
                let bo_sum: f64 = (0..49)
                    .filter(|&k| !mask.is_excluded(w, q, k))
                    .map(|k| bo.at(&[h, q, k]))
                    .sum();
                assert!((pre_sum - 1.0).abs() < 1e-12);
                assert!((post_sum - 1.0 - bo_sum).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn lsla_window_gradcheck() {
    for mode in [BiasParamMode::Direct, BiasParamMode::RelativeTable] {
        let mut rng = seeded(7);
        let cfg = AttentionConfig {
            bias_mode: mode,
            ..AttentionConfig::lsla(4, 2, 2)
        };
        let mut p = AttentionParams::init(&cfg, &mut rng).unwrap();
        randomize(&mut p, &mut rng, 0.4);
        let store = p.store().unwrap();
        let x = normal_tensor(&mut rng, &[1, 4, 4], 1.0);
        let labels = [0, 3, 1, 2];
        let reports = fd_gradcheck(&store, DEFAULT_STEP, |tape, bound| {
            let vars = AttentionVars::from_bound(&cfg, bound, "")?;
            let xv = tape.constant(&x);
            let t = attend_vars(tape, &cfg, &vars, xv, None)?;
            let logits = tape.reshape(t.out, &[4, 4])?;
            tape.cross_entropy(logits, &labels)
        })
        .unwrap();
        assert_eq!(reports.len(), store.len());
        assert!(worst_rel(&reports) < 1e-4, "{mode}: {reports:?}");
    }
}

#[test]
fn masked_gradcheck_and_input_gradient() {
    let (cfg, p, mut rng) = lsla_with_random_params(BiasParamMode::Direct, 8);
    let mask = build_shift_mask(14, 14, 7, 3).unwrap();
    let mut store = p.store().unwrap();
    store.insert("x", normal_tensor(&mut rng, &[4, 49, 8], 1.0)).unwrap();
    let probe = normal_tensor(&mut rng, &[4, 49, 8], 1.0);
    let names: Vec<String> = ["x", "q.weight", "dynamic_scale", "outer_bias", "inner_bias"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let reports = lsla_core::numcore::fd_gradcheck_subset(&store, &names, DEFAULT_STEP, 60, |tape, bound| {
        let vars = AttentionVars::from_bound(&cfg, bound, "")?;
        let t = attend_vars(tape, &cfg, &vars, bound.get("x")?, Some(&mask))?;
        let pv = tape.constant(&probe);
        let prod = tape.mul(t.out, pv)?;
        Ok(tape.sum_all(prod))
    })
    .unwrap();
    assert!(worst_rel(&reports) < 1e-4, "{reports:?}");
}

#[test]
fn attend_is_deterministic_and_checks_shapes() {
    let (cfg, p, mut rng) = lsla_with_random_params(BiasParamMode::Direct, 9);
    let x = normal_tensor(&mut rng, &[2, 49, 8], 1.0);
    assert_eq!(attend(&cfg, &p, &x, None).unwrap(), attend(&cfg, &p, &x, None).unwrap());
    assert!(attend(&cfg, &p, &normal_tensor(&mut rng, &[2, 48, 8], 1.0), None).is_err());
    assert!(attend(&cfg, &p, &normal_tensor(&mut rng, &[2, 49, 6], 1.0), None).is_err());
    let wrong = AttentionParams::init(&AttentionConfig::plain(8, 2, 7, Variant::Qkv), &mut rng).unwrap();
    assert!(attend(&cfg, &wrong, &x, None).is_err());
}

#[test]
fn fully_masked_row_is_rejected() {
    let (cfg, p, mut rng) = lsla_with_random_params(BiasParamMode::Direct, 10);
    let mut excluded = vec![false; 49 * 49];
    excluded[..49].iter_mut().for_each(|e| *e = true);
    let mask = WindowMask::from_exclusions(1, 49, &excluded).unwrap();
    let x = normal_tensor(&mut rng, &[1, 49, 8], 1.0);
    assert!(matches!(
        attend(&cfg, &p, &x, Some(&mask)),
        Err(lsla_core::LslaError::DegenerateRow { row: 0 })
    ));
}

#[test]
fn bias_profile_rows() {
    let mut rng = seeded(11);
    let cfg = AttentionConfig::lsla(8, 2, 7);
    let mut p = AttentionParams::init(&cfg, &mut rng).unwrap();
    let x = normal_tensor(&mut rng, &[1, 49, 8], 1.0);
    let prof = bias_profile(&cfg, &p, &x, 8, 1).unwrap();
    assert!(prof.inner_bias.iter().all(|&v| v == 0.0));
    assert!(prof.ds.iter().all(|&v| v == cfg.fixed_scale()));
    assert!((prof.attn_pre.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let bo = normal_tensor(&mut rng, &[2, 49, 49], 0.01);
    p.outer_bias = Some(PosBias::Direct(bo.clone()));
    let prof = bias_profile(&cfg, &p, &x, 8, 1).unwrap();
    let bo_row: f64 = (0..49).map(|k| bo.at(&[1, 8, k])).sum();
    assert!((prof.attn_post.iter().sum::<f64>() - 1.0 - bo_row).abs() < 1e-12);

    let csv = prof.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(PROFILE_HEADER));
    assert_eq!(lines.count(), 49);
    assert!(bias_profile(&cfg, &p, &x, 49, 0).is_err());
    assert!(bias_profile(&cfg, &p, &x, 0, 2).is_err());
}

#[test]
fn tape_and_tensor_partitions_agree() {
    let mut rng = seeded(12);
    let x = normal_tensor(&mut rng, &[2, 6, 6, 3], 1.0);
    let mut tape = Tape::new();
    let v = tape.constant(&x);
    let p = window::shift_partition(&mut tape, v, 3, 0).unwrap();
    assert_eq!(tape.tensor(p), window_partition(&x, 3).unwrap());
}

proptest! {
    #[test]
    fn partition_round_trip(b in 1usize..3, gh in 1usize..4, gw in 1usize..4, m in 1usize..4, c in 1usize..4, seed in 0u64..100) {
        let x = normal_tensor(&mut seeded(seed), &[b, gh * m, gw * m, c], 1.0);
        let w = window_partition(&x, m).unwrap();
        prop_assert_eq!(w.shape(), &[b * gh * gw, m * m, c][..]);
        prop_assert_eq!(window_reverse(&w, m, gh * m, gw * m).unwrap(), x);
    }

    #[test]
    fn qbar_identity(d in 1usize..9, n in 1usize..10, seed in 0u64..10_000) {
        let mut rng = seeded(seed);
        let x = normal_tensor(&mut rng, &[n, d], 1.0);
        let wq = normal_tensor(&mut rng, &[d, d], 1.0);
        let wk = normal_tensor(&mut rng, &[d, d], 1.0);
        let qbar = construct_equivalent_qbar(&wq, &wk).unwrap();
        let lhs = matmul(&matmul(&x, &qbar).unwrap(), &x.transpose2().unwrap()).unwrap();
        let rhs = matmul(&matmul(&x, &wq).unwrap(), &matmul(&x, &wk).unwrap().transpose2().unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }
}
