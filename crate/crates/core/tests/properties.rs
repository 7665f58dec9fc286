use cutmixsl::accountant::{rdp_budget, subsampled_cdp, AccountantParams};
use cutmixsl::data::SyntheticTask;
use cutmixsl::mechanisms::{clamp_unit, dp_cutmix, dp_sl, Mechanism, MechanismConfig};
use cutmixsl::mixing::{allocate_masks, sample_mix_ratios};
use cutmixsl::protocol::{
    check_message_order, check_privacy_boundary, run_round, split_cut_gradient, ProtocolConfig, ProtocolState,
};
use cutmixsl::rng::{RngStream, Role};
use cutmixsl::splitmodel::{client_forward, SplitModel};
use cutmixsl::tensor::{check_partition, MixRatios, OneHotLabel, PatchMask, SmashedData};
use proptest::prelude::*;
use rand::Rng;

fn params() -> impl Strategy<Value = AccountantParams> {
    (
        2u32..=16,
        0.001f64..=1.0,
        1usize..=64,
        1usize..=16,
        0.001f64..=10.0,
        0.001f64..=10.0,
        1usize..=20,
        0.0f64..=1.0,
    )
        .prop_map(|(alpha, pb, d_s, d_y, ss, sy, k, t)| AccountantParams {
            alpha: alpha as f64,
            delta: 1e-4,
            pixel_bound: pb,
            d_s,
            d_y,
            sigma_s_sq: ss,
            sigma_y_sq: sy,
            lambda_max: 1.0 / k as f64 + t * (1.0 - 1.0 / k as f64),
            n: 20,
            k,
            fractional_alpha: false,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn budgets_are_ordered(p in params()) {
        let e1 = rdp_budget(&p, Mechanism::DpSl).unwrap().epsilon;
        let e2 = rdp_budget(&p, Mechanism::DpMixSl).unwrap().epsilon;
        let e3 = rdp_budget(&p, Mechanism::DpCutMixSl).unwrap().epsilon;
        prop_assert!(e2 <= e3 && e3 <= e1, "{e2} {e3} {e1}");
        let full = AccountantParams { lambda_max: 1.0, ..p };
        let f: Vec<f64> = Mechanism::ALL.iter().map(|&m| rdp_budget(&full, m).unwrap().epsilon).collect();
        prop_assert!(f[0] == f[1] && f[1] == f[2]);
    }

    #[test]
    fn subsampling_never_hurts(p in params()) {
        for m in Mechanism::ALL {
            let plain = rdp_budget(&p, m).unwrap().epsilon
                + cutmixsl::accountant::conversion_term(p.alpha, p.delta).unwrap();
            let sub = subsampled_cdp(&p, m, p.delta).unwrap().epsilon;
            prop_assert!(sub <= plain * (1.0 + 1e-12));
            let whole = subsampled_cdp(&AccountantParams { n: p.k, ..p }, m, p.delta).unwrap().epsilon;
            prop_assert!((whole - plain).abs() <= 1e-9 * plain.max(1.0));
        }
    }

    #[test]
    fn masks_partition_and_apportion(k in 1usize..=10, extra in 0usize..=60, alpha_m in 0.05f64..10.0, seed in any::<u64>()) {
        let n = k + extra;
        let mut r = RngStream::keyed(seed, 0, Role::Mixer, 0);
        let ratios = sample_mix_ratios(k, alpha_m, &mut r).unwrap();
        prop_assert!((ratios.lambdas().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let masks = allocate_masks(&ratios, n, &mut r).unwrap();
        prop_assert_eq!(check_partition(&masks).unwrap(), n);
        for (m, l) in masks.iter().zip(ratios.lambdas()) {
            prop_assert!((m.count() as f64 - l * n as f64).abs() < 1.0);
        }
    }

    #[test]
    fn split_gradients_sum_to_the_cut_gradient(k in 2usize..=10, extra in 0usize..=30, f in 1usize..=6, seed in any::<u64>()) {
        let n = k + extra;
        let mut r = RngStream::keyed(seed, 0, Role::Oracle, 0);
        let g: Vec<f64> = (0..n * f).map(|_| r.random_range(-1e3..1e3)).collect();
        let masks = allocate_masks(&MixRatios::uniform(k).unwrap(), n, &mut r).unwrap();
        let parts = split_cut_gradient(&g, &masks).unwrap();
        for (j, &v) in g.iter().enumerate() {
            let total: f64 = parts.iter().map(|p| p[j]).sum();
            prop_assert_eq!(total, v);
        }
    }

    #[test]
    fn noiseless_cutmix_keeps_owner_patches(k in 1usize..=6, extra in 0usize..=10, seed in any::<u64>()) {
        let (n, f) = (k + extra, 3);
        let mut r = RngStream::keyed(seed, 0, Role::Oracle, 1);
        let group: Vec<SmashedData> = (0..k)
            .map(|_| SmashedData::new((0..n * f).map(|_| r.random::<f64>()).collect(), n, f, 1.0).unwrap())
            .collect();
        let labels: Vec<OneHotLabel> = (0..k).map(|i| OneHotLabel::new(i % 3, 3).unwrap()).collect();
        let masks = allocate_masks(&MixRatios::uniform(k).unwrap(), n, &mut r).unwrap();
        let out = dp_cutmix(&group, &labels, &masks, &MechanismConfig::noiseless(), &mut r).unwrap();
        for (i, m) in masks.iter().enumerate() {
            for p in m.indices() {
                prop_assert_eq!(out.smashed.patch(p), group[i].patch(p));
            }
        }
        prop_assert!((out.label.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clamp_is_idempotent(v in proptest::collection::vec(-5.0f64..5.0, 0..40)) {
        let once = clamp_unit(&v);
        prop_assert_eq!(clamp_unit(&once), once.clone());
        prop_assert!(once.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn smashed_values_stay_in_range(seed in any::<u64>(), pb in 0.0f64..3.0, scale in 0.1f64..50.0) {
        let mut r = RngStream::keyed(seed, 0, Role::Oracle, 2);
        let model = SplitModel::random(4, 3, 5, 4, 2, pb, &mut r).unwrap();
        let x = cutmixsl::data::RawInput::new((0..12).map(|_| scale * r.random_range(-1.0..1.0)).collect(), 4, 3).unwrap();
        let (s, _) = client_forward(&x, &model.client).unwrap();
        prop_assert!(s.values().iter().all(|v| (0.0..=pb).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn traces_follow_the_schedule(
        mech_ix in 0usize..3,
        n in 1usize..=7,
        k_pick in 0usize..7,
        avg in any::<bool>(),
        noisy in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let k = 1 + k_pick % n;
        let mech = Mechanism::ALL[mech_ix];
        let cfg = ProtocolConfig {
            n,
            k,
            alpha_m: 1.0,
            mechanism: mech,
            mech: MechanismConfig { sigma_s_sq: if noisy { 0.1 } else { 0.0 }, sigma_y_sq: 0.05, ..MechanismConfig::noiseless() },
            lr: 0.05,
            avg_cut_grad: avg,
            weight_avg: avg,
        };
        let task = SyntheticTask { n_patches: 8, raw_dim: 2, ..SyntheticTask::default() };
        let mut r = RngStream::keyed(seed, 0, Role::Data, 0);
        let model = SplitModel::random(8, 2, 3, 5, 2, 1.0, &mut r).unwrap();
        let mut state = ProtocolState::new(cfg, &model, seed).unwrap();
        let mut trace = Vec::new();
        for _ in 0..2 {
            let batch = task.generate_shuffled(n, &mut r).unwrap();
            trace.extend(run_round(&mut state, &batch).unwrap().trace);
        }
        check_message_order(&trace).unwrap();
        check_privacy_boundary(&trace, &cfg.mech).unwrap();
    }
}

#[test]
fn single_member_full_mask_cutmix_is_dp_sl() {
    let cfg = MechanismConfig {
        sigma_s_sq: 0.3,
        sigma_y_sq: 0.2,
        ..MechanismConfig::noiseless()
    };
    let mut r = RngStream::keyed(3, 0, Role::Oracle, 0);
    let s = SmashedData::new((0..24).map(|_| r.random::<f64>()).collect(), 8, 3, 1.0).unwrap();
    let y = OneHotLabel::new(1, 2).unwrap();
    let a = dp_sl(&s, &y, &cfg, &mut RngStream::keyed(9, 1, Role::Client, 0)).unwrap();
    let b = dp_cutmix(
        std::slice::from_ref(&s),
        std::slice::from_ref(&y),
        &[PatchMask::full(8)],
        &cfg,
        &mut RngStream::keyed(9, 1, Role::Client, 0),
    )
    .unwrap();
    assert_eq!(a.smashed, b.smashed);
    assert_eq!(a.label, b.label);
}

#[test]
fn uniform_groups_shrink_budgets_with_k() {
    let base = AccountantParams::reference(1, 1.0, 1.0);
    for mech in [Mechanism::DpMixSl, Mechanism::DpCutMixSl] {
        let eps: Vec<f64> = (1..=10)
            .map(|k| rdp_budget(&base.with_uniform_group(k), mech).unwrap().epsilon)
            .collect();
        assert!(eps.windows(2).all(|w| w[1] < w[0]), "{mech}: {eps:?}");
    }
}
