use proptest::prelude::*;

use fedcov::admm::AdmmConfig;
use fedcov::federation::{
    audit_privacy, expected_message_count, AuditContext, CenterSite, InProcessTransport, Pipeline, PipelineConfig,
};
use fedcov::fpca::{aggregate, local_eigendecomposition, ComponentSelection};
use fedcov::oracle::principal_angles;
use fedcov::synth::{generate, split_rows, SynthSpec};
use fedcov::CenterId;

fn spec(c: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        n_total: 12 * c,
        n_features: 10,
        q: 3,
        n_centers: c,
        seed,
        ..SynthSpec::default()
    }
}

fn ids(c: usize) -> Vec<CenterId> {
    (0..c as u32).map(CenterId).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn registration_order_does_not_change_results(c in 2usize..6, seed in 0u64..1000, rot in 0usize..6) {
        let d = generate(&spec(c, seed)).unwrap();
        let cfg = PipelineConfig::default();
        let mut sites: Vec<CenterSite> = d.sites();
        let a = Pipeline::new(cfg.clone()).run(sites.clone(), &mut InProcessTransport::new(&ids(c))).unwrap();
        sites.rotate_left(rot % c);
        let b = Pipeline::new(cfg).run(sites, &mut InProcessTransport::new(&ids(c))).unwrap();
        prop_assert_eq!(a.result.to_bytes(), b.result.to_bytes());
    }

    #[test]
    fn message_count_and_audit_hold(c in 1usize..6, k in 1usize..6, share in any::<bool>(), seed in 0u64..1000) {
        let d = generate(&spec(c, seed)).unwrap();
        let cfg = PipelineConfig {
            admm: AdmmConfig { iterations: k, ..AdmmConfig::default() },
            share_scores: share,
            m_components: Some(2),
            ..PipelineConfig::default()
        };
        let run = Pipeline::new(cfg).run(d.sites(), &mut InProcessTransport::new(&ids(c))).unwrap();
        prop_assert_eq!(run.transcript.len(), expected_message_count(c, k, share));
        prop_assert_eq!(run.result.admm_rounds(), k);
        let ctx = AuditContext { center_sizes: vec![12; c], n_features: 10, n_covariates: 3, score_cap: 16 };
        let report = audit_privacy(&run.transcript, &ctx);
        prop_assert!(report.passed(), "{}", report.render());
    }

    #[test]
    fn full_rank_sharing_is_partition_invariant(c in 1usize..8, seed in 0u64..1000) {
        let d = generate(&SynthSpec { n_total: 56, n_features: 9, q: 2, n_centers: 1, seed, ..SynthSpec::default() }).unwrap();
        let x = d.centers[0].x().clone();
        let whole = aggregate(&[local_eigendecomposition(&x, 1.0).unwrap()], ComponentSelection::Count(3)).unwrap();
        let packs: Vec<_> = split_rows(&x, c).iter().map(|p| local_eigendecomposition(p, 1.0).unwrap()).collect();
        let parts = aggregate(&packs, ComponentSelection::Count(3)).unwrap();
        for j in 0..3 {
            prop_assert!((whole.eigenvalues[j] - parts.eigenvalues[j]).abs() <= 1e-9 * whole.eigenvalues[0]);
        }
        let angles = principal_angles(&whole.components, &parts.components).unwrap();
        prop_assert!(angles.iter().all(|a| *a < 1e-6));
    }

    #[test]
    fn principal_angles_are_symmetric(seed in 0u64..1000) {
        let d = generate(&SynthSpec { n_total: 20, n_features: 8, q: 2, n_centers: 1, seed, ..SynthSpec::default() }).unwrap();
        let a = d.centers[0].x().columns(0, 3).into_owned().qr().q();
        let b = d.centers[0].x().columns(3, 3).into_owned().qr().q();
        let ab = principal_angles(&a, &b).unwrap();
        let ba = principal_angles(&b, &a).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            prop_assert!((x - y).abs() < 1e-10);
            prop_assert!((0.0..=std::f64::consts::FRAC_PI_2 + 1e-12).contains(x));
        }
    }
}
