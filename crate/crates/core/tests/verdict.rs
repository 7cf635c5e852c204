//! End-to-end persistence verdicts on the built-in scenarios.

use holomon::builtin::{
    build_example1, build_example2, verify_appendix, Example1Config, Example2Config,
};
use holomon::fields::hypothesis_suite;
use holomon::persistence::{persistence_verdict, AnalysisConfig, Verdict};
use holomon::report::PersistenceReportJson;
use holomon::transport::lift_loop;

fn config() -> AnalysisConfig<f64> {
    AnalysisConfig {
        samples: 60,
        ..Default::default()
    }
}

#[test]
fn equal_coupling_persists() {
    let scn = build_example2(&Example2Config::default().with_b(1.0, 1.0, 1.0)).unwrap();
    let report = persistence_verdict(&scn, &config()).unwrap();
    assert_eq!(report.verdict, Verdict::Persists);
    assert!(!report.corollary1_applied);
    // sections are z -> b z for each vertical cycle
    for c in &report.per_cycle {
        if c.label == "eta4" {
            assert!(c.identity);
            continue;
        }
        let b = c.section.as_ref().expect("regular section");
        assert!((b[(0, 0)] - 1.0).abs() < 1e-9, "{}: B = {}", c.label, b[(0, 0)]);
    }
    for o in &report.compatibility {
        assert!(o.discrepancy < 1e-9);
    }
    assert!(report.section_checks.iter().all(|s| s.passed));
    let spectrum = report.spectrum.as_ref().unwrap();
    assert!(spectrum.exact);
    // closest approach |kappa - 1|
    let kappa = (2.0 * std::f64::consts::PI).exp();
    assert!((spectrum.min_distance - (kappa - 1.0)).abs() / (kappa - 1.0) < 1e-6);
}

#[test]
fn mismatched_coupling_fails_compatibility() {
    let scn = build_example2(&Example2Config::default().with_b(1.0, 2.0, 1.0)).unwrap();
    let report = persistence_verdict(&scn, &config()).unwrap();
    assert_eq!(report.verdict, Verdict::FailsCompatibility);
    // discrepancy |b1 - b2| = 1 on the west overlap
    let west = report
        .compatibility
        .iter()
        .find(|o| {
            (o.cycle_a == "eta1" && o.cycle_b == "eta2")
                || (o.cycle_a == "eta2" && o.cycle_b == "eta1")
        })
        .expect("west overlap compared");
    assert!(
        (west.discrepancy - 1.0).abs() < 1e-9,
        "discrepancy {}",
        west.discrepancy
    );
}

#[test]
fn sphere_persists_through_trivial_homotopy() {
    let scn = build_example1(&Example1Config::default()).unwrap();
    let report = persistence_verdict(&scn, &config()).unwrap();
    assert_eq!(report.verdict, Verdict::Persists);
    assert!(report.corollary1_applied);
    assert!(report.per_cycle.is_empty());
}

#[test]
fn hypothesis_suite_passes_on_both_builtins() {
    let cfg = config();
    for scn in [
        build_example1(&Example1Config::default()).unwrap(),
        build_example2(&Example2Config::default()).unwrap(),
    ] {
        let h = hypothesis_suite(&scn, &cfg).unwrap();
        assert!(h.all_ok(), "{}: {:?}", scn.name, h.failures);
        assert_eq!(h.expected_rank, 2);
        assert!(h.involutivity_max < 1e-7);
        assert!(h.transition_roundtrip_max < 1e-9);
    }
}

#[test]
fn verdict_is_monotone_in_the_cycle_set() {
    // once a subset of cycles fails, adding more never flips it back
    let base = build_example2(&Example2Config::default().with_b(1.0, 2.0, 1.0)).unwrap();
    let all = base.homology_generators.clone();
    let mut cfg = config();
    cfg.samples = 30;
    let mut failed = false;
    for upto in 1..=all.len() {
        let mut scn = base.clone();
        scn.homology_generators = all[..upto].to_vec();
        scn.cycle_regions
            .retain(|cycle, _| scn.homology_generators.contains(cycle));
        scn.intersecting_pairs.retain(|(a, b)| {
            scn.homology_generators.contains(a) && scn.homology_generators.contains(b)
        });
        let report = persistence_verdict(&scn, &cfg).unwrap();
        if failed {
            assert_ne!(
                report.verdict,
                Verdict::Persists,
                "adding cycles flipped a failure back to persists"
            );
        }
        if matches!(
            report.verdict,
            Verdict::FailsCompatibility | Verdict::FailsSpectrum
        ) {
            failed = true;
        }
    }
    assert!(failed, "the full cycle set must detect the mismatch");
}

#[test]
fn persisting_section_is_fixed_under_all_lifts() {
    // nonlinear confirmation of the linear prediction: 20 random points of
    // the reported section return to themselves around every declared loop
    let scn = build_example2(&Example2Config::default().with_b(0.5, 0.5, 0.5)).unwrap();
    let report = persistence_verdict(&scn, &config()).unwrap();
    assert_eq!(report.verdict, Verdict::Persists);
    let b = report.per_cycle[0]
        .section
        .as_ref()
        .expect("eta1 section")[(0, 0)];
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for label in &scn.homology_generators {
        let lp = scn.loop_by_label(label).unwrap();
        for _ in 0..20 {
            let lam: f64 = rng.random_range(-0.01..0.01);
            let w0 = [b * lam, lam];
            let end = lift_loop(&scn, lp, &w0, 1e-3).unwrap();
            assert!(
                (end[0] - w0[0]).abs() < 1e-5,
                "{label}: section point drifted by {}",
                (end[0] - w0[0]).abs()
            );
        }
    }
}

#[test]
fn appendix_coefficients_match_least_squares() {
    // constant q exercises the q' = 0 terms...
    let report = verify_appendix(&Example2Config::<f64>::default(), 100, 42, 1e-7).unwrap();
    assert!(report.all_passed, "{report:?}");
    // ...and a varying q exercises the derivative terms
    let cfg = Example2Config::<f64> {
        q_src: "2 + 0.5*sin(x)".into(),
        ..Default::default()
    };
    let report = verify_appendix(&cfg, 100, 43, 1e-7).unwrap();
    assert!(report.all_passed, "{report:?}");
    // also with unequal couplings: the parameter stays at zero, so the
    // closed forms are unchanged
    let cfg = Example2Config::<f64>::default().with_b(1.0, 2.0, 1.0);
    let report = verify_appendix(&cfg, 50, 44, 1e-7).unwrap();
    assert!(report.all_passed, "{report:?}");
}

#[test]
fn reports_are_deterministic() {
    let scn = build_example2(&Example2Config::default()).unwrap();
    let cfg = config();
    let a = PersistenceReportJson::new(&persistence_verdict(&scn, &cfg).unwrap()).to_json();
    let b = PersistenceReportJson::new(&persistence_verdict(&scn, &cfg).unwrap()).to_json();
    assert_eq!(a, b, "identical runs must serialize byte-identically");
    assert!(a.contains("\"verdict\": \"persists\""));
}

#[test]
fn scenario_roundtrips_through_json() {
    let scn = build_example2(&Example2Config::default()).unwrap();
    let text = scn.to_json();
    let back = holomon::scenario::Scenario::<f64>::from_json(&text).unwrap();
    assert_eq!(back.name, scn.name);
    assert_eq!(back.loops.len(), scn.loops.len());
    // second serialization is identical: printing is canonical
    assert_eq!(back.to_json(), text);
}
