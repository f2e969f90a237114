//! Every attack scenario, and every tamper class, across many seeds.

use trusted_server::scenario::{run_scenario, tampered_seal, Outcome, Scenario, TamperClass};
use trusted_server::sealing::ServerConfig;
use trusted_server::verifier::verify_seal;

fn cfg() -> ServerConfig {
    ServerConfig { kdf_iterations: 64, ..ServerConfig::default() }
}

#[test]
fn scenarios_hold_over_twenty_seeds() {
    for s in Scenario::ALL {
        for seed in 0..20 {
            let r = run_scenario(s, seed, &cfg()).unwrap();
            assert!(r.matches(), "{r}");
        }
    }
}

#[test]
fn data_is_exposed_only_by_single_stage_or_skipped_erase() {
    for s in Scenario::ALL {
        let r = run_scenario(s, 99, &cfg()).unwrap();
        // a skipped host erase leaves the host bootable, but the verifier catches it
        let exposed = matches!(s, Scenario::HeaderRestoreSingle | Scenario::SkipErase);
        assert_eq!(r.protected_data_readable, exposed, "{r}");
        if r.verifier_flagged.is_some() {
            assert_eq!(r.observed, Outcome::VerifierFlags);
        }
    }
}

#[test]
fn tamper_classes_are_named_for_many_seeds() {
    for class in TamperClass::ALL {
        for seed in 0..5 {
            let t = tampered_seal(&cfg(), 500 + seed, class).unwrap();
            let v = verify_seal(&t.pre, &t.bundle, &t.profile).unwrap();
            assert!(!v.passed());
            assert!(v.errors().any(|f| f.subject == class.artifact()), "{class:?} seed {seed}:\n{v}");
        }
    }
}
