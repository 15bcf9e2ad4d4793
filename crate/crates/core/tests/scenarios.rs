use dossier_core::sim::{run_key_rotation_race, run_scenario, Mitigation, BUILTIN};

fn show(r: &dossier_core::sim::ScenarioReport) -> String {
    let mut out = String::new();
    for a in r.assertions.iter().filter(|a| !a.passed) {
        out.push_str(&format!("  line {}: {} ({})\n", a.line, a.text, a.detail));
    }
    for l in &r.leaks {
        out.push_str(&format!("  leak {l:?}\n"));
    }
    out
}

#[test]
fn every_builtin_passes_under_three_seeds() {
    for (name, _) in BUILTIN {
        for seed in [1, 2, 3] {
            let r = run_scenario(name, seed).unwrap();
            assert!(r.passed, "{name} seed {seed}:\n{}", show(&r));
        }
    }
}

#[test]
fn reports_are_deterministic() {
    for (name, _) in BUILTIN {
        assert_eq!(run_scenario(name, 9).unwrap(), run_scenario(name, 9).unwrap(), "{name}");
    }
}

#[test]
fn rotation_race_needs_a_mitigation() {
    for seed in [1, 2, 3] {
        assert!(run_key_rotation_race(seed, Mitigation::None).unwrap().passed);
        assert!(run_key_rotation_race(seed, Mitigation::Retention).unwrap().passed);
        assert!(run_key_rotation_race(seed, Mitigation::Resend).unwrap().passed);
    }
}
