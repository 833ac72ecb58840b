use std::path::Path;

use shiftcalc_cli::config::{ExperimentConfig, ModelSpec};
use shiftcalc_cli::experiments::{info, CATALOG};

fn shipped() -> Vec<(String, ExperimentConfig)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .map(|p| (p.file_stem().unwrap().to_string_lossy().into_owned(), ExperimentConfig::load(&p).unwrap()))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn one_shipped_config_per_experiment() {
    let cfgs = shipped();
    assert_eq!(cfgs.len(), CATALOG.len());
    for (stem, cfg) in &cfgs {
        assert_eq!(stem, &cfg.experiment);
        assert!(info(&cfg.experiment).is_some(), "{stem} not in the catalog");
    }
}

#[test]
fn catalog_ids_are_unique() {
    let mut ids: Vec<_> = CATALOG.iter().map(|e| e.id).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 10);
}

#[test]
fn hash_ignores_spelling_but_not_content() {
    let text = "experiment = \"rstar\"\n[mc]\nreplicas = 1000\nseed = 7\n";
    let a = ExperimentConfig::parse(text, false).unwrap();
    let json = r#"{"mc": {"seed": 7, "replicas": 1000}, "experiment": "rstar"}"#;
    let b = ExperimentConfig::parse(json, true).unwrap();
    assert_eq!(a.hash(), b.hash());
    let c = ExperimentConfig::parse(&text.replace("seed = 7", "seed = 8"), false).unwrap();
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn kick_rule_needs_kappa() {
    let spec = ModelSpec::Collision { particles: 2, eps: 0.1, refractory: 0.05, rule: Default::default(), kappa: Some(0.5) };
    assert!(spec.build(0).is_err());
    let toml = "experiment = \"verify-cocycle\"\n[mc]\nreplicas = 1000\nseed = 1\n[[models]]\nkind = \"collision\"\neps = 0.1\nrule = \"kick\"\n";
    let cfg = ExperimentConfig::parse(toml, false).unwrap();
    let err = cfg.models[0].build(0).err().unwrap();
    assert!(err.to_string().contains("kappa"));
}

#[test]
fn collision_dimension_follows_particle_count() {
    let spec = ModelSpec::Collision { particles: 4, eps: 0.1, refractory: 0.05, rule: Default::default(), kappa: None };
    assert_eq!(spec.dim(), 8);
    assert_eq!(spec.build(0).unwrap().dim(), Some(8));
}
