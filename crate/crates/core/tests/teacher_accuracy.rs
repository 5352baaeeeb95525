use intact::config::ExperimentConfig;
use intact::evalreport::{evaluate, EvalCondition};
use intact::metateacher::train_teacher;
use intact::perturb::PerturbationSpec;
use intact::pointcloud::{make_dataset, Split};

/// Meta-trained teacher at the shipped default configuration.
#[test]
fn default_teacher_reaches_80_percent_clean() {
    let cfg = ExperimentConfig::load(None, &[]).unwrap();
    let ds = make_dataset(&cfg.dataset_config().unwrap()).unwrap();
    let (teacher, log) = train_teacher(
        &cfg.teacher_config(),
        &ds.split(Split::Train),
        ds.num_classes(),
        intact::rng::derive_seed(cfg.seed, "teacher", &[]),
        &cfg.hash(),
    )
    .unwrap();
    assert_eq!(log.len(), cfg.teacher.meta_iterations);
    let clean = EvalCondition::new("clean", PerturbationSpec::clean(), 0);
    let acc = evaluate(&teacher, &ds.split(Split::Test), &clean, 1).unwrap();
    println!("teacher clean test accuracy {:.2}%", acc.mean);
    assert!(acc.mean >= 80.0, "{}", acc.mean);
}
