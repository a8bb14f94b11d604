use adnas::planted::{run_planted, teacher_genotype, PlantedConfig, PLANTED_OP};
use adnas::genotype::MsmKind;
use adnas::params::ParamStore;
use adnas::search_space::Mfn;

#[test]
fn teacher_routes_modality_b_through_the_middle_module() {
    let cfg = PlantedConfig::default();
    let net = adnas::pipeline::NetConfig {
        image_size: cfg.image_size,
        channels: cfg.channels,
        k: 1,
        msms: cfg.msms,
    };
    let (mut w, mut a) = (ParamStore::new(), ParamStore::new());
    let mfn = Mfn::assemble(&net.mfn_config(), &mut w, &mut a, &mut adnas::rng::keyed(0, "t", &[])).unwrap();
    let g = teacher_genotype(&mfn).unwrap();
    let middle = g.msm_middle.as_ref().unwrap();
    assert!(middle.inputs.iter().all(|&i| middle.pool[i].starts_with("b.middle")));
    let late = g.msm_late.as_ref().unwrap();
    let picked: Vec<&str> = late.inputs.iter().map(|&i| late.pool[i].as_str()).collect();
    assert_eq!(picked, ["a.late", MsmKind::Middle.output_name().as_str()]);
    assert_eq!(late.nodes[0].op, PLANTED_OP);
}

#[test]
fn short_run_recovers_and_repeats() {
    let cfg = PlantedConfig {
        epochs: 40,
        ..PlantedConfig::default()
    };
    let a = run_planted(&cfg, 1).unwrap();
    let b = run_planted(&cfg, 1).unwrap();
    assert!(a.recovered(), "{:?}", a.genotype.msm_late);
    assert_eq!(a.genotype, b.genotype);
    assert_eq!(a.final_val_loss, b.final_val_loss);
    let first = a.history.epochs[0].val_loss;
    assert!(a.final_val_loss < first / 10.0);
}

#[test]
fn planted_needs_middle_and_late_modules() {
    let cfg = PlantedConfig {
        msms: "early,late".parse().unwrap(),
        ..PlantedConfig::default()
    };
    assert!(run_planted(&cfg, 0).is_err());
}
