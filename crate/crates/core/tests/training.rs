use adnas::checkpoint;
use adnas::config::SearchConfig;
use adnas::data::Dataset;
use adnas::error::Error;
use adnas::search::{self, Detector};
use adnas::search_space::MsmSet;

fn small() -> SearchConfig {
    SearchConfig {
        epochs_search: 2,
        epochs_train: 2,
        batch: 4,
        channels: 2,
        image_size: 8,
        n_train: 8,
        n_test: 8,
        k_nodes: 1,
        ..SearchConfig::default()
    }
}

#[test]
fn frozen_architecture_stays_put() {
    let cfg = SearchConfig { lr_arch: 0.0, ..small() };
    let data = Dataset::generate(&cfg.data_config(), 1).unwrap();
    let start = search::bilevel_search(&SearchConfig { epochs_search: 0, ..cfg.clone() }, &data, MsmSet::FULL, 1).unwrap();
    let end = search::bilevel_search(&cfg, &data, MsmSet::FULL, 1).unwrap();
    assert_eq!(start.arch, end.arch);
    assert_ne!(start.weights, end.weights);
}

#[test]
fn zero_learning_rates_give_a_flat_history() {
    // Without online defects every epoch sees the same inputs.
    let cfg = SearchConfig {
        lr_w: 0.0,
        lr_arch: 0.0,
        keep_normal: 1.0,
        epochs_search: 3,
        ..small()
    };
    let data = Dataset::generate(&cfg.data_config(), 2).unwrap();
    let h = search::bilevel_search(&cfg, &data, MsmSet::FULL, 2).unwrap().history;
    let first = &h.epochs[0];
    for e in &h.epochs[1..] {
        assert!((e.train_loss - first.train_loss).abs() <= 1e-12 * first.train_loss.abs());
        assert!((e.val_loss - first.val_loss).abs() <= 1e-12 * first.val_loss.abs());
        assert_eq!(e.choices, first.choices);
    }
}

#[test]
fn short_search_lowers_the_smoothed_loss() {
    let cfg = SearchConfig {
        epochs_search: 10,
        n_train: 32,
        image_size: 16,
        channels: 4,
        ..small()
    };
    let data = Dataset::generate(&cfg.data_config(), 3).unwrap();
    let h = search::bilevel_search(&cfg, &data, MsmSet::FULL, 3).unwrap().history;
    let losses: Vec<f64> = h.epochs.iter().map(|e| e.train_loss).collect();
    assert!(losses.iter().all(|l| l.is_finite()));
    let smooth: Vec<f64> = losses.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    assert!(
        smooth.last().unwrap() < smooth.first().unwrap(),
        "moving average did not drop: {smooth:?}"
    );
}

#[test]
fn training_is_deterministic() {
    let cfg = small();
    let data = Dataset::generate(&cfg.data_config(), 4).unwrap();
    let g = search::bilevel_search(&cfg, &data, MsmSet::FULL, 4).unwrap().genotype;
    let a = search::train_fixed(&g, &cfg, &data, 4).unwrap();
    let b = search::train_fixed(&g, &cfg, &data, 4).unwrap();
    assert_eq!(checkpoint::to_bytes(&a), checkpoint::to_bytes(&b));
    assert_eq!(a.losses, b.losses);
}

#[test]
fn checkpoint_round_trip_preserves_the_detector() {
    let cfg = small();
    let data = Dataset::generate(&cfg.data_config(), 5).unwrap();
    let g = search::bilevel_search(&cfg, &data, "early,late".parse::<MsmSet>().unwrap(), 5).unwrap().genotype;
    let state = search::train_fixed(&g, &cfg, &data, 5).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    checkpoint::save(&path, &state).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(checkpoint::to_bytes(&back), checkpoint::to_bytes(&state));
    assert_eq!(back.genotype, state.genotype);

    let m1 = search::evaluate(&Detector::new(&state).unwrap(), &data.test, cfg.fpr_cap).unwrap();
    let m2 = search::evaluate(&Detector::new(&back).unwrap(), &data.test, cfg.fpr_cap).unwrap();
    assert_eq!(m1, m2);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let cfg = small();
    let data = Dataset::generate(&cfg.data_config(), 6).unwrap();
    let g = search::bilevel_search(&cfg, &data, MsmSet::FULL, 6).unwrap().genotype;
    let bytes = checkpoint::to_bytes(&search::train_fixed(&g, &cfg, &data, 6).unwrap());
    for cut in [0, 4, bytes.len() / 2, bytes.len() - 1] {
        assert!(checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    flipped[0] ^= 0xff;
    assert!(checkpoint::from_bytes(&flipped).is_err());
    let missing = checkpoint::load(std::path::Path::new("/nonexistent/model.bin"));
    assert!(matches!(missing, Err(Error::Io(_))));
}
