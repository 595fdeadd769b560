use hmnet::train::{train_demo, velocity_dataset, TrainConfig};

fn short() -> TrainConfig {
    TrainConfig {
        iterations: 40,
        smooth: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_same_trajectory() {
    let a = train_demo(&short()).unwrap();
    let b = train_demo(&short()).unwrap();
    assert!(a.losses.iter().zip(&b.losses).all(|(x, y)| x.to_bits() == y.to_bits()));
    for (p, q) in a.model.store.entries().iter().zip(b.model.store.entries()) {
        assert!(p.value.bit_eq(&q.value), "{}", p.name);
    }
    let c = train_demo(&TrainConfig { seed: 1, ..short() }).unwrap();
    assert_ne!(a.losses, c.losses);
}

#[test]
fn short_run_already_reduces_loss() {
    let r = train_demo(&short()).unwrap();
    assert_eq!(r.losses.len(), 40);
    assert!(r.final_smoothed() < r.initial_smoothed());
    assert!(r.to_csv().starts_with("iter,loss,smoothed\n"));
}

#[test]
fn dataset_covers_the_velocity_range_with_fixed_length_sequences() {
    let cfg = TrainConfig::default();
    let data = velocity_dataset(&cfg).unwrap();
    assert_eq!(data.len(), cfg.sequences);
    assert!(data.iter().all(|s| s.slices.len() == cfg.steps));
    assert!(data.windows(2).all(|w| w[0].vx < w[1].vx));
    assert!(data.iter().all(|s| (-1.0..=1.0).contains(&s.target)));
}

#[test]
fn bad_configs_are_rejected() {
    assert!(train_demo(&TrainConfig { iterations: 0, ..short() }).is_err());
    assert!(train_demo(&TrainConfig { lr: f64::NAN, ..short() }).is_err());
    assert!(train_demo(&TrainConfig { variant: "B3-tiny".into(), ..short() }).is_err());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
}
