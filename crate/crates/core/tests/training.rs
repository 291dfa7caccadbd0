use spatiotemporal_reid::config::{self, RunConfig};
use spatiotemporal_reid::gridfile::{self, LabeledVideo};
use spatiotemporal_reid::model::Hyperparams;
use spatiotemporal_reid::synth::{make_synthetic, SynthSpec};
use spatiotemporal_reid::train::{self, TrainData};
use spatiotemporal_reid::{checkpoint, Error};

// Smoke check, seed-fixed: a small step on clean data should not raise the epoch loss.
#[test]
fn loss_does_not_rise_over_five_epochs_on_clean_data() {
    let spec = SynthSpec {
        noise: 0.0,
        ..SynthSpec::default()
    };
    let data: TrainData = make_synthetic(&spec, 1).unwrap().into();
    let hyper = Hyperparams {
        lr: 0.01,
        lr_final: 0.01,
        epochs: 5,
        ..Hyperparams::default()
    };
    let run = train::train(&hyper, &data, |_| {}).unwrap();
    assert!(run.divergence.is_none());
    let losses: Vec<f64> = run.metrics.iter().map(|m| m.loss).collect();
    assert_eq!(losses.len(), 5);
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "{losses:?}");
    }
}

fn small_config(extra: &str) -> RunConfig {
    let text = format!(
        "epochs = 2\nfeature_dim = 8\nsynth.feature_dim = 8\nsynth.identities = 3\n\
         synth.test_identities = 3\nsynth.train_videos = 2\n{extra}"
    );
    config::parse_config(&text).unwrap()
}

#[test]
fn data_directory_gives_the_same_run_as_generated_data() {
    let cfg = small_config("");
    let generated = TrainData::from_config(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let splits: [(&str, &[LabeledVideo]); 3] = [
        ("train", &generated.train),
        ("gallery", &generated.gallery),
        ("probe", &generated.probe),
    ];
    for (name, videos) in splits {
        gridfile::write_split(&dir.path().join(name), videos).unwrap();
    }
    let from_disk = TrainData::from_config(&RunConfig {
        data: Some(dir.path().to_path_buf()),
        ..cfg.clone()
    })
    .unwrap();
    assert_eq!(from_disk, generated);

    let a = train::train(&cfg.hyper, &generated, |_| {}).unwrap();
    let b = train::train(&cfg.hyper, &from_disk, |_| {}).unwrap();
    assert_eq!(
        checkpoint::save(&a.params, &a.state).unwrap(),
        checkpoint::save(&b.params, &b.state).unwrap()
    );
}

#[test]
fn missing_split_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        data: Some(dir.path().to_path_buf()),
        ..RunConfig::default()
    };
    assert!(matches!(TrainData::from_config(&cfg), Err(Error::Io(_))));
}

#[test]
fn metrics_log_starts_with_the_parsable_echo() {
    let cfg = small_config("seed = 3\npenalty = Qprime\n");
    let data = TrainData::from_config(&cfg).unwrap();
    let run = train::train(&cfg.hyper, &data, |_| {}).unwrap();
    let csv = train::metrics_csv(&config::render_header(&config::echo(&cfg)), &run.metrics);

    let header: String = csv
        .lines()
        .take_while(|l| l.starts_with("# "))
        .map(|l| format!("{}\n", &l[2..]))
        .collect();
    let mut reparsed = config::parse_config(&header).unwrap();
    // `half` is echoed as the epoch it resolves to.
    assert_eq!(reparsed.hyper.drop_epoch(), cfg.hyper.drop_epoch());
    reparsed.hyper.lr_drop_epoch = cfg.hyper.lr_drop_epoch;
    assert_eq!(reparsed, cfg);

    let body: Vec<&str> = csv.lines().skip_while(|l| l.starts_with("# ")).collect();
    assert_eq!(body[0], train::METRICS_COLUMNS);
    assert_eq!(body.len(), 1 + cfg.hyper.epochs);
    assert!(body[1].starts_with("1,"));
}
