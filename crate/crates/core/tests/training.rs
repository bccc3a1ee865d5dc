use std::fs;
use std::path::Path;

use multichart::atlas::MultiChartFlow;
use multichart::checkpoint::*;
use multichart::config::{preset, ExperimentConfig, PRESET_NAMES};
use multichart::datasets::build_dataset;
use multichart::nn::ParamGroup;
use multichart::training::{recon_loss, train, CheckpointSink};
use multichart::Error;
use ndarray::Array2;

const TINY: &str = include_str!("fixtures/tiny.toml");

fn tiny(recon: usize, ml: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml(TINY).unwrap();
    c.train.recon_epochs = recon;
    c.train.ml_epochs = ml;
    c
}

fn data(c: &ExperimentConfig) -> (Array2<f64>, Array2<f64>) {
    let d = build_dataset("tiny", &c.dataset.source, c.dataset.n_train, c.dataset.n_val, c.dataset.seed).unwrap();
    (d.train, d.val)
}

fn run(c: &ExperimentConfig, dir: &Path) -> MultiChartFlow {
    let (tr, va) = data(c);
    let mut m = MultiChartFlow::for_data(&c.model, &tr, c.train.seed).unwrap();
    let sink = CheckpointSink { dir: dir.to_path_buf(), experiment: c.clone() };
    train(&mut m, &tr, &va, &c.train, Some(&sink)).unwrap();
    m
}

#[test]
fn each_phase_only_moves_its_own_groups() {
    let c = tiny(3, 0);
    let (tr, va) = data(&c);
    let init = MultiChartFlow::for_data(&c.model, &tr, c.train.seed).unwrap();
    let mut m = init.clone();
    train(&mut m, &tr, &va, &c.train, None).unwrap();
    assert!(m.store.group_bits_equal(&init.store, ParamGroup::BaseFlow));
    assert!(m.store.group_bits_equal(&init.store, ParamGroup::Fixed));
    assert!(!m.store.group_bits_equal(&init.store, ParamGroup::ChartFlow));
    assert!(!m.store.group_bits_equal(&init.store, ParamGroup::Embeddings));

    let after_recon = m.clone();
    let ml = tiny(0, 3);
    train(&mut m, &tr, &va, &ml.train, None).unwrap();
    for g in [ParamGroup::ChartFlow, ParamGroup::Embeddings, ParamGroup::Fixed] {
        assert!(m.store.group_bits_equal(&after_recon.store, g), "{g:?} moved during ml");
    }
    assert!(!m.store.group_bits_equal(&after_recon.store, ParamGroup::BaseFlow));
}

#[test]
fn seeded_runs_write_identical_checkpoints() {
    let c = tiny(2, 2);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(&c, a.path());
    run(&c, b.path());
    for f in [CONFIG_FILE, PARAMS_FILE, OPTIMIZER_FILE, RNG_FILE, METRICS_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let mut other = c.clone();
    other.train.seed += 1;
    let d = tempfile::tempdir().unwrap();
    run(&other, d.path());
    assert_ne!(fs::read(a.path().join(PARAMS_FILE)).unwrap(), fs::read(d.path().join(PARAMS_FILE)).unwrap());
}

#[test]
fn reconstruction_loss_goes_down() {
    let mut c = tiny(20, 0);
    c.train.learning_rate = 1e-2;
    let (tr, va) = data(&c);
    let init = MultiChartFlow::for_data(&c.model, &tr, 0).unwrap();
    let mut m = init.clone();
    let state = train(&mut m, &tr, &va, &c.train, None).unwrap();
    let before = recon_loss(&init, &va, 0.0).unwrap().1.mse;
    let after = recon_loss(&m, &va, 0.0).unwrap().1.mse;
    assert!(after < 0.7 * before, "{before} -> {after}");
    assert_eq!(state.metrics.len(), 20);
    assert_eq!(state.best_val_recon, state.metrics.iter().map(|r| r.val_metric).reduce(f64::min));
}

#[test]
fn zero_epoch_run_saves_the_initial_model() {
    let c = tiny(0, 0);
    let dir = tempfile::tempdir().unwrap();
    let m = run(&c, dir.path());
    let loaded = load_checkpoint(dir.path()).unwrap();
    for g in [ParamGroup::ChartFlow, ParamGroup::Embeddings, ParamGroup::BaseFlow, ParamGroup::Fixed] {
        assert!(loaded.model.store.group_bits_equal(&m.store, g));
    }
    assert!(loaded.metrics.is_empty());
    assert_eq!(loaded.config, c);
}

#[test]
fn non_finite_data_aborts_with_a_checkpoint() {
    let c = tiny(2, 0);
    let (mut tr, va) = data(&c);
    tr.fill(f64::NAN);
    let mut m = MultiChartFlow::for_data(&c.model, &va, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let sink = CheckpointSink { dir: dir.path().to_path_buf(), experiment: c.clone() };
    let err = train(&mut m, &tr, &va, &c.train, Some(&sink)).unwrap_err();
    assert!(matches!(err, Error::TrainingDiverged { phase: "recon", consecutive: 5, .. }), "{err}");
    assert!(load_checkpoint(dir.path()).is_ok());
}

#[test]
fn mismatched_config_hash_is_refused() {
    let c = tiny(0, 0);
    let dir = tempfile::tempdir().unwrap();
    run(&c, dir.path());
    let mut other = c.clone();
    other.model.hidden_units = 9;
    let bytes = fs::read(dir.path().join(PARAMS_FILE)).unwrap();
    assert!(matches!(load_model(&other, &bytes), Err(Error::ConfigHashMismatch { .. })));
    // Training-only changes keep the hash.
    let mut retrain = c.clone();
    retrain.train.learning_rate = 0.5;
    assert!(load_model(&retrain, &bytes).is_ok());
}

#[test]
fn presets_round_trip_and_validate() {
    assert_eq!(PRESET_NAMES.len(), 14);
    for name in PRESET_NAMES {
        let c = preset(name).unwrap();
        let again = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, again, "{name}");
        if let Some(full) = name.strip_suffix("_desk") {
            assert_eq!(preset(full).unwrap().model, c.model, "{name} must share the full preset's model");
        }
    }
    assert!(preset("nope").is_err());
}

#[test]
fn invalid_configs_list_every_problem() {
    let text = TINY.replace("batch_size = 64", "batch_size = 0").replace("charts = 2", "charts = 0");
    match ExperimentConfig::from_toml(&text) {
        Err(Error::InvalidConfig(errs)) => assert!(errs.len() >= 2, "{errs:?}"),
        other => panic!("{other:?}"),
    }
    let unknown = TINY.replace("seed = 11", "seed = 11\nmomentum = 0.9");
    assert!(ExperimentConfig::from_toml(&unknown).is_err());
}

#[test]
fn reconstruction_gradients_match_finite_differences() {
    use multichart::atlas::CHART_GROUPS;
    use multichart::nn::{Bound, OutputInit};
    use multichart::tape::Tape;
    use multichart::training::{ml_loss, ml_loss_on_tape, recon_loss_on_tape};

    let c = tiny(0, 0);
    let (tr, _) = data(&c);
    let x = tr.slice(ndarray::s![..32, ..]).to_owned();
    let m = MultiChartFlow::new(&c.model, None, OutputInit::Random(0.3), 5).unwrap();
    let charts: Vec<usize> = (0..x.nrows()).map(|i| i % 2).collect();
    let loss_at = |m: &MultiChartFlow| {
        let tape = Tape::new();
        let b = Bound::frozen(&tape, &m.store);
        recon_loss_on_tape(m, &b, &x, &charts, 0.5).unwrap().0.value()[[0, 0]]
    };
    let tape = Tape::new();
    let bound = Bound::new(&tape, &m.store, &CHART_GROUPS);
    let (loss, _) = recon_loss_on_tape(&m, &bound, &x, &charts, 0.5).unwrap();
    let grads = bound.param_grads(&tape.backward(loss, Array2::ones((1, 1))));
    let u = m.encode(&x).unwrap().u;
    let ml_tape = Tape::new();
    let ml_bound = Bound::new(&ml_tape, &m.store, &[ParamGroup::BaseFlow]);
    let ml = ml_loss_on_tape(&m, &ml_bound, &u).unwrap();
    let ml_grads = ml_bound.param_grads(&ml_tape.backward(ml, Array2::ones((1, 1))));
    let h = 1e-6;
    let mut checked = 0;
    for (i, p) in m.store.params().iter().enumerate() {
        let (g, f): (&Option<Array2<f64>>, Box<dyn Fn(&MultiChartFlow) -> f64>) = match p.group {
            ParamGroup::ChartFlow | ParamGroup::Embeddings => (&grads[i], Box::new(loss_at)),
            ParamGroup::BaseFlow => (&ml_grads[i], Box::new(|m: &MultiChartFlow| ml_loss(m, &u).unwrap())),
            ParamGroup::Fixed => continue,
        };
        let g = g.as_ref().unwrap_or_else(|| panic!("no gradient for {}", p.name));
        for k in [0, p.value.len() / 2, p.value.len() - 1] {
            let (r, col) = (k / p.value.ncols(), k % p.value.ncols());
            let mut plus = m.clone();
            plus.store.params_mut()[i].value[[r, col]] += h;
            let mut minus = m.clone();
            minus.store.params_mut()[i].value[[r, col]] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let an = g[[r, col]];
            assert!((fd - an).abs() < 1e-5 * (1.0 + an.abs()), "{}[{r},{col}]: fd {fd} vs {an}", p.name);
            checked += 1;
        }
    }
    assert!(checked > 30);
}

#[test]
fn fixed_batch_overfits_in_twenty_steps() {
    use multichart::config::OptimizerKind;
    use multichart::optim::Adam;
    use multichart::training::{ml_step, recon_step};

    let c = tiny(0, 0);
    let (tr, _) = data(&c);
    let x = tr.slice(ndarray::s![..64, ..]).to_owned();
    let mut m = MultiChartFlow::for_data(&c.model, &tr, 1).unwrap();
    let mut opt = Adam::new(OptimizerKind::Adam, 0.0, m.store.len());
    let mut losses = Vec::new();
    for _ in 0..20 {
        let (loss, grads, _) = recon_step(&m, &x, 0.0).unwrap();
        losses.push(loss);
        opt.update(&mut m.store, &grads, 1e-3).unwrap();
    }
    assert!(losses[19] < losses[0], "{losses:?}");

    let u = m.encode(&x).unwrap().u;
    let before = m.clone();
    let mut opt = Adam::new(OptimizerKind::Adam, 0.0, m.store.len());
    let (first, grads) = ml_step(&m, &u).unwrap();
    opt.update(&mut m.store, &grads, 1e-3).unwrap();
    for g in [ParamGroup::ChartFlow, ParamGroup::Embeddings, ParamGroup::Fixed] {
        assert!(m.store.group_bits_equal(&before.store, g), "{g:?} moved in one ml step");
    }
    for _ in 0..19 {
        let (_, grads) = ml_step(&m, &u).unwrap();
        opt.update(&mut m.store, &grads, 1e-3).unwrap();
    }
    assert!(ml_step(&m, &u).unwrap().0 < first);
}
