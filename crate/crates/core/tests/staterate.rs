use staterate_core::baselines::{AdapterObservation, RateAdapter};
use staterate_core::harness::{simulate_trace, LinkOptions, SimulatedTrace};
use staterate_core::nn::ParamGroup;
use staterate_core::staterate::{
    finetune_online, train_offline, FeatureSequence, FinetuneConfig, OnlineConfig, ProberConfig, StateRateAdapter,
    StateRateModel, TrainConfig,
};
use staterate_core::sync::LabeledTrace;
use staterate_core::{EnvironmentSpec, Error, McsIndex, TrajectorySpec};

/// 500 frames of a slow radial flight in one environment.
fn toy_trace() -> SimulatedTrace {
    let env = EnvironmentSpec::preset("playground").unwrap();
    let traj = TrajectorySpec::constant_velocity(15.0, 1.0, 20.0, 2.5).with_seed(2);
    simulate_trace(&env, &traj, 200.0, &LinkOptions::default(), 2).unwrap()
}

fn toy_config(pred_epochs: usize) -> TrainConfig {
    TrainConfig {
        seed: 3,
        pred_epochs,
        eval_epochs: 2,
        ..TrainConfig::default()
    }
}

fn toy_model() -> (StateRateModel, LabeledTrace) {
    let trace = toy_trace().labeled();
    let (model, _) = train_offline(std::slice::from_ref(&trace), &toy_config(3)).unwrap();
    (model, trace)
}

fn bits(model: &StateRateModel, keep: impl Fn(ParamGroup) -> bool) -> Vec<u64> {
    model
        .pred
        .params
        .blocks()
        .iter()
        .filter(|b| keep(b.group))
        .flat_map(|b| b.data.iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn toy_dataset_is_learned_and_loss_falls() {
    let trace = toy_trace().labeled();
    assert!(trace.len() >= 500);
    let (_, report) = train_offline(&[trace], &toy_config(50)).unwrap();
    let best = report.pred.iter().map(|e| e.train_accuracy).fold(0.0, f64::max);
    assert!(best >= 0.95, "best training accuracy {best}");
    let losses: Vec<f64> = report.pred.iter().take(6).map(|e| e.train_loss).collect();
    let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 1, "first epochs' losses {losses:?}");
}

#[test]
fn retraining_with_same_seed_is_identical() {
    let (a, _) = toy_model();
    let (b, _) = toy_model();
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn empty_dataset_is_a_config_error() {
    let empty = LabeledTrace {
        environment: "playground".into(),
        metadata: serde_json::Value::Null,
        samples: Vec::new(),
    };
    assert!(matches!(train_offline(&[empty], &toy_config(1)), Err(Error::Config(_))));
}

#[test]
fn predict_is_pure_and_normalized() {
    let (model, trace) = toy_model();
    let s = &trace.samples[10];
    let input = model.featurize(&s.channel, &s.flight).unwrap();
    let state = model.zero_state();
    let (a, sa) = model.predict(&input, &state).unwrap();
    let (b, sb) = model.predict(&input, &state).unwrap();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    let sum: f64 = a.weights().iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);

    // A fresh state changes the forecast only through the state.
    let (c, _) = model.predict(&input, &sa).unwrap();
    let (d, _) = model.predict(&input, &model.zero_state()).unwrap();
    assert_eq!(d, a);
    assert_ne!(c, a);
}

#[test]
fn evaluate_is_stateless() {
    let (model, trace) = toy_model();
    let f = |i: usize| {
        let s = &trace.samples[i];
        model.featurize(&s.channel, &s.flight).unwrap()
    };
    let first = model.evaluate(&f(3)).unwrap();
    model.evaluate(&f(40)).unwrap();
    assert_eq!(model.evaluate(&f(3)).unwrap(), first);
}

#[test]
fn finetune_touches_only_the_classifier() {
    let (model, trace) = toy_model();
    let buffer: Vec<_> = trace.samples.iter().map(|s| (s.channel.clone(), s.flight)).collect();
    let (pred, report) = finetune_online(&model, &buffer, &FinetuneConfig::default()).unwrap();
    let mut tuned = model.clone();
    tuned.pred = pred;
    let frozen = |g| g != ParamGroup::Classifier;
    assert_eq!(bits(&model, frozen), bits(&tuned, frozen));
    assert_ne!(bits(&model, |g| g == ParamGroup::Classifier), bits(&tuned, |g| g == ParamGroup::Classifier));
    assert!(report.fc_change_norm > 0.0);
    assert_eq!(report.epoch_losses.len(), 5);
}

#[test]
fn empty_buffer_is_a_noop_with_diagnostic() {
    let (model, _) = toy_model();
    let (pred, report) = finetune_online(&model, &[], &FinetuneConfig::default()).unwrap();
    assert!(report.skipped.is_some());
    assert_eq!(report.fc_change_norm, 0.0);
    assert_eq!(pred.params, model.pred.params);
}

#[test]
fn checkpoint_round_trips_and_rejects_garbage() {
    let (model, _) = toy_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    model.save(&path).unwrap();
    let loaded = StateRateModel::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), model.to_bytes());

    let mut bytes = model.to_bytes();
    bytes.truncate(bytes.len() / 2);
    assert!(matches!(StateRateModel::from_bytes(&bytes, &path), Err(Error::Format { .. })));
    assert!(matches!(StateRateModel::from_bytes(b"nonsense", &path), Err(Error::Format { .. })));
}

fn replay(adapter: &mut dyn RateAdapter, trace: &SimulatedTrace) -> Vec<McsIndex> {
    (0..trace.len())
        .map(|i| {
            let obs = AdapterObservation {
                frame_index: i,
                last_channel: i.checked_sub(1).map(|p| &trace.frames[p].observed),
                last_tx: None,
                flight: &trace.sensors[i.saturating_sub(1)],
            };
            adapter.choose(&obs).unwrap()
        })
        .collect()
}

#[test]
fn adapter_starts_low_and_matches_sequence_forecasts() {
    let (model, _) = toy_model();
    let trace = toy_trace();
    let mut adapter = StateRateAdapter::new(model.clone());
    let choices = replay(&mut adapter, &trace);
    assert_eq!(choices[0], McsIndex::LOWEST);

    let inputs: Vec<_> = (1..trace.len())
        .map(|i| model.featurize(&trace.frames[i - 1].observed, &trace.sensors[i - 1]).unwrap())
        .collect();
    let mut seq = FeatureSequence::default();
    for f in inputs {
        seq.push(f, 0);
    }
    let forecasts = model.predict_sequence(&seq).unwrap();
    for (i, f) in forecasts.iter().enumerate() {
        assert_eq!(choices[i + 1], f.argmax(), "frame {}", i + 1);
    }
    assert_eq!(adapter.finetune_count(), 0);
}

#[test]
fn online_adapter_finetunes_classifier_only() {
    let (model, _) = toy_model();
    let trace = toy_trace();
    let config = OnlineConfig {
        prober: ProberConfig {
            distance_threshold: 0.0,
            accuracy_window: 10,
            accuracy_threshold: 1.0,
            cooldown_frames: 200,
            buffer_capacity: 100,
        },
        finetune: FinetuneConfig::default(),
    };
    let takeoff = [0.0, 0.0, 0.0];
    let mut adapter = StateRateAdapter::online(model.clone(), config, takeoff).unwrap();
    replay(&mut adapter, &trace);
    assert!(adapter.finetune_count() >= 1);
    let tuned = adapter.model();
    let frozen = |g| g != ParamGroup::Classifier;
    assert_eq!(bits(&model, frozen), bits(tuned, frozen));
    assert_eq!(tuned.eval.params, model.eval.params);
    assert_eq!(adapter.prober().unwrap().buffer().len(), 100);
}
