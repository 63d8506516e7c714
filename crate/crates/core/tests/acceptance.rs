//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line to
//! stderr (bypassing output capture) before asserting.

use std::io::Write;
use std::sync::OnceLock;

use staterate_core::channel::coherence_time;
use staterate_core::harness::{
    export_csv, generate_dataset, observation_preset, run_scenario, run_training_pipeline, simulate_trace,
    AdapterSpec, DatasetConfig, EnvironmentChoice, LinkOptions, OutcomeRng, PipelineConfig, ScenarioConfig,
    SimulatedTrace, SweepSpec, VelocityBin,
};
use staterate_core::nn::gradcheck::probes::{layer_probe, EvaluationObjective, LayerKind, PredictionObjective};
use staterate_core::nn::{
    gradient_check, ArchSpec, EvaluationNet, GradCheckConfig, ParamGroup, ParamStore, PredictionNet, SignFlipped,
    Tensor,
};
use staterate_core::staterate::{
    body_outputs, finetune_head, finetune_online, prober_step, prediction_accuracy, train_offline, FeatureSequence,
    FinetuneConfig, ProberConfig, ProberState, StateRateModel, TrainConfig, TrainingReport,
};
use staterate_core::{ChannelState, EnvironmentSpec, FlightState, RateDistribution, TrajectorySpec};

fn report(name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "{verdict} {name}: {detail}");
}

fn preset(name: &str) -> EnvironmentChoice {
    EnvironmentChoice::Preset(name.to_string())
}

fn dataset(env: &str, count: usize, seed: u64) -> DatasetConfig {
    DatasetConfig {
        environment: preset(env),
        trajectories: Vec::new(),
        sweep: Some(SweepSpec {
            count,
            ..SweepSpec::default()
        }),
        frame_rate: 200.0,
        link: LinkOptions::default(),
        seed,
    }
}

fn training_dataset() -> DatasetConfig {
    dataset("playground", 96, 1)
}

fn train_config(shuffle_labels: bool) -> TrainConfig {
    TrainConfig {
        seed: 1,
        shuffle_labels,
        ..TrainConfig::default()
    }
}

struct Trained {
    model: StateRateModel,
    report: TrainingReport,
}

/// The playground model shared by every test that needs trained weights.
fn trained() -> &'static Trained {
    static MODEL: OnceLock<Trained> = OnceLock::new();
    MODEL.get_or_init(|| {
        let out = run_training_pipeline(&PipelineConfig {
            dataset: training_dataset(),
            train: train_config(false),
            output_dir: None,
            checks: Default::default(),
        })
        .expect("training pipeline");
        Trained {
            model: out.model,
            report: out.report,
        }
    })
}

fn scenario(env: &str, trajectory: TrajectorySpec, adapters: Vec<AdapterSpec>, duration: f64, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        environment: preset(env),
        trajectory,
        adapters,
        frame_rate: 200.0,
        duration,
        seed,
        output_path: None,
        link: LinkOptions::default(),
        outcome_rng: OutcomeRng::Common,
        throughput_window: 1.0,
        checks: Vec::new(),
    }
}

fn all_adapters() -> Vec<AdapterSpec> {
    serde_json::from_str(
        r#"[{"kind":"opt"},{"kind":"previous_opt"},{"kind":"samplerate"},{"kind":"dynamic_samplerate"},
            {"kind":"charm"},{"kind":"esnr"},{"kind":"dynamic_esnr"},{"kind":"staterate"},
            {"kind":"staterate","online":{},"name":"staterate_online"}]"#,
    )
    .unwrap()
}

fn sequence(model: &StateRateModel, trace: &SimulatedTrace) -> FeatureSequence {
    FeatureSequence::from_samples(&trace.labeled().samples, &model.standardizer).unwrap()
}

/// Agreement of the forecast made after frame `n` with the label of `n + 1`.
fn forecast_accuracy(model: &StateRateModel, traces: &[SimulatedTrace]) -> f64 {
    let (mut hits, mut count) = (0.0, 0usize);
    for t in traces {
        let seq = sequence(model, t);
        let preds = model.predict_sequence(&seq).unwrap();
        let k = seq.len() - 1;
        hits += prediction_accuracy(&preds[..k], &seq.labels[1..]) * k as f64;
        count += k;
    }
    hits / count as f64
}

#[test]
fn coherence_time_at_20_mps() {
    let t = coherence_time(20.0, 2.4e9).unwrap() * 1e3;
    let pass = (t - 2.644).abs() <= 0.001;
    report("coherence time", pass, &format!("{t:.4} ms (target 2.644 ± 0.001)"));
    assert!(pass);
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = GradCheckConfig::default();
    let mut worst = 0.0f64;
    let mut weakest_flip = f64::INFINITY;
    for kind in LayerKind::ALL {
        let (probe, mut store) = layer_probe(kind, 11);
        worst = worst.max(gradient_check(&probe, &mut store, &cfg).unwrap().max_rel_error);
        let (probe, mut store) = layer_probe(kind, 11);
        let flipped = gradient_check(&SignFlipped(probe), &mut store, &cfg).unwrap();
        weakest_flip = weakest_flip.min(flipped.max_rel_error);
    }
    let arch = ArchSpec::default();
    let pred = PredictionNet::new(&arch, 1).unwrap();
    let mut p = pred.params.clone();
    let obj = PredictionObjective::random(&pred, 3, 2, 7).unwrap();
    worst = worst.max(gradient_check(&obj, &mut p, &cfg).unwrap().max_rel_error);
    let flipped = gradient_check(&SignFlipped(obj), &mut p, &cfg).unwrap();
    weakest_flip = weakest_flip.min(flipped.max_rel_error);

    let eval = EvaluationNet::new(&arch, 2).unwrap();
    let mut p = eval.params.clone();
    let obj = EvaluationObjective::random(&eval, 6, 8).unwrap();
    worst = worst.max(gradient_check(&obj, &mut p, &cfg).unwrap().max_rel_error);
    let flipped = gradient_check(&SignFlipped(obj), &mut p, &cfg).unwrap();
    weakest_flip = weakest_flip.min(flipped.max_rel_error);

    let pass = worst < 1e-4 && weakest_flip > 1e-1;
    report(
        "gradient check",
        pass,
        &format!("max rel error {worst:.2e} (< 1e-4), sign-flip min error {weakest_flip:.2e} (> 1e-1)"),
    );
    assert!(pass);
}

#[test]
fn oracle_dominates_every_adapter() {
    let model = &trained().model;
    let d = 10.0;
    let kinds = [
        TrajectorySpec::hover(10.0, 25.0, d).with_drift(0.3),
        TrajectorySpec::constant_velocity(5.0, 5.0, 30.0, d),
        TrajectorySpec::back_and_forth(20.0, 6.0, 8.0, 20.0, d),
        TrajectorySpec::random(10.0, 35.0, 20.0, d),
    ];
    let mut runs = 0;
    let mut violations = Vec::new();
    for traj in &kinds {
        for seed in 0..5u64 {
            let cfg = scenario("playground", traj.clone().with_seed(seed), all_adapters(), d, 1000 + seed);
            let r = run_scenario(&cfg, Some(model)).unwrap();
            let prev = r.adapter("previous_opt").unwrap().throughput;
            if prev > r.opt_throughput {
                violations.push(format!("previous_opt on seed {seed}"));
            }
            violations.extend(r.dominance_violations());
            runs += 1;
        }
    }
    let pass = runs >= 20 && violations.is_empty();
    report("oracle dominance", pass, &format!("{runs} scenarios, violations {violations:?}"));
    assert!(pass);
}

#[test]
fn static_scenario_converges_to_opt() {
    let model = &trained().model;
    let cfg = scenario("playground", TrajectorySpec::hover(5.0, 10.0, 10.0).with_seed(1), all_adapters(), 10.0, 1001);
    let r = run_scenario(&cfg, Some(model)).unwrap();
    let worst = r
        .adapters
        .iter()
        .map(|a| (a.throughput_vs_opt - 1.0).abs())
        .fold(0.0f64, f64::max);
    let pass = worst <= 0.10;
    let ratios: Vec<String> = r
        .adapters
        .iter()
        .map(|a| format!("{} {:.3}", a.name, a.throughput_vs_opt))
        .collect();
    report("static convergence", pass, &format!("max deviation {worst:.3} (<= 0.10); {}", ratios.join(", ")));
    assert!(pass);
}

#[test]
fn rssi_variation_grows_with_speed_and_drift() {
    let mut ordered = 0;
    for seed in 0..20u64 {
        let traj = TrajectorySpec::random(10.0, 60.0, 20.0, 60.0).with_seed(seed);
        let cfg = scenario("playground", traj, vec![AdapterSpec::Opt], 60.0, seed);
        let r = run_scenario(&cfg, None).unwrap();
        let m: Vec<Option<f64>> = VelocityBin::ALL.iter().map(|&b| r.channel.mean_in(b)).collect();
        if let [Some(a), Some(b), Some(c)] = m[..] {
            if a < b && b < c {
                ordered += 1;
            }
        }
    }
    let max_delta = |name: &str| {
        let (env, traj) = observation_preset(name, 30.0).unwrap();
        let mut cfg = scenario("grove", traj.with_seed(4), vec![AdapterSpec::Opt], 30.0, 4);
        cfg.environment = env;
        run_scenario(&cfg, None).unwrap().channel.max_abs_delta_rssi
    };
    let hover = max_delta("hover_drift");
    let grounded = max_delta("grounded");
    let pass = ordered >= 18 && hover >= 6.0 && grounded <= 4.0;
    report(
        "RSSI observation",
        pass,
        &format!("speed ordering {ordered}/20 (>= 18), hover max {hover:.2} dB (>= 6), grounded max {grounded:.2} dB (<= 4)"),
    );
    assert!(pass);
}

#[test]
fn offline_training_learns_and_shuffled_control_does_not() {
    let t = trained();
    let val = t.report.final_pred_val_accuracy().unwrap();
    let frames = t.report.train_frames + t.report.val_frames;
    let traces = generate_dataset(&training_dataset()).unwrap();
    let labeled: Vec<_> = traces.iter().map(SimulatedTrace::labeled).collect();
    let (_, shuffled) = train_offline(&labeled, &train_config(true)).unwrap();
    let control = shuffled.final_pred_val_accuracy().unwrap();
    let pass = frames >= 20_000 && val >= 0.75 && control <= 0.20;
    report(
        "learnability",
        pass,
        &format!("{frames} frames, validation {val:.4} (>= 0.75), shuffled control {control:.4} (<= 0.20)"),
    );
    assert!(pass);
}

#[test]
fn staterate_beats_esnr_at_medium_speed() {
    let model = &trained().model;
    let adapters: Vec<AdapterSpec> =
        serde_json::from_str(r#"[{"kind":"opt"},{"kind":"esnr"},{"kind":"dynamic_esnr"},{"kind":"staterate"}]"#).unwrap();
    let mut wins = 0;
    let mut margins = Vec::new();
    for seed in 0..10u64 {
        let traj = TrajectorySpec::constant_velocity(10.0, 5.0, 30.0, 10.0).with_seed(seed);
        let r = run_scenario(&scenario("playground", traj, adapters.clone(), 10.0, seed), Some(model)).unwrap();
        let bin = |n: &str| r.adapter(n).unwrap().bin(VelocityBin::Medium).unwrap().throughput;
        let (s, e, de) = (bin("staterate"), bin("esnr"), bin("dynamic_esnr"));
        if s >= e && s >= de {
            wins += 1;
        }
        margins.push(format!("{:+.2}", s - e));
    }
    let pass = wins >= 8;
    report(
        "throughput ordering 2-6 m/s",
        pass,
        &format!("{wins}/10 seeds (>= 8); staterate minus esnr Mbit/s {}", margins.join(" ")),
    );
    assert!(pass);
}

#[test]
fn evaluation_network_agrees_with_oracle() {
    let model = &trained().model;
    let held_out = generate_dataset(&dataset("playground", 48, 99)).unwrap();
    let mut hits = [0usize; 3];
    let mut counts = [0usize; 3];
    for t in &held_out {
        let seq = sequence(model, t);
        let evals = model.evaluate_sequence(&seq).unwrap();
        for (i, e) in evals.iter().enumerate() {
            let b = VelocityBin::of(t.frames[i].flight.speed) as usize;
            counts[b] += 1;
            hits[b] += usize::from(e.argmax().get() == seq.labels[i]);
        }
    }
    let per_bin: Vec<f64> = hits.iter().zip(&counts).map(|(&h, &c)| h as f64 / c.max(1) as f64).collect();
    let mean = per_bin.iter().sum::<f64>() / per_bin.len() as f64;
    let pass = counts.iter().all(|&c| c > 0) && mean >= 0.85;
    report(
        "evaluation fidelity",
        pass,
        &format!("mean over bins {mean:.4} (>= 0.85); per bin {per_bin:.3?}, frames {counts:?}"),
    );
    assert!(pass);
}

fn non_classifier(p: &ParamStore) -> Vec<u64> {
    p.blocks()
        .iter()
        .filter(|b| b.group != ParamGroup::Classifier)
        .flat_map(|b| b.data.iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn online_finetuning_helps_after_environment_shift() {
    let model = &trained().model;
    let env = EnvironmentSpec::preset("grove").unwrap();
    let link = LinkOptions::default();
    let flight = |seed: u64| {
        let traj = TrajectorySpec::random(10.0, 60.0, 20.0, 10.0).with_seed(seed);
        simulate_trace(&env, &traj, 200.0, &link, seed).unwrap()
    };
    let deployed = flight(5);
    let buffer: Vec<(ChannelState, FlightState)> = deployed
        .frames
        .iter()
        .zip(&deployed.sensors)
        .map(|(f, s)| (f.observed.clone(), *s))
        .skip(deployed.len().saturating_sub(ProberConfig::default().buffer_capacity))
        .collect();
    let held_out: Vec<SimulatedTrace> = (11..14).map(flight).collect();

    let before = forecast_accuracy(model, &held_out);
    let (pred, ft) = finetune_online(model, &buffer, &FinetuneConfig::default()).unwrap();
    let frozen = non_classifier(&model.pred.params) == non_classifier(&pred.params);
    let mut tuned = model.clone();
    tuned.pred = pred;
    let after = forecast_accuracy(&tuned, &held_out);
    let pass = after > before && frozen && ft.fc_change_norm > 0.0;
    report(
        "online learning benefit",
        pass,
        &format!(
            "grove agreement {before:.4} -> {after:.4}, {} buffer samples, non-FC bit-identical {frozen}",
            ft.samples
        ),
    );
    assert!(pass);
}

#[test]
fn self_targets_are_a_finetuning_fixed_point() {
    let model = &trained().model;
    let env = EnvironmentSpec::preset("playground").unwrap();
    let trace = simulate_trace(&env, &TrajectorySpec::random(10.0, 40.0, 20.0, 2.0).with_seed(2), 200.0, &LinkOptions::default(), 2)
        .unwrap();
    let seq = sequence(model, &trace);
    let hidden = body_outputs(&model.pred, &seq).unwrap();
    let hs = model.pred.arch.lstm_hidden;
    let x = Tensor::from_vec(&[hidden.len(), hs], hidden.concat()).unwrap();
    let (logits, _) = model.pred.head().forward(&model.pred.params, &x).unwrap();
    let targets: Vec<RateDistribution> = logits
        .data()
        .chunks(model.pred.arch.classes)
        .map(|z| RateDistribution::from_logits(z).unwrap())
        .collect();
    let cfg = FinetuneConfig {
        epochs: 1,
        lr: 1e-4,
        ..FinetuneConfig::default()
    };
    let (_, ft) = finetune_head(&model.pred, &hidden, &targets, &cfg).unwrap();
    let pass = ft.fc_change_norm < 1e-6 && ft.samples == hidden.len();
    report(
        "fine-tune fixed point",
        pass,
        &format!("FC change norm {:.3e} over {} samples (< 1e-6)", ft.fc_change_norm, ft.samples),
    );
    assert!(pass);
}

#[test]
fn pipeline_reruns_are_bit_identical() {
    let run = |dir: &std::path::Path| {
        let mut ds = dataset("pool", 6, 3);
        ds.sweep.as_mut().unwrap().duration = 1.0;
        let cfg = PipelineConfig {
            dataset: ds,
            train: TrainConfig {
                seed: 3,
                pred_epochs: 2,
                eval_epochs: 2,
                ..TrainConfig::default()
            },
            output_dir: Some(dir.join("model")),
            checks: Default::default(),
        };
        let out = run_training_pipeline(&cfg).unwrap();
        let ckpt = out.checkpoint.unwrap();
        let adapters = vec![
            AdapterSpec::Opt,
            AdapterSpec::Esnr,
            serde_json::from_value(serde_json::json!({"kind": "samplerate"})).unwrap(),
            serde_json::from_value(serde_json::json!({"kind": "staterate", "checkpoint": ckpt, "online": {}})).unwrap(),
        ];
        let mut sc = scenario("pool", TrajectorySpec::random(10.0, 50.0, 20.0, 5.0).with_seed(8), adapters, 5.0, 8);
        sc.output_path = Some(dir.join("report.csv"));
        let r = run_scenario(&sc, None).unwrap();
        export_csv(&r, &dir.join("again.csv")).unwrap();
        let read = |name: &str| std::fs::read(dir.join(name)).unwrap();
        (read("model/checkpoint.bin"), read("report.csv"), read("again.csv"))
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, ra, ra2) = run(a.path());
    let (cb, rb, _) = run(b.path());
    let pass = ca == cb && ra == rb && ra == ra2 && !ca.is_empty();
    report(
        "determinism",
        pass,
        &format!("checkpoint {} bytes equal {}, CSV {} bytes equal {}", ca.len(), ca == cb, ra.len(), ra == rb),
    );
    assert!(pass);
}

#[test]
fn prober_follows_scripted_sequence() {
    let env = EnvironmentSpec::preset("playground").unwrap();
    let trace = simulate_trace(&env, &TrajectorySpec::hover(10.0, 20.0, 0.05), 200.0, &LinkOptions::default(), 1).unwrap();
    let channel = trace.frames[0].observed.clone();
    let at = |x: f64| FlightState {
        timestamp: 0.0,
        position: [x, 0.0, 20.0],
        distance: (x * x + 400.0).sqrt(),
        speed: 0.0,
        accel: 0.0,
    };
    let config = ProberConfig {
        distance_threshold: 50.0,
        accuracy_window: 10,
        accuracy_threshold: 0.7,
        cooldown_frames: 20,
        buffer_capacity: 25,
    };
    let takeoff = [0.0, 0.0, 20.0];
    let mut failures = Vec::new();

    // Near takeoff, never triggers whatever the accuracy.
    let mut s = ProberState::new(config, takeoff).unwrap();
    for i in 0..60 {
        if prober_step(&mut s, &channel, &at(10.0), i % 4 == 0) {
            failures.push(format!("near-takeoff trigger at {i}"));
        }
    }
    if s.buffer().len() != 25 {
        failures.push(format!("buffer holds {} of 25", s.buffer().len()));
    }

    // Far, accurate: no trigger.
    let mut s = ProberState::new(config, takeoff).unwrap();
    for i in 0..40 {
        if prober_step(&mut s, &channel, &at(80.0), true) {
            failures.push(format!("accurate trigger at {i}"));
        }
    }

    // Far at 0.5 accuracy: nothing until the window is full, then a trigger
    // every cooldown + 1 frames.
    let mut s = ProberState::new(config, takeoff).unwrap();
    let triggers: Vec<usize> = (0..60).filter(|&i| prober_step(&mut s, &channel, &at(80.0), i % 2 == 0)).collect();
    if triggers != [9, 30, 51] {
        failures.push(format!("triggers {triggers:?}, expected [9, 30, 51]"));
    }

    let pass = failures.is_empty();
    report("prober contract", pass, &format!("failures {failures:?}"));
    assert!(pass);
}
