use amqc_core::cnn::{Network, Preset};
use amqc_core::quant::Model;
use amqc_core::telemetry::{BrokerConfig, BrokerHandle};
use amqc_core::twin::{
    defect_probability, run_closed_loop, LoopConfig, LoopMode, Pipeline, ProcessState,
};

#[test]
fn controller_off_rate_stays_flat() {
    let start = ProcessState::new(350.0, 500.0, 1.0).unwrap();
    let cfg = LoopConfig {
        controller: false,
        start,
        ..LoopConfig::default()
    };
    let r = run_closed_loop(&cfg, None).unwrap();
    assert_eq!(r.actions, 0);
    assert!(r.layers.iter().all(|l| l.state == start));
    let p = defect_probability(&start).total_defect();
    let sigma = (2.0 * cfg.sites as f64 * p * (1.0 - p) / 10.0).sqrt();
    assert!((r.final_defect_rate - r.baseline_defect_rate).abs() <= 3.0 * sigma);
}

#[test]
fn full_pipeline_counts_every_defect_once() {
    let net = Network::<f32>::new(Preset::Tiny.architecture(), 3).unwrap();
    let broker = BrokerHandle::in_process(BrokerConfig::default());
    let pipeline = Pipeline::in_process(Model::Float(&net), &broker);
    let cfg = LoopConfig {
        layers: 4,
        sites: 20,
        mode: LoopMode::FullPipeline,
        ..LoopConfig::default()
    };
    let a = run_closed_loop(&cfg, Some(&pipeline)).unwrap();
    for l in &a.layers {
        let classified = l.classified.unwrap();
        assert_eq!(classified.iter().sum::<u32>(), l.defects);
    }
    assert!(a.states_within_bounds());
    // ground truth matches the model-only simulator for the same state sequence
    let b = run_closed_loop(&cfg, Some(&pipeline)).unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    let stats = broker.stats();
    let defects: u32 = a.layers.iter().map(|l| l.defects).sum();
    // two runs: defect records plus one control record per layer each
    assert_eq!(stats.publishes, 2 * (defects as u64 + cfg.layers as u64));
}
