//! Subcommand implementations. Every artifact either starts with a config
//! provenance line (JSONL) or has a JSON sidecar carrying the config.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use amqc_core::cnn::{evaluate, load_weights, save_weights, train_epoch, CnnError, Network, TrainConfig, TrainingData};
use amqc_core::datagen::{
    emit_annotation, generate_set, parse_annotation, read_pgm, split_dataset, write_pgm, DataError, DefectClass, Sample,
    SampleSet, SplitRatio, SynthParams,
};
use amqc_core::metrics::{ConfusionMatrix, MetricsError, MetricsReport};
use amqc_core::quant::{bench_latency, calibrate, quantize_network, reduction_pct, Model, QuantError, QuantizedNetwork};
use amqc_core::telemetry::{broker_serve, BrokerConfig, BrokerHandle, TelemetryError};
use amqc_core::twin::{run_closed_loop, LoopConfig, LoopMode, Pipeline, ProcessState, Thresholds, TwinError};
use amqc_core::Tensor;
use serde_json::json;

use crate::config::{ConfigError, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    /// A required upstream artifact is missing.
    Dependency(PathBuf),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Dependency(_) => "dependency",
            CliError::Runtime(_) => "runtime",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
            CliError::Dependency(p) => write!(f, "missing required file {}", p.display()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(std::io::Error, CnnError, DataError, QuantError, MetricsError, TelemetryError);

impl From<TwinError> for CliError {
    fn from(e: TwinError) -> Self {
        match e {
            TwinError::Config(m) | TwinError::InvalidArgument(m) => CliError::Config(m),
            e @ TwinError::OutOfBounds { .. } => CliError::Config(e.to_string()),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.amqc";
pub const QWEIGHTS: &str = "weights.amqq";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_TXT: &str = "metrics.txt";
pub const BENCH_JSONL: &str = "bench.jsonl";
pub const LOOP_JSONL: &str = "loop.jsonl";
pub const REPORT_TXT: &str = "report.txt";

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Dependency(path.to_owned()))
    }
}

fn sidecar(cfg: &RunConfig, command: &str, extra: serde_json::Value) -> String {
    let mut v = json!({ "command": command, "config": cfg.to_json() });
    if let (Some(obj), serde_json::Value::Object(more)) = (v.as_object_mut(), extra) {
        obj.extend(more);
    }
    format!("{v}\n")
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let dir = Path::new(&cfg.data.out_dir);
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let set = generate_set(cfg.data.n_samples, cfg.data.seed, &SynthParams::default(), cfg.data.augment)?;
    for (i, s) in set.samples.iter().enumerate() {
        let name = format!("{i:05}");
        write_pgm(&s.image, images.join(format!("{name}.pgm")))?;
        fs::write(
            images.join(format!("{name}.xml")),
            emit_annotation(&s.annotation, &format!("{name}.pgm")),
        )?;
    }
    fs::write(
        dir.join(MANIFEST),
        sidecar(
            cfg,
            "gen-data",
            json!({ "samples": set.len(), "class_counts": set.class_counts }),
        ),
    )?;
    println!("wrote {} samples to {}", set.len(), dir.display());
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<SampleSet> {
    let dir = Path::new(&cfg.data.out_dir);
    let manifest = dir.join(MANIFEST);
    require(&manifest)?;
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest)?)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", manifest.display())))?;
    let n = meta["samples"]
        .as_u64()
        .ok_or_else(|| CliError::Runtime(format!("{}: no sample count", manifest.display())))? as usize;
    let seed = meta["config"]["data"]["seed"].as_u64().unwrap_or(cfg.data.seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let pgm = dir.join("images").join(format!("{i:05}.pgm"));
        let xml = dir.join("images").join(format!("{i:05}.xml"));
        require(&pgm)?;
        require(&xml)?;
        let image = read_pgm(&pgm)?;
        let (annotation, _) = parse_annotation(&fs::read(&xml)?)?;
        samples.push(Sample { image, annotation });
    }
    Ok(SampleSet::new(samples, seed))
}

fn split(cfg: &RunConfig) -> Result<(SampleSet, SampleSet)> {
    let set = load_dataset(cfg)?;
    Ok(split_dataset(&set, SplitRatio::FOUR_TO_ONE, cfg.data.seed)?)
}

fn load_float(cfg: &RunConfig, out: &Path) -> Result<Network<f32>> {
    let path = out.join(WEIGHTS);
    require(&path)?;
    Ok(load_weights(&path, &cfg.train.preset.architecture())?)
}

fn load_quantized(cfg: &RunConfig, out: &Path) -> Result<QuantizedNetwork> {
    let path = out.join(QWEIGHTS);
    require(&path)?;
    Ok(QuantizedNetwork::load(&path, &cfg.train.preset.architecture())?)
}

fn accuracy_of(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train_set, test_set) = split(cfg)?;
    let arch = cfg.train.preset.architecture();
    let [_, h, w] = arch.input;
    let train_data = TrainingData::<f32>::from_set(&train_set, h, w)?;
    let test_data = TrainingData::<f32>::from_set(&test_set, h, w)?;
    let tc = TrainConfig {
        learning_rate: cfg.train.lr,
        batch_size: cfg.train.batch_size,
        epochs: cfg.train.epochs,
        seed: cfg.train.seed,
    };
    tc.validate()?;
    fs::create_dir_all(out)?;
    let mut log = cfg.provenance_line("train");
    let mut net = Network::<f32>::new(arch, cfg.train.seed)?;
    let mut accuracy = 0.0;
    for epoch in 0..cfg.train.epochs {
        let (next, loss) = train_epoch(&net, &train_data, &tc, epoch)?;
        net = next;
        accuracy = accuracy_of(&evaluate(&net, &test_data)?, &test_data.labels);
        let line = json!({ "record": "epoch", "epoch": epoch + 1, "loss": loss, "test_accuracy": accuracy });
        log.push_str(&format!("{line}\n"));
        eprintln!("epoch {:>3}  loss {loss:.5}  test accuracy {accuracy:.4}", epoch + 1);
    }
    save_weights(&net, &out.join(WEIGHTS))?;
    fs::write(
        out.join("weights.json"),
        sidecar(
            cfg,
            "train",
            json!({ "parameters": net.parameter_count(), "test_accuracy": accuracy }),
        ),
    )?;
    fs::write(out.join(TRAIN_LOG), log)?;
    println!("test accuracy {accuracy:.4}; weights in {}", out.join(WEIGHTS).display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, out: &Path, quantized: bool) -> Result<()> {
    let (_, test_set) = split(cfg)?;
    let arch = cfg.train.preset.architecture();
    let [_, h, w] = arch.input;
    let data = TrainingData::<f32>::from_set(&test_set, h, w)?;
    let pred = if quantized {
        let q = load_quantized(cfg, out)?;
        predict_all(Model::Quantized(&q), &data)?
    } else {
        let net = load_float(cfg, out)?;
        evaluate(&net, &data)?
    };
    let cm = ConfusionMatrix::from_pairs(arch.classes(), &data.labels, &pred)?;
    let labels: Vec<&str> = DefectClass::ALL.iter().map(|c| c.label()).collect();
    let report = MetricsReport::from_confusion(&cm, &labels, None)?;
    let mut jsonl = cfg.provenance_line(if quantized { "eval --quantized" } else { "eval" });
    jsonl.push_str(&report.render_jsonl());
    fs::write(out.join(METRICS_JSONL), jsonl)?;
    let text = report.render_text();
    fs::write(out.join(METRICS_TXT), &text)?;
    print!("{text}");
    Ok(())
}

fn predict_all(model: Model<'_>, data: &TrainingData<f32>) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(32) {
        let probs = model.forward(&data.batch(chunk)?)?;
        let k = probs.shape()[1];
        out.extend(amqc_core::cnn::argmax_rows(probs.data(), k));
    }
    Ok(out)
}

pub fn quantize(cfg: &RunConfig, out: &Path) -> Result<()> {
    let net = load_float(cfg, out)?;
    let (train_set, test_set) = split(cfg)?;
    let [_, h, w] = net.input_shape();
    let train_data = TrainingData::<f32>::from_set(&train_set, h, w)?;
    let n = cfg.quant.calibration_n.min(train_data.len());
    let cal = calibrate(&net, &train_data.batch(&(0..n).collect::<Vec<_>>())?)?;
    let q = quantize_network(&net, &cal)?;
    q.save(&out.join(QWEIGHTS))?;
    let test_data = TrainingData::<f32>::from_set(&test_set, h, w)?;
    let float_pred = evaluate(&net, &test_data)?;
    let q_pred = predict_all(Model::Quantized(&q), &test_data)?;
    let agree = float_pred.iter().zip(&q_pred).filter(|(a, b)| a == b).count();
    fs::write(
        out.join("weights.amqq.json"),
        sidecar(
            cfg,
            "quantize",
            json!({ "calibration_samples": n, "test_samples": test_data.len(), "top1_agreement": agree }),
        ),
    )?;
    println!("int8 agrees with float on {agree}/{} test images", test_data.len());
    Ok(())
}

pub fn bench(cfg: &RunConfig, out: &Path, batch: usize, frames: usize) -> Result<()> {
    if batch == 0 {
        return Err(CliError::Config("bench batch must be positive".into()));
    }
    let arch = cfg.train.preset.architecture();
    let [_, h, w] = arch.input;
    // latency does not depend on weight values, so seeded weights stand in for trained ones
    let net = Network::<f32>::new(arch, cfg.train.seed)?;
    let set = generate_set(cfg.quant.calibration_n.max(batch), cfg.data.seed, &SynthParams::default(), false)?;
    let data = TrainingData::<f32>::from_set(&set, h, w)?;
    let cal = calibrate(&net, &data.batch(&(0..cfg.quant.calibration_n).collect::<Vec<_>>())?)?;
    let q = quantize_network(&net, &cal)?;
    let x = data.batch(&(0..batch).collect::<Vec<_>>())?;
    let float = bench_latency(Model::Float(&net), &x, frames)?;
    let quant = bench_latency(Model::Quantized(&q), &x, frames)?;
    let agree = agreement(&net, &q, &x)?;
    let reduction = reduction_pct(float.mean_ms, quant.mean_ms);
    fs::create_dir_all(out)?;
    let mut jsonl = cfg.provenance_line("bench");
    jsonl.push_str(&float.to_json_line());
    jsonl.push_str(&quant.to_json_line());
    let summary = json!({
        "record": "summary",
        "preset": cfg.train.preset.to_string(),
        "reduction_pct": reduction,
        "top1_agreement": agree,
        "batch_size": batch,
        "nondeterministic": ["mean_ms", "p50_ms", "p95_ms", "fps", "reduction_pct"],
    });
    jsonl.push_str(&format!("{summary}\n"));
    fs::write(out.join(BENCH_JSONL), jsonl)?;
    println!(
        "float {:.2} ms/frame ({:.2} FPS), int8 {:.2} ms/frame ({:.2} FPS), reduction {reduction:.1}%",
        float.mean_ms, float.fps, quant.mean_ms, quant.fps
    );
    Ok(())
}

fn agreement(net: &Network<f32>, q: &QuantizedNetwork, x: &Tensor<f32>) -> Result<usize> {
    let a = net.predict(x)?;
    let b = q.predict(x)?;
    Ok(a.iter().zip(&b).filter(|(a, b)| a == b).count())
}

pub fn broker(cfg: &RunConfig, bind: &str, duration: Option<Duration>) -> Result<()> {
    let config = BrokerConfig {
        retransmit: Duration::from_millis(cfg.broker.retransmit_ms),
        max_attempts: cfg.broker.max_attempts,
        ..BrokerConfig::default()
    };
    let handle = broker_serve((bind, cfg.broker.port), config)?;
    let addr = handle.local_addr().expect("tcp broker has an address");
    println!("listening on {addr}");
    let _ = std::io::stdout().flush();
    let start = Instant::now();
    loop {
        std::thread::sleep(Duration::from_millis(100));
        if duration.is_some_and(|d| start.elapsed() >= d) {
            break;
        }
    }
    let stats = handle.stats();
    handle.shutdown();
    println!("{stats:?}");
    Ok(())
}

fn loop_config(cfg: &RunConfig) -> Result<LoopConfig> {
    let l = &cfg.run_loop;
    Ok(LoopConfig {
        layers: l.layers,
        sites: l.sites,
        seed: l.seed,
        controller: l.controller,
        mode: l.mode,
        thresholds: Thresholds {
            hot: l.hot_threshold,
            cold: l.cold_threshold,
        },
        start: ProcessState::new(l.power_w, l.speed_mm_s, l.feed_rel)?,
        node_id: l.node_id,
    })
}

pub fn run_loop(cfg: &RunConfig, out: &Path, connect: Option<&str>, quantized: bool) -> Result<()> {
    let lc = loop_config(cfg)?;
    let report = match lc.mode {
        LoopMode::ModelOnly => run_closed_loop(&lc, None)?,
        LoopMode::FullPipeline => {
            let float;
            let quant;
            let model = if quantized {
                quant = load_quantized(cfg, out)?;
                Model::Quantized(&quant)
            } else {
                float = load_float(cfg, out)?;
                Model::Float(&float)
            };
            match connect {
                Some(addr) => {
                    let addr = addr
                        .parse()
                        .map_err(|e| CliError::Config(format!("--connect {addr:?}: {e}")))?;
                    run_closed_loop(&lc, Some(&Pipeline::tcp(model, addr)))?
                }
                None => {
                    let broker = BrokerHandle::in_process(BrokerConfig {
                        retransmit: Duration::from_millis(cfg.broker.retransmit_ms),
                        max_attempts: cfg.broker.max_attempts,
                        ..BrokerConfig::default()
                    });
                    let pipeline = Pipeline::in_process(model, &broker);
                    let report = run_closed_loop(&lc, Some(&pipeline))?;
                    drop(pipeline);
                    report
                }
            }
        }
    };
    fs::create_dir_all(out)?;
    let mut jsonl = cfg.provenance_line("run-loop");
    jsonl.push_str(&report.to_jsonl());
    fs::write(out.join(LOOP_JSONL), jsonl)?;
    println!("{}", loop_summary(&serde_json::to_value(&report).expect("serializable")));
    Ok(())
}

fn loop_summary(v: &serde_json::Value) -> String {
    let pct = |x: &serde_json::Value| x.as_f64().map_or("n/a".to_owned(), |p| format!("{p:.1}%"));
    format!(
        "defects/layer {:.1} -> {:.1} (reduction {}), correction rate {} ({} of {} actions)",
        v["baseline_defect_rate"].as_f64().unwrap_or(0.0),
        v["final_defect_rate"].as_f64().unwrap_or(0.0),
        pct(&v["defect_reduction_pct"]),
        pct(&v["correction_rate_pct"]),
        v["successful_actions"],
        v["actions"],
    )
}

fn read_jsonl(path: &Path) -> Result<Vec<serde_json::Value>> {
    fs::read_to_string(path)?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn report(out: &Path) -> Result<()> {
    let mut text = String::new();
    let metrics_txt = out.join(METRICS_TXT);
    if metrics_txt.is_file() {
        text.push_str("== classification ==\n");
        text.push_str(&fs::read_to_string(metrics_txt)?);
    }
    let bench = out.join(BENCH_JSONL);
    if bench.is_file() {
        text.push_str("== latency ==\n");
        for v in read_jsonl(&bench)? {
            match v["record"].as_str() {
                Some("config") => {}
                Some("summary") => text.push_str(&format!(
                    "reduction {:.1}% at batch {}, top-1 agreement {}/{}\n",
                    v["reduction_pct"].as_f64().unwrap_or(0.0),
                    v["batch_size"],
                    v["top1_agreement"],
                    v["batch_size"]
                )),
                _ => text.push_str(&format!(
                    "{:<9} mean {:.2} ms  p50 {:.2} ms  p95 {:.2} ms  {:.2} FPS\n",
                    v["variant"].as_str().unwrap_or("?"),
                    v["mean_ms"].as_f64().unwrap_or(0.0),
                    v["p50_ms"].as_f64().unwrap_or(0.0),
                    v["p95_ms"].as_f64().unwrap_or(0.0),
                    v["fps"].as_f64().unwrap_or(0.0)
                )),
            }
        }
    }
    let lp = out.join(LOOP_JSONL);
    if lp.is_file() {
        text.push_str("== closed loop ==\n");
        if let Some(summary) = read_jsonl(&lp)?.into_iter().rev().find(|v| v["record"] == "summary") {
            text.push_str(&loop_summary(&summary));
            text.push('\n');
        }
    }
    if text.is_empty() {
        return Err(CliError::Dependency(out.join(METRICS_JSONL)));
    }
    fs::write(out.join(REPORT_TXT), &text)?;
    print!("{text}");
    Ok(())
}
