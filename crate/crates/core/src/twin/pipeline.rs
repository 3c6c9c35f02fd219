//! Full-pipeline loop: acquisition → inference → telemetry → control, each on
//! its own thread and connected by bounded queues.

use std::collections::HashSet;
use std::net::{SocketAddr, TcpStream};
use std::sync::mpsc::{channel, sync_channel, Receiver, RecvTimeoutError, SyncSender};
use std::time::Duration;

use super::{decide_action, sample_sites, ControlAction, DefectCounts, LayerRecord, LoopConfig, ProcessState, Result, TwinError};
use crate::cnn::CnnError;
use crate::datagen::{preprocess, synth_image, BBox, SynthParams, CLASS_COUNT};
use crate::quant::{Model, QuantError};
use crate::rng::derive_seed;
use crate::telemetry::{control_topic, defects_topic, BrokerHandle, Client, ClientOptions, Conn, DefectRecord, QoS, TelemetryError};
use crate::tensor::Tensor;

const STREAM_RENDER: u64 = 0x7717_0002;

type Connector<'a> = Box<dyn Fn() -> std::result::Result<Conn, TelemetryError> + Sync + 'a>;

/// Classifier and broker connection used in full-pipeline mode.
pub struct Pipeline<'a> {
    model: Model<'a>,
    connect: Connector<'a>,
    pub synth: SynthParams,
    /// Capacity of the acquisition → inference queue.
    pub queue_capacity: usize,
    pub batch_size: usize,
    /// How long the controller waits for a missing defect record.
    pub delivery_timeout: Duration,
}

enum Item {
    Site {
        layer: u32,
        site: u32,
        input: Tensor<f32>,
        bbox: BBox,
    },
    LayerEnd {
        layer: u32,
        truth: DefectCounts,
    },
}

struct LayerDone {
    layer: u32,
    truth: DefectCounts,
    published: usize,
}

fn stalled(what: &str) -> TwinError {
    TwinError::Stalled(format!("{what} stage stopped"))
}

impl<'a> Pipeline<'a> {
    pub fn new(model: Model<'a>, connect: impl Fn() -> std::result::Result<Conn, TelemetryError> + Sync + 'a) -> Self {
        Self {
            model,
            connect: Box::new(connect),
            synth: SynthParams::default(),
            queue_capacity: 64,
            batch_size: 32,
            delivery_timeout: Duration::from_secs(30),
        }
    }

    /// Talks to `broker` through in-process connections.
    pub fn in_process(model: Model<'a>, broker: &'a BrokerHandle) -> Self {
        Self::new(model, move || Ok(broker.connect_in_process()))
    }

    pub fn tcp(model: Model<'a>, addr: SocketAddr) -> Self {
        Self::new(model, move || Ok(Conn::from(TcpStream::connect(addr)?)))
    }

    pub(super) fn run(&self, cfg: &LoopConfig) -> Result<Vec<LayerRecord>> {
        if self.batch_size == 0 || self.queue_capacity == 0 {
            return Err(TwinError::InvalidArgument("batch size and queue capacity must be positive".into()));
        }
        let (state_tx, state_rx) = sync_channel::<(u32, ProcessState)>(1);
        let (item_tx, item_rx) = sync_channel::<Item>(self.queue_capacity);
        let (done_tx, done_rx) = sync_channel::<LayerDone>(1);

        let twin = Client::connect((self.connect)()?, ClientOptions::new(format!("amqc-twin-{}", cfg.node_id)))?;
        // unbounded on purpose: the subscriber's reader thread must never block,
        // or broker backpressure would stall the publishing inference stage
        let (record_tx, record_rx) = channel::<DefectRecord>();
        twin.subscribe(&defects_topic(cfg.node_id), QoS::AtLeastOnce, move |d| match DefectRecord::decode(&d.payload) {
            Ok(r) => {
                let _ = record_tx.send(r);
            }
            Err(e) => log::warn!("dropping undecodable defect record: {e}"),
        })?;

        std::thread::scope(|s| {
            let acq = s.spawn(move || self.acquire(cfg, state_rx, item_tx));
            let inf = s.spawn(move || self.infer(cfg, item_rx, done_tx));
            let control = self.control(cfg, &twin, state_tx, done_rx, record_rx);
            let acq = acq.join().expect("acquisition thread panicked");
            let inf = inf.join().expect("inference thread panicked");
            match (control, acq, inf) {
                (Ok(r), Ok(()), Ok(())) => Ok(r),
                (c, a, i) => {
                    // the root cause is the first error that is not a stall of a
                    // neighbouring stage
                    let errs: Vec<TwinError> = [c.err(), a.err(), i.err()].into_iter().flatten().collect();
                    let pos = errs.iter().position(|e| !matches!(e, TwinError::Stalled(_))).unwrap_or(0);
                    Err(errs.into_iter().nth(pos).expect("at least one error"))
                }
            }
        })
        .and_then(|records| {
            twin.disconnect()?;
            Ok(records)
        })
    }

    fn acquire(&self, cfg: &LoopConfig, states: Receiver<(u32, ProcessState)>, out: SyncSender<Item>) -> Result<()> {
        let [_, h, w] = self.model.input_shape();
        for (layer, state) in states {
            let sites = sample_sites(&state, cfg.sites, cfg.layer_seed(layer))?;
            for (i, class) in sites.iter().enumerate() {
                let Some(class) = class else { continue };
                let seed = derive_seed(cfg.seed, STREAM_RENDER, layer as u64 * cfg.sites as u64 + i as u64);
                let (image, ann) = synth_image(class.id(), seed, &self.synth)?;
                let item = Item::Site {
                    layer,
                    site: i as u32,
                    input: preprocess(&image, h, w)?,
                    bbox: ann.bbox,
                };
                out.send(item).map_err(|_| stalled("inference"))?;
            }
            out.send(Item::LayerEnd {
                layer,
                truth: DefectCounts::from_sites(&sites),
            })
            .map_err(|_| stalled("inference"))?;
        }
        Ok(())
    }

    fn infer(&self, cfg: &LoopConfig, items: Receiver<Item>, done: SyncSender<LayerDone>) -> Result<()> {
        let client = Client::connect(
            (self.connect)()?,
            ClientOptions::new(format!("amqc-node-{}", cfg.node_id)),
        )?;
        let topic = defects_topic(cfg.node_id);
        let mut pending: Vec<(u32, u32, Tensor<f32>, BBox)> = Vec::new();
        let mut published = 0usize;
        let flush = |pending: &mut Vec<(u32, u32, Tensor<f32>, BBox)>| -> Result<usize> {
            if pending.is_empty() {
                return Ok(0);
            }
            let inputs: Vec<Tensor<f32>> = pending.iter().map(|p| p.2.clone()).collect();
            let batch = Tensor::stack(&inputs).map_err(|e| QuantError::Cnn(CnnError::from(e)))?;
            let probs = self.model.forward(&batch)?;
            let k = probs.shape()[1];
            for (row, (layer, site, _, bbox)) in pending.iter().enumerate() {
                let p = &probs.data()[row * k..(row + 1) * k];
                let (class, conf) = p
                    .iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best });
                let record = DefectRecord::new(
                    *layer as u64 * cfg.sites as u64 + *site as u64,
                    *layer,
                    class as u8,
                    (conf as f64).clamp(0.0, 1.0),
                    [bbox.xmin, bbox.ymin, bbox.xmax, bbox.ymax].map(|v| v.min(u16::MAX as u32) as u16),
                    cfg.node_id,
                )?;
                client.publish(&topic, &record.encode(), QoS::AtLeastOnce)?;
            }
            let n = pending.len();
            pending.clear();
            Ok(n)
        };
        for item in items {
            match item {
                Item::Site { layer, site, input, bbox } => {
                    pending.push((layer, site, input, bbox));
                    if pending.len() >= self.batch_size {
                        published += flush(&mut pending)?;
                    }
                }
                Item::LayerEnd { layer, truth } => {
                    published += flush(&mut pending)?;
                    client.flush(self.delivery_timeout)?;
                    done.send(LayerDone { layer, truth, published })
                        .map_err(|_| stalled("control"))?;
                    published = 0;
                }
            }
        }
        client.disconnect()?;
        Ok(())
    }

    fn control(
        &self,
        cfg: &LoopConfig,
        twin: &Client,
        states: SyncSender<(u32, ProcessState)>,
        done: Receiver<LayerDone>,
        records: Receiver<DefectRecord>,
    ) -> Result<Vec<LayerRecord>> {
        let control = control_topic(cfg.node_id);
        let mut state = cfg.start;
        let mut out = Vec::with_capacity(cfg.layers as usize);
        for layer in 0..cfg.layers {
            states.send((layer, state)).map_err(|_| stalled("acquisition"))?;
            let d = done.recv().map_err(|_| stalled("inference"))?;
            assert_eq!(d.layer, layer);
            let mut seen = HashSet::new();
            let mut classified = [0u32; CLASS_COUNT];
            while seen.len() < d.published {
                let r = match records.recv_timeout(self.delivery_timeout) {
                    Ok(r) => r,
                    Err(RecvTimeoutError::Timeout) => {
                        return Err(TwinError::Stalled(format!(
                            "layer {layer}: {} of {} defect records arrived",
                            seen.len(),
                            d.published
                        )))
                    }
                    Err(RecvTimeoutError::Disconnected) => return Err(stalled("telemetry")),
                };
                // retransmitted copies of earlier records are skipped
                if r.layer_index == layer && seen.insert(r.timestamp_us) {
                    classified[r.class_id as usize] += 1;
                }
            }
            let action = if cfg.controller {
                decide_action(
                    &DefectCounts {
                        counts: classified,
                        sites: cfg.sites,
                    },
                    &cfg.thresholds,
                )
            } else {
                ControlAction::NONE
            };
            twin.publish(&control, &action.encode(), QoS::AtLeastOnce)?;
            out.push(LayerRecord {
                layer,
                state,
                energy_density: state.energy_density(),
                counts: d.truth.counts,
                defects: d.truth.total(),
                classified: Some(classified),
                action,
            });
            state = state.apply(&action);
        }
        Ok(out)
    }
}

