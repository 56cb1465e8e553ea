//! Training-side service: collects a task's data, trains on `TRAIN_DONE`
//! and pushes the new lightweight model.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use csicl_core::data::{parse_csv, CsiMatrix, Dataset};
use csicl_core::model::Network;
use csicl_core::trainer::{Learner, SessionOptions, StageTiming, TrainConfig};

use crate::bundle::serialize_light;
use crate::transport::Transport;
use crate::wire::{code, error_for, Frame, WireError, WireMessage};

pub struct EdgeService {
    cfg: TrainConfig,
    pending: Option<Dataset>,
    learner: Option<Learner>,
    latest: Option<Vec<u8>>,
    timings: Vec<StageTiming>,
}

impl EdgeService {
    pub fn new(cfg: TrainConfig) -> csicl_core::Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            pending: None,
            learner: None,
            latest: None,
            timings: Vec::new(),
        })
    }

    pub fn learner(&self) -> Option<&Learner> {
        self.learner.as_ref()
    }

    /// The most recent pushed bundle.
    pub fn latest_bundle(&self) -> Option<&[u8]> {
        self.latest.as_deref()
    }

    pub fn pending_samples(&self) -> usize {
        self.pending.as_ref().map_or(0, Dataset::len)
    }

    pub fn timings(&self) -> &[StageTiming] {
        &self.timings
    }

    /// Reply to one inbound frame, if it needs one.
    pub fn handle(&mut self, frame: &Frame) -> Option<WireMessage> {
        let msg = match WireMessage::from_frame(frame) {
            Ok(m) => m,
            Err(e) => return Some(error_for(&e)),
        };
        match msg {
            WireMessage::Hello => Some(match &self.latest {
                Some(b) => WireMessage::ModelPush(b.clone()),
                None => WireMessage::Ack,
            }),
            WireMessage::DataBatch(csv) => Some(self.data_batch(&csv)),
            WireMessage::TrainDone => Some(self.train_done()),
            WireMessage::InferReq(m) => Some(self.infer(&m)),
            WireMessage::Ack => None,
            WireMessage::Error { code, message } => {
                log::warn!("peer reported error {code}: {message}");
                None
            }
            WireMessage::ModelPush(_) | WireMessage::InferResp { .. } => Some(WireMessage::error(
                code::UNEXPECTED,
                format!("frame type {} is not accepted by the edge", frame.kind),
            )),
        }
    }

    fn data_batch(&mut self, csv: &str) -> WireMessage {
        let batch = match parse_csv(csv) {
            Ok(b) => b,
            Err(e) => return WireMessage::error(code::BATCH_UNPARSEABLE, e.to_string()),
        };
        if batch.is_empty() {
            return WireMessage::error(code::BATCH_LABELS, "batch has no samples");
        }
        let expected = match (&self.pending, &self.learner) {
            (Some(p), _) => Some((p.n, p.d, "the pending batch")),
            (None, Some(l)) => Some((0, l.fsm().net.dim(), "the model")),
            (None, None) => None,
        };
        if let Some((n, d, what)) = expected {
            if batch.d != d || (n != 0 && batch.n != n) {
                return WireMessage::error(
                    code::BATCH_SHAPE,
                    format!("batch is {}x{}, inconsistent with {what}", batch.n, batch.d),
                );
            }
        }
        if let Some(l) = &self.learner {
            let known = &l.fsm().net.classifier;
            if let Some(c) = batch.classes().into_iter().find(|c| known.index_of(*c).is_some()) {
                return WireMessage::error(
                    code::BATCH_LABELS,
                    format!("class {c} was learned in an earlier task"),
                );
            }
        }
        match self.pending.as_mut() {
            Some(p) => p.samples.extend(batch.samples),
            None => self.pending = Some(batch),
        }
        WireMessage::Ack
    }

    fn train_done(&mut self) -> WireMessage {
        let Some(data) = self.pending.take() else {
            return WireMessage::error(code::NOTHING_TO_TRAIN, "no data batches since the last task");
        };
        if self.learner.is_none() {
            let opts = SessionOptions {
                distill: true,
                naive: false,
            };
            match Learner::new(data.n, data.d, &self.cfg, opts) {
                Ok(l) => self.learner = Some(l),
                Err(e) => return WireMessage::error(code::TRAINING_FAILED, e.to_string()),
            }
        }
        let learner = self.learner.as_mut().expect("created above");
        if let Err(e) = learner.learn(&data, &mut self.timings) {
            return WireMessage::error(code::TRAINING_FAILED, e.to_string());
        }
        let lwm = learner.lwm().expect("the edge always distills");
        log::info!("task {} trained, pushing model", lwm.tasks_learned);
        let bundle = serialize_light(lwm);
        self.latest = Some(bundle.clone());
        WireMessage::ModelPush(bundle)
    }

    fn infer(&self, m: &CsiMatrix) -> WireMessage {
        match self.learner.as_ref().and_then(Learner::lwm) {
            None => WireMessage::error(code::MODEL_ABSENT, "no model trained yet"),
            Some(lwm) => infer_reply(&lwm.net, m),
        }
    }
}

/// `INFER_RESP` for one request, interpolating missing cells first.
pub(crate) fn infer_reply(net: &Network, m: &CsiMatrix) -> WireMessage {
    match predict(net, m) {
        Ok((class, logits)) => WireMessage::InferResp {
            class: class as u32,
            logits: logits.iter().map(|&v| v as f32).collect(),
        },
        Err(e) => WireMessage::error(code::INFERENCE_FAILED, e.to_string()),
    }
}

pub(crate) fn predict(net: &Network, m: &CsiMatrix) -> csicl_core::Result<(usize, Vec<f64>)> {
    let filled;
    let x = if m.has_missing() {
        filled = m.interpolate_missing()?;
        filled.values()
    } else {
        m.values()
    };
    let logits = net.logits(x)?;
    if logits.cols() == 0 {
        return Err(csicl_core::Error::State("model has no classes".into()));
    }
    Ok((net.classifier.classes[logits.argmax_row(0)], logits.data().to_vec()))
}

/// Serves one connection until the peer disconnects. Undecodable framing
/// gets an `ERROR` reply and closes the connection, since the stream can no
/// longer be resynchronized.
pub fn serve_connection<T: Transport>(mut conn: T, service: &Mutex<EdgeService>) {
    loop {
        let frame = match conn.recv_frame() {
            Ok(Some(f)) => f,
            Ok(None) => return,
            Err(e @ WireError::BadLength(_)) => {
                let _ = conn.send(&error_for(&e));
                return;
            }
            Err(e) => {
                log::debug!("connection dropped: {e}");
                return;
            }
        };
        let reply = {
            let mut svc = service.lock().unwrap_or_else(|p| p.into_inner());
            svc.handle(&frame)
        };
        if let Some(reply) = reply {
            if let Err(e) = conn.send(&reply) {
                log::debug!("could not reply: {e}");
                return;
            }
        }
    }
}

/// TCP front end running one thread per connection.
pub struct EdgeServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl EdgeServer {
    pub fn bind(addr: &str, service: Arc<Mutex<EdgeService>>) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        Self::start(listener, service)
    }

    pub fn start(listener: TcpListener, service: Arc<Mutex<EdgeService>>) -> io::Result<Self> {
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let accept = thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                match stream {
                    Ok(s) => {
                        let svc = Arc::clone(&service);
                        thread::spawn(move || serve_connection(s, &svc));
                    }
                    Err(e) => log::warn!("accept failed: {e}"),
                }
            }
        });
        Ok(Self {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting new connections; open ones finish on their own.
    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for EdgeServer {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}
