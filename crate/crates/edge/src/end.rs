//! Inference side: holds the deployed bundle and answers requests.

use std::sync::{Arc, RwLock};

use csicl_core::data::{CsiMatrix, Dataset};
use thiserror::Error;

use crate::bundle::{deserialize, Bundle, BundleError};
use crate::edge::{infer_reply, predict};
use crate::transport::Transport;
use crate::wire::{code, error_for, Frame, WireError, WireMessage};

#[derive(Debug, Error)]
pub enum EndError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("peer error {code}: {message}")]
    Remote { code: u16, message: String },
    #[error("no model deployed")]
    ModelAbsent,
    #[error(transparent)]
    Inference(#[from] csicl_core::Error),
    #[error("connection closed")]
    Closed,
    #[error("unexpected reply type {0}")]
    Unexpected(u8),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Dataset label of the winning logit.
    pub class: usize,
    pub logits: Vec<f64>,
    /// Task index of the bundle that produced the prediction.
    pub task: u32,
}

/// The deployed model. Pushes swap it whole, so a request sees either the
/// old bundle or the new one.
#[derive(Default)]
pub struct EndClient {
    current: RwLock<Option<Arc<Bundle>>>,
}

impl EndClient {
    pub fn new() -> Self {
        Self::default()
    }

    /// Validates and installs a bundle, returning its task index. A rejected
    /// bundle leaves the previous model in place.
    pub fn install(&self, bytes: &[u8]) -> Result<u32, BundleError> {
        let bundle = Arc::new(deserialize(bytes)?);
        let task = bundle.meta.task;
        *self.current.write().unwrap_or_else(|p| p.into_inner()) = Some(bundle);
        Ok(task)
    }

    pub fn current(&self) -> Option<Arc<Bundle>> {
        self.current.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn infer(&self, m: &CsiMatrix) -> Result<Prediction, EndError> {
        let bundle = self.current().ok_or(EndError::ModelAbsent)?;
        let (class, logits) = predict(bundle.model.network(), m)?;
        Ok(Prediction {
            class,
            logits,
            task: bundle.meta.task,
        })
    }

    pub fn handle(&self, frame: &Frame) -> Option<WireMessage> {
        let msg = match WireMessage::from_frame(frame) {
            Ok(m) => m,
            Err(e) => return Some(error_for(&e)),
        };
        match msg {
            WireMessage::ModelPush(bytes) => Some(match self.install(&bytes) {
                Ok(_) => WireMessage::Ack,
                Err(e) => WireMessage::error(e.code(), e.to_string()),
            }),
            WireMessage::InferReq(m) => Some(match self.current() {
                None => WireMessage::error(code::MODEL_ABSENT, "no model deployed"),
                Some(b) => infer_reply(b.model.network(), &m),
            }),
            WireMessage::Hello => Some(WireMessage::Ack),
            WireMessage::Ack => None,
            WireMessage::Error { code, message } => {
                log::warn!("peer reported error {code}: {message}");
                None
            }
            _ => Some(WireMessage::error(
                code::UNEXPECTED,
                format!("frame type {} is not accepted by the end device", frame.kind),
            )),
        }
    }
}

/// Client half of a session with the edge.
pub struct EndSession<T: Transport> {
    conn: T,
    client: Arc<EndClient>,
}

impl<T: Transport> EndSession<T> {
    pub fn new(conn: T, client: Arc<EndClient>) -> Self {
        Self { conn, client }
    }

    pub fn client(&self) -> &Arc<EndClient> {
        &self.client
    }

    fn reply(&mut self) -> Result<WireMessage, EndError> {
        let frame = self.conn.recv_frame()?.ok_or(EndError::Closed)?;
        match WireMessage::from_frame(&frame)? {
            WireMessage::Error { code, message } => Err(EndError::Remote { code, message }),
            m => Ok(m),
        }
    }

    fn expect_ack(&mut self) -> Result<(), EndError> {
        match self.reply()? {
            WireMessage::Ack => Ok(()),
            m => Err(EndError::Unexpected(m.to_frame().kind)),
        }
    }

    /// Installs a pushed bundle and acknowledges it, or reports why not.
    fn accept_push(&mut self, bytes: &[u8]) -> Result<u32, EndError> {
        match self.client.install(bytes) {
            Ok(task) => {
                self.conn.send(&WireMessage::Ack)?;
                Ok(task)
            }
            Err(e) => {
                self.conn.send(&WireMessage::error(e.code(), e.to_string()))?;
                Err(e.into())
            }
        }
    }

    /// Greets the edge. Returns the task index of a model it re-pushed, if any.
    pub fn hello(&mut self) -> Result<Option<u32>, EndError> {
        self.conn.send(&WireMessage::Hello)?;
        match self.reply()? {
            WireMessage::Ack => Ok(None),
            WireMessage::ModelPush(b) => self.accept_push(&b).map(Some),
            m => Err(EndError::Unexpected(m.to_frame().kind)),
        }
    }

    pub fn upload_csv(&mut self, csv: String) -> Result<(), EndError> {
        self.conn.send(&WireMessage::DataBatch(csv))?;
        self.expect_ack()
    }

    pub fn upload(&mut self, data: &Dataset) -> Result<(), EndError> {
        self.upload_csv(data.to_csv())
    }

    /// Ends the current task and installs the model trained on it.
    pub fn train_done(&mut self) -> Result<u32, EndError> {
        self.conn.send(&WireMessage::TrainDone)?;
        match self.reply()? {
            WireMessage::ModelPush(b) => self.accept_push(&b),
            m => Err(EndError::Unexpected(m.to_frame().kind)),
        }
    }

    /// Asks the edge to classify with its own copy of the model.
    pub fn remote_infer(&mut self, m: &CsiMatrix) -> Result<(u32, Vec<f32>), EndError> {
        self.conn.send(&WireMessage::InferReq(m.clone()))?;
        match self.reply()? {
            WireMessage::InferResp { class, logits } => Ok((class, logits)),
            m => Err(EndError::Unexpected(m.to_frame().kind)),
        }
    }

    pub fn into_inner(self) -> T {
        self.conn
    }
}
