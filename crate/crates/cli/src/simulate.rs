//! Scripted edge/end session over TCP or an in-process channel.

use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::anyhow;
use clap::{Args, ValueEnum};
use csicl_core::data::Dataset;
use csicl_edge::wire::{Frame, WireError, WireMessage};
use csicl_edge::{channel_pair, serve_connection, EdgeServer, EdgeService, EndClient, EndSession, Transport};
use serde_json::{json, Value};

use crate::failure::{write_output, CliResult, Failure};
use crate::source::{DataArgs, Prepared};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Tcp,
    Inproc,
    Both,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = Mode::Both)]
    pub transport: Mode,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Edge port; 0 picks a free one.
    #[arg(long, default_value_t = 0)]
    pub port: u16,
    /// Drop the end device right after it requests training for this task,
    /// then reconnect with a fresh device.
    #[arg(long)]
    pub kill_end_at: Option<usize>,
    /// Inputs compared between the end device and the edge copy.
    #[arg(long, default_value_t = 100)]
    pub probes: usize,
}

type Transcript = Arc<Mutex<Vec<String>>>;

fn describe(frame: &Frame) -> String {
    match WireMessage::from_frame(frame) {
        Ok(WireMessage::DataBatch(csv)) => format!("DATA_BATCH rows={}", csv.lines().count().saturating_sub(1)),
        Ok(WireMessage::ModelPush(b)) => format!("MODEL_PUSH bytes={}", b.len()),
        Ok(WireMessage::InferReq(_)) => "INFER_REQ".into(),
        Ok(WireMessage::InferResp { class, .. }) => format!("INFER_RESP class={class}"),
        Ok(WireMessage::Error { code, message }) => format!("ERROR code={code} {message}"),
        Ok(WireMessage::Hello) => "HELLO".into(),
        Ok(WireMessage::TrainDone) => "TRAIN_DONE".into(),
        Ok(WireMessage::Ack) => "ACK".into(),
        Err(e) => format!("type={} undecodable: {e}", frame.kind),
    }
}

/// End-side transport that records every frame.
struct Recorder {
    inner: Box<dyn Transport>,
    log: Transcript,
    quiet_probes: bool,
}

impl Recorder {
    fn note(&self, line: String) {
        self.log.lock().unwrap_or_else(|p| p.into_inner()).push(line);
    }

    fn is_probe(frame: &Frame) -> bool {
        frame.kind == csicl_edge::wire::INFER_REQ || frame.kind == csicl_edge::wire::INFER_RESP
    }
}

impl Transport for Recorder {
    fn send_frame(&mut self, frame: &Frame) -> Result<(), WireError> {
        if !(self.quiet_probes && Self::is_probe(frame)) {
            self.note(format!("-> {}", describe(frame)));
        }
        self.inner.send_frame(frame)
    }

    fn recv_frame(&mut self) -> Result<Option<Frame>, WireError> {
        let f = self.inner.recv_frame()?;
        if let Some(frame) = &f {
            if !(self.quiet_probes && Self::is_probe(frame)) {
                self.note(format!("<- {}", describe(frame)));
            }
        }
        Ok(f)
    }
}

enum Link {
    Tcp(EdgeServer),
    Inproc,
}

impl Link {
    fn connect(&self, svc: &Arc<Mutex<EdgeService>>) -> CliResult<Box<dyn Transport>> {
        match self {
            Link::Tcp(server) => {
                let s = TcpStream::connect(server.local_addr()).map_err(Failure::environment)?;
                Ok(Box::new(s))
            }
            Link::Inproc => {
                let (edge_side, end_side) = channel_pair();
                let svc = Arc::clone(svc);
                thread::spawn(move || serve_connection(edge_side, &svc));
                Ok(Box::new(end_side))
            }
        }
    }
}

pub struct Outcome {
    pub name: &'static str,
    pub transcript: Vec<String>,
    pub pushes: usize,
    /// End-side accuracy over the seen test classes after each task.
    pub accuracy: Vec<f64>,
    pub final_bundle: Vec<u8>,
    pub agree: usize,
    pub probes: usize,
    pub max_logit_gap: f64,
}

fn session(
    link: &Link,
    svc: &Arc<Mutex<EdgeService>>,
    log: &Transcript,
    quiet_probes: bool,
) -> CliResult<EndSession<Recorder>> {
    let conn = link.connect(svc)?;
    Ok(EndSession::new(
        Recorder {
            inner: conn,
            log: Arc::clone(log),
            quiet_probes,
        },
        Arc::new(EndClient::new()),
    ))
}

fn protocol(e: csicl_edge::EndError) -> Failure {
    Failure::internal(e).context("protocol step failed")
}

fn end_accuracy(end: &EndClient, test: &Dataset) -> CliResult<f64> {
    let mut correct = 0;
    for s in &test.samples {
        if end.infer(&s.matrix).map_err(protocol)?.class == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len().max(1) as f64)
}

fn wait_for_task(svc: &Mutex<EdgeService>, task: usize) -> CliResult<()> {
    let start = Instant::now();
    loop {
        let done = svc
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .learner()
            .is_some_and(|l| l.tasks_learned() >= task);
        if done {
            return Ok(());
        }
        if start.elapsed() > Duration::from_secs(600) {
            return Err(Failure::internal(anyhow!("edge never finished task {task}")));
        }
        thread::sleep(Duration::from_millis(20));
    }
}

fn drive(
    name: &'static str,
    link: Link,
    svc: Arc<Mutex<EdgeService>>,
    args: &SimulateArgs,
    p: &Prepared,
) -> CliResult<Outcome> {
    let log: Transcript = Arc::default();
    let mut end = session(&link, &svc, &log, args.probes > 0)?;
    end.hello().map_err(protocol)?;

    let mut accuracy = Vec::new();
    let mut seen = Vec::new();
    for (idx, classes) in p.schedule.tasks().iter().enumerate() {
        let task = idx + 1;
        seen.extend_from_slice(classes);
        end.upload(&p.train.filter_classes(classes)).map_err(protocol)?;
        if args.kill_end_at == Some(task) {
            let mut conn = end.into_inner();
            conn.send(&WireMessage::TrainDone).map_err(|e| protocol(e.into()))?;
            log.lock().unwrap_or_else(|p| p.into_inner()).push("-- end device killed".into());
            drop(conn);
            wait_for_task(&svc, task)?;
            log.lock().unwrap_or_else(|p| p.into_inner()).push("-- end device restarted".into());
            end = session(&link, &svc, &log, args.probes > 0)?;
            let pushed = end.hello().map_err(protocol)?;
            if pushed != Some(task as u32) {
                return Err(Failure::internal(anyhow!(
                    "restarted end device got task {pushed:?}, expected {task}"
                )));
            }
        } else {
            let got = end.train_done().map_err(protocol)?;
            if got != task as u32 {
                return Err(Failure::internal(anyhow!("pushed task {got}, expected {task}")));
            }
        }
        accuracy.push(end_accuracy(end.client(), &p.test.filter_classes(&seen))?);
    }

    let mut agree = 0;
    let mut max_gap = 0.0f64;
    let probes: Vec<_> = p.test.samples.iter().cycle().take(args.probes).collect();
    for s in &probes {
        let local = end.client().infer(&s.matrix).map_err(protocol)?;
        let (class, logits) = end.remote_infer(&s.matrix).map_err(protocol)?;
        if class as usize == local.class {
            agree += 1;
        }
        for (a, b) in logits.iter().zip(&local.logits) {
            max_gap = max_gap.max((*a as f64 - b).abs());
        }
    }

    let final_bundle = svc
        .lock()
        .unwrap_or_else(|p| p.into_inner())
        .latest_bundle()
        .map(<[u8]>::to_vec)
        .unwrap_or_default();
    drop(end);
    if let Link::Tcp(server) = link {
        server.shutdown();
    }
    let transcript = log.lock().unwrap_or_else(|p| p.into_inner()).clone();
    Ok(Outcome {
        name,
        pushes: transcript.iter().filter(|l| l.starts_with("<- MODEL_PUSH")).count(),
        transcript,
        accuracy,
        final_bundle,
        agree,
        probes: probes.len(),
        max_logit_gap: max_gap,
    })
}

fn run_tcp(args: &SimulateArgs, p: &Prepared) -> CliResult<Outcome> {
    let addr = format!("{}:{}", args.host, args.port);
    let listener = TcpListener::bind(&addr)
        .map_err(|e| Failure::environment(e).context(format!("cannot listen on {addr}")))?;
    let svc = Arc::new(Mutex::new(EdgeService::new(p.cfg.clone())?));
    let server = EdgeServer::start(listener, Arc::clone(&svc)).map_err(Failure::environment)?;
    log::info!("edge listening on {}", server.local_addr());
    drive("tcp", Link::Tcp(server), svc, args, p)
}

fn run_inproc(args: &SimulateArgs, p: &Prepared) -> CliResult<Outcome> {
    let svc = Arc::new(Mutex::new(EdgeService::new(p.cfg.clone())?));
    drive("inproc", Link::Inproc, svc, args, p)
}

fn summary(o: &Outcome) -> Value {
    json!({
        "pushes": o.pushes,
        "end_accuracy": o.accuracy,
        "bundle_bytes": o.final_bundle.len(),
        "probes": o.probes,
        "argmax_agree": o.agree,
        "max_logit_gap": o.max_logit_gap,
    })
}

/// Runs the scenario and writes `transcript_<mode>.log` and `simulate.json`.
pub fn run(args: &SimulateArgs, out: &Path) -> CliResult<Value> {
    let p = args.data.prepare()?;
    if let Some(k) = args.kill_end_at {
        if k == 0 || k > p.schedule.len() {
            return Err(Failure::usage(anyhow!(
                "--kill-end-at {k} is outside 1..={}",
                p.schedule.len()
            )));
        }
    }
    crate::failure::create_dir(out)?;
    let mut outcomes = Vec::new();
    if matches!(args.transport, Mode::Tcp | Mode::Both) {
        outcomes.push(run_tcp(args, &p)?);
    }
    if matches!(args.transport, Mode::Inproc | Mode::Both) {
        outcomes.push(run_inproc(args, &p)?);
    }

    let mut report = serde_json::Map::new();
    report.insert("schedule".into(), json!(p.schedule.tasks()));
    for o in &outcomes {
        let mut text = o.transcript.join("\n");
        text.push('\n');
        write_output(&out.join(format!("transcript_{}.log", o.name)), text)?;
        report.insert(o.name.into(), summary(o));
    }
    let equal = outcomes
        .windows(2)
        .all(|w| w[0].final_bundle == w[1].final_bundle && w[0].accuracy == w[1].accuracy);
    if outcomes.len() > 1 {
        report.insert("transports_equal".into(), json!(equal));
    }
    let report = Value::Object(report);
    write_output(&out.join("simulate.json"), serde_json::to_string_pretty(&report).expect("json"))?;

    if !equal {
        return Err(Failure::internal(anyhow!("in-process and TCP sessions diverged")));
    }
    for o in &outcomes {
        if o.agree != o.probes || o.max_logit_gap > 1e-5 {
            return Err(Failure::internal(anyhow!(
                "{}: end device disagrees with the edge copy ({}/{} argmax, gap {:e})",
                o.name,
                o.agree,
                o.probes,
                o.max_logit_gap
            )));
        }
    }
    Ok(report)
}
