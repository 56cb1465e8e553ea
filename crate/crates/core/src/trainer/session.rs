use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy_counts, average_accuracy, forgetting};
use super::stages::{train_incremental, train_initial, train_naive_task};
use super::TrainConfig;
use crate::data::{Dataset, TaskSchedule};
use crate::distill::{distill_incremental, distill_initial};
use crate::error::{Error, Result};
use crate::model::{FullModel, LightModel, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionOptions {
    /// Train the lightweight student alongside the full model.
    pub distill: bool,
    /// Also run the naive fine-tuning baseline.
    pub naive: bool,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            distill: true,
            naive: false,
        }
    }
}

/// Accuracy history of one model family over a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    /// `alpha[t][j]`: accuracy on task `j`'s test set after task `t`.
    pub alpha: Vec<Vec<f64>>,
    /// `A_t`: accuracy over the union of the test sets seen through `t`.
    pub accuracy: Vec<f64>,
    pub average_accuracy: f64,
    pub forgetting: Option<f64>,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub task: usize,
    pub stage: String,
    pub seconds: f64,
}

/// Deterministic record of a session. Wall-clock timings are kept apart in
/// `timings` and are not serialized with the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub seed: u64,
    pub schedule: Vec<Vec<usize>>,
    pub fsm: ArmReport,
    pub lwm: Option<ArmReport>,
    pub naive: Option<ArmReport>,
    #[serde(skip)]
    pub timings: Vec<StageTiming>,
}

impl SessionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }

    pub fn timings_json(&self) -> String {
        serde_json::to_string_pretty(&self.timings).expect("timings are always serializable")
    }

    /// `model,after_task,eval_task,accuracy`, tasks 1-based.
    pub fn alpha_csv(&self) -> String {
        let mut out = String::from("model,after_task,eval_task,accuracy\n");
        let arms = [("fsm", Some(&self.fsm)), ("lwm", self.lwm.as_ref()), ("naive", self.naive.as_ref())];
        for (name, arm) in arms {
            let Some(arm) = arm else { continue };
            for (t, row) in arm.alpha.iter().enumerate() {
                for (j, a) in row.iter().enumerate() {
                    let _ = writeln!(out, "{name},{},{},{a}", t + 1, j + 1);
                }
            }
        }
        out
    }
}

/// Models available after each task, handed to the session observer.
pub struct TaskOutcome<'a> {
    /// 1-based task index.
    pub task: usize,
    pub classes: &'a [usize],
    pub fsm: &'a FullModel,
    pub lwm: Option<&'a LightModel>,
}

#[derive(Default)]
struct Tracker {
    alpha: Vec<Vec<f64>>,
    accuracy: Vec<f64>,
}

impl Tracker {
    fn record(&mut self, net: &Network, tests: &[Dataset]) -> Result<()> {
        let mut row = Vec::with_capacity(tests.len());
        let (mut correct, mut total) = (0, 0);
        for t in tests {
            let (c, n) = accuracy_counts(net, t)?;
            row.push(c as f64 / n as f64);
            correct += c;
            total += n;
        }
        self.alpha.push(row);
        self.accuracy.push(correct as f64 / total as f64);
        Ok(())
    }

    fn finish(self, params: usize) -> ArmReport {
        ArmReport {
            average_accuracy: average_accuracy(&self.accuracy).unwrap_or(0.0),
            forgetting: forgetting(&self.alpha),
            alpha: self.alpha,
            accuracy: self.accuracy,
            params,
        }
    }
}

fn task_split(data: &Dataset, classes: &[usize], what: &str, task: usize) -> Result<Dataset> {
    let part = data.filter_classes(classes);
    if part.is_empty() {
        return Err(Error::EmptyData(format!(
            "no {what} samples for task {task} (classes {classes:?})"
        )));
    }
    Ok(part)
}

fn timed<T>(timings: &mut Vec<StageTiming>, task: usize, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    timings.push(StageTiming {
        task,
        stage: stage.to_string(),
        seconds: start.elapsed().as_secs_f64(),
    });
    Ok(out)
}

/// Independent random stream per model family, so that enabling one arm
/// does not change another's results.
fn arm_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Models of one session, trained one task at a time. A failed task leaves
/// every model as it was before the call.
#[derive(Clone)]
pub struct Learner {
    cfg: TrainConfig,
    fsm: FullModel,
    lwm: Option<LightModel>,
    naive: Option<Network>,
    distill: bool,
    rng: ChaCha8Rng,
    lwm_rng: ChaCha8Rng,
    naive_rng: ChaCha8Rng,
}

impl Learner {
    pub fn new(n: usize, d: usize, cfg: &TrainConfig, opts: SessionOptions) -> Result<Self> {
        cfg.validate()?;
        let mut rng = arm_rng(cfg.seed, 0);
        let mut naive_rng = arm_rng(cfg.seed, 2);
        let fsm = FullModel::init(&mut rng, n, d, &cfg.model)?;
        let naive = if opts.naive {
            Some(Network::init(&mut naive_rng, n, d, &cfg.model)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            fsm,
            lwm: None,
            naive,
            distill: opts.distill,
            rng,
            lwm_rng: arm_rng(cfg.seed, 1),
            naive_rng,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn fsm(&self) -> &FullModel {
        &self.fsm
    }

    pub fn lwm(&self) -> Option<&LightModel> {
        self.lwm.as_ref()
    }

    pub fn naive(&self) -> Option<&Network> {
        self.naive.as_ref()
    }

    pub fn tasks_learned(&self) -> usize {
        self.fsm.tasks_learned
    }

    /// Trains every enabled model on the next task. Returns its 1-based index.
    pub fn learn(&mut self, data: &Dataset, timings: &mut Vec<StageTiming>) -> Result<usize> {
        let mut next = self.clone();
        let task = next.fsm.tasks_learned + 1;
        let cfg = &next.cfg;
        let mut stage = Vec::new();
        timed(&mut stage, task, "fsm", || {
            if task == 1 {
                train_initial(&mut next.fsm, data, cfg, &mut next.rng)
            } else {
                train_incremental(&mut next.fsm, data, cfg, &mut next.rng)
            }
        })?;
        if next.distill {
            let student = timed(&mut stage, task, "lwm", || match &next.lwm {
                None => distill_initial(&next.fsm, data, cfg, &mut next.lwm_rng),
                Some(prev) => distill_incremental(&next.fsm, prev, data, cfg, &mut next.lwm_rng),
            })?;
            next.lwm = Some(student);
        }
        if let Some(net) = next.naive.as_mut() {
            let rng = &mut next.naive_rng;
            timed(&mut stage, task, "naive", || train_naive_task(net, data, cfg, rng))?;
        }
        *self = next;
        timings.extend(stage);
        Ok(task)
    }
}

/// Runs the whole task sequence. `observer` sees the models after every
/// task, e.g. to export bundles.
pub fn run_session<F>(
    train: &Dataset,
    test: &Dataset,
    schedule: &TaskSchedule,
    cfg: &TrainConfig,
    opts: SessionOptions,
    mut observer: F,
) -> Result<SessionReport>
where
    F: FnMut(TaskOutcome<'_>) -> Result<()>,
{
    cfg.validate()?;
    if train.n != test.n || train.d != test.d {
        return Err(Error::dim(
            "session",
            format!("train is {}x{}, test is {}x{}", train.n, train.d, test.n, test.d),
        ));
    }
    let mut learner = Learner::new(train.n, train.d, cfg, opts)?;
    let mut tests = Vec::with_capacity(schedule.len());
    let (mut fsm_t, mut lwm_t, mut naive_t) = (Tracker::default(), Tracker::default(), Tracker::default());
    let mut timings = Vec::new();

    for (idx, classes) in schedule.tasks().iter().enumerate() {
        let task = idx + 1;
        let data = task_split(train, classes, "training", task)?;
        tests.push(task_split(test, classes, "test", task)?);
        log::info!("task {task}/{}: classes {classes:?}, {} samples", schedule.len(), data.len());

        learner.learn(&data, &mut timings)?;
        fsm_t.record(&learner.fsm.net, &tests)?;
        if let Some(lwm) = &learner.lwm {
            lwm_t.record(&lwm.net, &tests)?;
        }
        if let Some(net) = &learner.naive {
            naive_t.record(net, &tests)?;
        }
        observer(TaskOutcome {
            task,
            classes,
            fsm: &learner.fsm,
            lwm: learner.lwm.as_ref(),
        })?;
    }

    Ok(SessionReport {
        seed: cfg.seed,
        schedule: schedule.tasks().to_vec(),
        fsm: fsm_t.finish(learner.fsm.param_count()),
        lwm: learner.lwm.as_ref().map(|m| lwm_t.finish(m.param_count())),
        naive: learner.naive.as_ref().map(|net| naive_t.finish(net.param_count())),
        timings,
    })
}
