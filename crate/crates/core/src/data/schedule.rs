use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How classes are split into incremental tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// A large first task (at most half the classes) followed by tasks of
    /// `task_size` classes.
    Short { task_size: Option<usize> },
    /// Every task has `task_size` classes.
    Long { task_size: Option<usize> },
    Explicit(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    tasks: Vec<Vec<usize>>,
}

impl TaskSchedule {
    /// Validates an explicit partition: non-empty tasks, pairwise disjoint.
    pub fn new(tasks: Vec<Vec<usize>>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Schedule("schedule has no tasks".into()));
        }
        let mut seen = BTreeSet::new();
        for (t, task) in tasks.iter().enumerate() {
            if task.is_empty() {
                return Err(Error::Schedule(format!("task {} has no classes", t + 1)));
            }
            for &c in task {
                if !seen.insert(c) {
                    return Err(Error::Schedule(format!(
                        "class {c} appears in more than one task"
                    )));
                }
            }
        }
        Ok(Self { tasks })
    }

    pub fn tasks(&self) -> &[Vec<usize>] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(Vec::len).collect()
    }

    pub fn all_classes(&self) -> BTreeSet<usize> {
        self.tasks.iter().flatten().copied().collect()
    }

    /// Classes of tasks `0..=task`.
    pub fn seen_through(&self, task: usize) -> Vec<usize> {
        self.tasks[..=task].iter().flatten().copied().collect()
    }
}

/// Smallest divisor of `classes` that is at least 2.
fn default_task_size(classes: usize) -> usize {
    (2..=classes).find(|k| classes % k == 0).unwrap_or(classes)
}

fn chunk(classes: usize, first: usize, size: usize) -> Vec<Vec<usize>> {
    let mut tasks = vec![(0..first).collect::<Vec<_>>()];
    let mut start = first;
    while start < classes {
        tasks.push((start..start + size).collect());
        start += size;
    }
    tasks
}

/// Builds a schedule over class ids `0..classes`.
///
/// The short regime puts the largest feasible first task of at most
/// `classes / 2` classes in front, so that the remainder splits evenly into
/// tasks of `task_size` (16 classes → 8,2,2,2,2; 27 → 12,3,3,3,3,3).
pub fn make_schedule(classes: usize, regime: &Regime) -> Result<TaskSchedule> {
    if classes < 2 {
        return Err(Error::Schedule(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    match regime {
        Regime::Explicit(tasks) => {
            let s = TaskSchedule::new(tasks.clone())?;
            if let Some(&bad) = s.all_classes().iter().find(|&&c| c >= classes) {
                return Err(Error::Schedule(format!(
                    "class {bad} outside 0..{classes}"
                )));
            }
            if s.all_classes().len() != classes {
                return Err(Error::Schedule(format!(
                    "explicit schedule covers {} of {classes} classes",
                    s.all_classes().len()
                )));
            }
            Ok(s)
        }
        Regime::Long { task_size } => {
            let size = task_size.unwrap_or_else(|| default_task_size(classes));
            if size == 0 || classes % size != 0 {
                return Err(Error::Schedule(format!(
                    "{classes} classes do not split into tasks of {size}; pass an explicit list"
                )));
            }
            TaskSchedule::new(chunk(classes, size, size))
        }
        Regime::Short { task_size } => {
            let size = task_size.unwrap_or_else(|| default_task_size(classes));
            let first = (1..=classes / 2)
                .rev()
                .find(|&f| size > 0 && (classes - f) % size == 0);
            match first {
                Some(first) => TaskSchedule::new(chunk(classes, first, size)),
                None => Err(Error::Schedule(format!(
                    "no first task of at most {} classes leaves a remainder divisible by {size}; pass an explicit list",
                    classes / 2
                ))),
            }
        }
    }
}
