//! Task streams: splitting classes across tasks and building per-task sample
//! streams, either fully disjoint or with a controlled fraction of every
//! class leaking into foreign tasks ("blurry" streams).

use rand::seq::SliceRandom;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng;

/// Stream regime. `Blurry { minor_percent }` sends that percentage of each
/// class's samples to tasks other than its home task; 0 reduces to Disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setup {
    Disjoint,
    Blurry { minor_percent: u32 },
}

impl Setup {
    /// Parses "disjoint" or "blurryM" (e.g. "blurry10"); M must be below 100.
    pub fn parse(text: &str) -> Result<Setup> {
        if text == "disjoint" {
            return Ok(Setup::Disjoint);
        }
        if let Some(m) = text.strip_prefix("blurry") {
            let minor_percent: u32 = m
                .parse()
                .map_err(|_| Error::Config(format!("bad setup {text:?}: expected disjoint or blurryM")))?;
            if minor_percent >= 100 {
                return Err(Error::Config(format!(
                    "bad setup {text:?}: the minor percentage must be below 100"
                )));
            }
            return Ok(Setup::Blurry { minor_percent });
        }
        Err(Error::Config(format!("bad setup {text:?}: expected disjoint or blurryM")))
    }

    pub fn minor_percent(&self) -> u32 {
        match self {
            Setup::Disjoint => 0,
            Setup::Blurry { minor_percent } => *minor_percent,
        }
    }

    /// The name `parse` accepts, e.g. "disjoint" or "blurry10".
    pub fn name(&self) -> String {
        match self {
            Setup::Disjoint => "disjoint".into(),
            Setup::Blurry { minor_percent } => format!("blurry{minor_percent}"),
        }
    }

    /// Blurry streams are evaluated on all classes from the start; disjoint
    /// streams only on classes seen so far. The declared setup governs even
    /// when the blur percentage is zero.
    pub fn eval_all_tasks_from_start(&self) -> bool {
        matches!(self, Setup::Blurry { .. })
    }
}

/// Which classes call each task home. `majors[t]` lists task t's classes.
#[derive(Debug, Clone)]
pub struct TaskAssignment {
    pub majors: Vec<Vec<usize>>,
}

impl TaskAssignment {
    pub fn task_count(&self) -> usize {
        self.majors.len()
    }

    /// Home task of a class.
    pub fn home_task(&self, class: usize) -> Option<usize> {
        self.majors.iter().position(|m| m.contains(&class))
    }
}

/// Randomly partitions `class_count` classes into `task_count` equal groups.
/// The class list is shuffled once, then cut into consecutive chunks.
pub fn assign_classes(class_count: usize, task_count: usize, seed: u64) -> Result<TaskAssignment> {
    if task_count == 0 {
        return Err(Error::Config("task_count must be positive".into()));
    }
    if class_count % task_count != 0 {
        return Err(Error::Config(format!(
            "task_count {task_count} must divide the class count {class_count}"
        )));
    }
    let mut classes: Vec<usize> = (0..class_count).collect();
    let mut r = rng::keyed(seed, rng::domain::ASSIGN, 0);
    classes.shuffle(&mut r);
    let per = class_count / task_count;
    let majors = classes.chunks(per).map(|c| c.to_vec()).collect();
    Ok(TaskAssignment { majors })
}

/// One task's training stream: sample ids in presentation order.
#[derive(Debug, Clone)]
pub struct Task {
    pub index: usize,
    pub sample_ids: Vec<u32>,
}

impl Task {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    /// Consecutive batches of at most `batch_size` ids, in stream order.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = &[u32]> {
        self.sample_ids.chunks(batch_size.max(1))
    }
}

/// Builds the per-task streams for a train split.
///
/// For every class with L samples, ceil((100 - M) * L / 100) stay in its home
/// task; the rest are split as evenly as possible across the other tasks,
/// with the extra ones going to the earliest task indices. Every task's final
/// list is shuffled. Each train sample lands in exactly one task.
pub fn build_stream(
    train: &Dataset,
    assignment: &TaskAssignment,
    setup: Setup,
    seed: u64,
) -> Result<Vec<Task>> {
    let task_count = assignment.task_count();
    let minor = u64::from(setup.minor_percent());
    let mut task_ids: Vec<Vec<u32>> = vec![Vec::new(); task_count];

    for class in 0..train.class_count {
        let home = assignment.home_task(class).ok_or_else(|| {
            Error::Config(format!("class {class} is missing from the task assignment"))
        })?;
        let mut ids = train.ids_of_class(class);
        let mut r = rng::keyed(seed, rng::domain::STREAM_CLASS, class as u64);
        ids.shuffle(&mut r);

        let l = ids.len() as u64;
        let major_n = ((100 - minor) * l).div_ceil(100) as usize;
        task_ids[home].extend(&ids[..major_n]);

        let leftover = &ids[major_n..];
        if leftover.is_empty() {
            continue;
        }
        // Foreign tasks in ascending index order, skipping the home task;
        // with a single task everything loops back to it.
        let foreign: Vec<usize> = (0..task_count).filter(|&t| t != home).collect();
        if foreign.is_empty() {
            task_ids[home].extend(leftover);
            continue;
        }
        let base = leftover.len() / foreign.len();
        let extra = leftover.len() % foreign.len();
        let mut cursor = 0;
        for (slot, &t) in foreign.iter().enumerate() {
            let take = base + usize::from(slot < extra);
            task_ids[t].extend(&leftover[cursor..cursor + take]);
            cursor += take;
        }
    }

    let tasks = task_ids
        .into_iter()
        .enumerate()
        .map(|(index, mut sample_ids)| {
            let mut r = rng::keyed(seed, rng::domain::STREAM_TASK, index as u64);
            sample_ids.shuffle(&mut r);
            Task { index, sample_ids }
        })
        .collect();
    Ok(tasks)
}

/// Test-set ids grouped by task: `per_task[j]` holds every test sample whose
/// label is one of task j's home classes.
#[derive(Debug, Clone)]
pub struct EvalSets {
    pub per_task: Vec<Vec<u32>>,
}

impl EvalSets {
    /// Ids for the global evaluation after task `t` under the given setup:
    /// all tasks for blurry streams, tasks 0..=t for disjoint ones.
    pub fn global_after(&self, t: usize, setup: Setup) -> Vec<u32> {
        let upto = if setup.eval_all_tasks_from_start() { self.per_task.len() - 1 } else { t };
        self.per_task[..=upto].iter().flatten().copied().collect()
    }
}

/// Groups the test split by home task.
pub fn eval_sets(test: &Dataset, assignment: &TaskAssignment) -> Result<EvalSets> {
    let mut per_task = vec![Vec::new(); assignment.task_count()];
    for s in &test.samples {
        let t = assignment.home_task(s.label).ok_or_else(|| {
            Error::Config(format!("test label {} is missing from the task assignment", s.label))
        })?;
        per_task[t].push(s.id);
    }
    Ok(EvalSets { per_task })
}
