//! Classification tasks over the category/exemplar labels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{TrialSet, EXEMPLARS_PER_CATEGORY};
use crate::error::{Error, Result};

/// Stimulus categories in label order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    HumanBody = 0,
    HumanFace = 1,
    AnimalBody = 2,
    AnimalFace = 3,
    FruitVegetable = 4,
    InanimateObject = 5,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::HumanBody,
        Category::HumanFace,
        Category::AnimalBody,
        Category::AnimalFace,
        Category::FruitVegetable,
        Category::InanimateObject,
    ];

    pub fn code(self) -> &'static str {
        ["HB", "HF", "AB", "AF", "FV", "IO"][self as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "6cat")]
    SixCategory,
    #[serde(rename = "72ex")]
    Exemplar72,
    #[serde(rename = "hf-io")]
    FaceVsObject,
    #[serde(rename = "hf")]
    FaceExemplars,
    #[serde(rename = "io")]
    ObjectExemplars,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::SixCategory,
        Task::Exemplar72,
        Task::FaceVsObject,
        Task::FaceExemplars,
        Task::ObjectExemplars,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::SixCategory => "6cat",
            Task::Exemplar72 => "72ex",
            Task::FaceVsObject => "hf-io",
            Task::FaceExemplars => "hf",
            Task::ObjectExemplars => "io",
        }
    }

    /// K
    pub fn num_classes(self) -> usize {
        match self {
            Task::SixCategory => 6,
            Task::Exemplar72 => 72,
            Task::FaceVsObject => 2,
            Task::FaceExemplars | Task::ObjectExemplars => 12,
        }
    }

    /// Label of a trial under this task, or `None` if the task excludes it.
    pub fn label(self, category: usize, exemplar: usize) -> Option<usize> {
        let hf = Category::HumanFace as usize;
        let io = Category::InanimateObject as usize;
        match self {
            Task::SixCategory => Some(category),
            Task::Exemplar72 => Some(exemplar),
            Task::FaceVsObject => match category {
                c if c == hf => Some(0),
                c if c == io => Some(1),
                _ => None,
            },
            Task::FaceExemplars => (category == hf).then_some(exemplar % EXEMPLARS_PER_CATEGORY),
            Task::ObjectExemplars => (category == io).then_some(exemplar % EXEMPLARS_PER_CATEGORY),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown task {s:?}, expected 6cat|72ex|hf-io|hf|io"
                ))
            })
    }
}

/// Trials selected for a task with their task labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub task: Task,
    pub set: TrialSet,
    pub labels: Vec<usize>,
    /// Index of each kept trial in the source set.
    pub source_indices: Vec<usize>,
}

impl TaskData {
    pub fn num_classes(&self) -> usize {
        self.task.num_classes()
    }

    /// Restriction to the given positions (indices into this task set).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            task: self.task,
            set: self.set.subset(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            source_indices: indices.iter().map(|&i| self.source_indices[i]).collect(),
        })
    }

    /// Positions of the trials of one subject.
    pub fn subject_indices(&self, subject: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.set.subject[i] == subject)
            .collect()
    }
}

/// Filters and relabels `set` for `task`; trial samples are copied unchanged.
pub fn apply_task(set: &TrialSet, task: Task) -> Result<TaskData> {
    let (source_indices, labels): (Vec<usize>, Vec<usize>) = (0..set.len())
        .filter_map(|i| task.label(set.category[i], set.exemplar[i]).map(|l| (i, l)))
        .unzip();
    if source_indices.is_empty() {
        return Err(Error::Empty(format!("no trials left for task {task}")));
    }
    Ok(TaskData {
        task,
        set: set.subset(&source_indices)?,
        labels,
        source_indices,
    })
}
