//! Scenarios, the evaluation protocol, CIL metrics and baselines.

mod baselines;
mod complexity;
mod metrics;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::pipeline::TaskLayout;

pub use baselines::{
    ablation_suite, baseline_finetune, baseline_kv_correlation, build_learner, run_method,
    AblationRow, Finetune, Method, ABLATION_ROWS,
};
pub use complexity::{complexity_accounting, desk_method_config, round_mb, ComplexityReport, MethodConfig};
pub use metrics::{avg_accuracy, avg_incremental_accuracy, forgetting_measure, AccuracyMatrix};

/// Dataset labels learned so far, in global class order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    labels: Vec<u32>,
}

impl ClassMap {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Appends a task's classes; overlap with learned classes is refused.
    pub fn extend(&mut self, classes: &[u32]) -> Result<()> {
        for (i, c) in classes.iter().enumerate() {
            if self.labels.contains(c) || classes[..i].contains(c) {
                return Err(Error::domain(format!(
                    "class {c} is already learned; tasks must be disjoint"
                )));
            }
        }
        if classes.is_empty() {
            return Err(Error::domain("a task must contain at least one class"));
        }
        self.labels.extend_from_slice(classes);
        Ok(())
    }

    pub fn global_of(&self, label: u32) -> Result<usize> {
        self.labels
            .iter()
            .position(|&l| l == label)
            .ok_or_else(|| Error::domain(format!("label {label} does not belong to a learned task")))
    }

    pub fn label_of(&self, global: usize) -> Result<u32> {
        self.labels
            .get(global)
            .copied()
            .ok_or_else(|| Error::domain(format!("global class {global} is not learned")))
    }
}

/// What a learner sees for one task: its classes and training images.
#[derive(Debug, Clone, Copy)]
pub struct TaskData<'a> {
    pub index: usize,
    /// Dataset labels of this task, in the order they get global ids.
    pub classes: &'a [u32],
    pub train: &'a LabeledImageSet,
}

/// A class-incremental learner. `classify` receives only the image, so
/// task identity can never leak into prediction.
pub trait Learner {
    fn name(&self) -> String;
    fn learn_task(&mut self, data: &TaskData<'_>) -> Result<()>;
    /// Predicted dataset label.
    fn classify(&self, image: &[f64]) -> Result<u32>;
    /// Task whose prompt the learner would use, for instrumentation.
    fn selected_task(&self, _image: &[f64]) -> Result<Option<usize>> {
        Ok(None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTask {
    pub classes: Vec<u32>,
    pub train: LabeledImageSet,
    pub test: LabeledImageSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub tasks: Vec<ScenarioTask>,
    pub layout: TaskLayout,
    pub seed: u64,
}

/// Task layout request: `tasks` tasks, optionally with a first task of a
/// different size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub tasks: usize,
    #[serde(default)]
    pub first_task: Option<usize>,
}

impl SplitSpec {
    pub fn sizes(&self, classes: usize) -> Result<Vec<usize>> {
        if self.tasks == 0 {
            return Err(Error::domain("a scenario needs at least one task"));
        }
        match self.first_task {
            None => {
                if !classes.is_multiple_of(self.tasks) || classes == 0 {
                    return Err(Error::domain(format!(
                        "{classes} classes do not split into {} equal tasks",
                        self.tasks
                    )));
                }
                Ok(vec![classes / self.tasks; self.tasks])
            }
            Some(first) => {
                let rest = classes.checked_sub(first).filter(|_| first > 0);
                match rest {
                    Some(rest) if self.tasks == 1 && rest == 0 => Ok(vec![first]),
                    Some(rest) if self.tasks > 1 && rest > 0 && rest % (self.tasks - 1) == 0 => {
                        let mut v = vec![first];
                        v.extend(std::iter::repeat_n(rest / (self.tasks - 1), self.tasks - 1));
                        Ok(v)
                    }
                    _ => Err(Error::domain(format!(
                        "{classes} classes do not split into a first task of {first} plus {} equal tasks",
                        self.tasks.saturating_sub(1)
                    ))),
                }
            }
        }
    }
}

/// Deterministic class-to-task assignment: classes are shuffled with
/// `seed`, then cut into the requested layout.
pub fn make_splits(
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    spec: &SplitSpec,
    seed: u64,
) -> Result<Scenario> {
    let classes = train.num_classes();
    if test.num_classes() != classes {
        return Err(Error::domain(format!(
            "train declares {classes} classes, test declares {}",
            test.num_classes()
        )));
    }
    let sizes = spec.sizes(classes)?;
    let mut order: Vec<u32> = (0..classes as u32).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut tasks = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &s in &sizes {
        let mut cls = order[at..at + s].to_vec();
        cls.sort_unstable();
        at += s;
        let pick = |set: &LabeledImageSet| {
            let idx: Vec<usize> = (0..set.len()).filter(|&i| cls.contains(&set.label(i))).collect();
            set.subset(&idx)
        };
        tasks.push(ScenarioTask {
            train: pick(train),
            test: pick(test),
            classes: cls,
        });
    }
    Ok(Scenario {
        tasks,
        layout: TaskLayout::new(sizes)?,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    /// Seed for the shuffled test order.
    pub shuffle_seed: u64,
    /// Record which prompt the learner selects on each test sample.
    pub track_selection: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            shuffle_seed: 0,
            track_selection: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub method: String,
    pub matrix: AccuracyMatrix,
    /// Fraction of test samples of task j routed to task j's prompt, after
    /// task k. Present when the learner reports selections.
    pub selection: Option<AccuracyMatrix>,
    /// False when the learner failed part-way; `matrix` then holds the rows
    /// completed before the failure.
    pub valid: bool,
    pub error: Option<String>,
}

/// Trains task by task and after each task evaluates every task seen so far.
pub fn run_scenario(
    scenario: &Scenario,
    learner: &mut dyn Learner,
    protocol: &EvalProtocol,
) -> Result<ScenarioResult> {
    let mut rows = Vec::with_capacity(scenario.tasks.len());
    let mut sel_rows = Vec::with_capacity(scenario.tasks.len());
    let mut has_selection = protocol.track_selection;
    let method = learner.name();
    let mut failure = None;
    for (k, task) in scenario.tasks.iter().enumerate() {
        let data = TaskData {
            index: k,
            classes: &task.classes,
            train: &task.train,
        };
        if let Err(e) = learner.learn_task(&data) {
            failure = Some(format!("task {k}: {e}"));
            break;
        }
        // every seen test sample, in one shuffled stream
        let mut samples: Vec<(usize, usize)> = scenario.tasks[..=k]
            .iter()
            .enumerate()
            .flat_map(|(j, t)| (0..t.test.len()).map(move |i| (j, i)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(protocol.shuffle_seed ^ (k as u64) << 32);
        samples.shuffle(&mut rng);
        let mut correct = vec![0usize; k + 1];
        let mut routed = vec![0usize; k + 1];
        let mut total = vec![0usize; k + 1];
        let mut step = || -> Result<()> {
            for &(j, i) in &samples {
                let set = &scenario.tasks[j].test;
                let image = set.image(i);
                total[j] += 1;
                if learner.classify(image)? == set.label(i) {
                    correct[j] += 1;
                }
                if has_selection {
                    match learner.selected_task(image)? {
                        Some(t) if t == j => routed[j] += 1,
                        Some(_) => {}
                        None => has_selection = false,
                    }
                }
            }
            Ok(())
        };
        if let Err(e) = step() {
            failure = Some(format!("evaluation after task {k}: {e}"));
            break;
        }
        let frac = |num: &[usize]| -> Vec<f64> {
            num.iter()
                .zip(&total)
                .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                .collect()
        };
        let row = frac(&correct);
        info!(
            "{method} after_task={k} accuracy={}",
            row.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(",")
        );
        rows.push(row);
        sel_rows.push(frac(&routed));
    }
    let valid = failure.is_none();
    Ok(ScenarioResult {
        method,
        matrix: AccuracyMatrix::new(rows)?,
        selection: if has_selection && valid {
            Some(AccuracyMatrix::new(sel_rows)?)
        } else {
            None
        },
        valid,
        error: failure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};

    #[test]
    fn split_sizes() {
        let eq = SplitSpec {
            tasks: 5,
            first_task: None,
        };
        assert_eq!(eq.sizes(10).unwrap(), vec![2; 5]);
        let uneq = SplitSpec {
            tasks: 4,
            first_task: Some(4),
        };
        assert_eq!(uneq.sizes(10).unwrap(), vec![4, 2, 2, 2]);
        assert!(SplitSpec {
            tasks: 3,
            first_task: None
        }
        .sizes(10)
        .is_err());
        assert!(SplitSpec {
            tasks: 4,
            first_task: Some(5)
        }
        .sizes(10)
        .is_err());
    }

    #[test]
    fn splits_are_seeded_and_disjoint() {
        let set = gen_synthetic(&SyntheticSpec {
            classes: 6,
            per_class: 2,
            height: 4,
            width: 4,
            ..Default::default()
        })
        .unwrap();
        let spec = SplitSpec {
            tasks: 3,
            first_task: None,
        };
        let a = make_splits(&set, &set, &spec, 7).unwrap();
        let b = make_splits(&set, &set, &spec, 7).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<u32> = a.tasks.iter().flat_map(|t| t.classes.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        for t in &a.tasks {
            assert_eq!(t.train.len(), 4);
            assert!(t.train.labels().iter().all(|l| t.classes.contains(l)));
        }
    }

    #[test]
    fn class_map_refuses_overlap() {
        let mut m = ClassMap::default();
        m.extend(&[3, 1]).unwrap();
        assert_eq!(m.global_of(1).unwrap(), 1);
        assert!(m.extend(&[1, 4]).is_err());
        assert!(m.extend(&[5, 5]).is_err());
        assert_eq!(m.label_of(0).unwrap(), 3);
    }
}
