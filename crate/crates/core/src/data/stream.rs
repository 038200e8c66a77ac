//! Class-incremental task streams with disjoint label spaces.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Clone, Debug)]
pub struct Task {
    pub index: usize,
    /// Sorted label set of this task.
    pub classes: Vec<usize>,
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

#[derive(Clone, Debug)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub order_seed: u64,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn increments(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.classes.len()).collect()
    }

    /// Labels of tasks `0..=t`, in task order.
    pub fn seen_classes(&self, t: usize) -> Vec<usize> {
        self.tasks[..=t].iter().flat_map(|task| task.classes.iter().copied()).collect()
    }

    /// Union of the test splits of tasks `0..=t`, in task order.
    pub fn seen_test(&self, t: usize) -> Vec<&LabeledImage> {
        self.tasks[..=t].iter().flat_map(|task| &task.test).collect()
    }

    /// The same tasks visited in `order` (a permutation of task positions).
    pub fn reordered(&self, order: &[usize]) -> Result<TaskStream> {
        let mut seen = vec![false; self.len()];
        for &i in order {
            if i >= self.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Stream(format!("{order:?} is not a permutation of the tasks")));
            }
        }
        if order.len() != self.len() {
            return Err(Error::Stream(format!("{order:?} is not a permutation of the tasks")));
        }
        let tasks = order
            .iter()
            .enumerate()
            .map(|(index, &i)| Task { index, ..self.tasks[i].clone() })
            .collect();
        Ok(TaskStream { tasks, order_seed: self.order_seed })
    }
}

/// Partitions the dataset's classes by a seed-determined permutation into
/// consecutive tasks of `increments[t]` classes. Classes left over when the
/// increments sum to less than the class count are dropped.
pub fn build_task_stream(dataset: &Dataset, increments: &[usize], order_seed: u64) -> Result<TaskStream> {
    if increments.is_empty() || increments.contains(&0) {
        return Err(Error::Stream("every task needs at least one class".into()));
    }
    let total: usize = increments.iter().sum();
    if total > dataset.num_classes {
        return Err(Error::Stream(format!(
            "increments sum to {total} but the dataset has {} classes",
            dataset.num_classes
        )));
    }
    if let Some(s) = dataset.train.iter().chain(&dataset.test).find(|s| s.label >= dataset.num_classes) {
        return Err(Error::LabelOutOfRange { label: s.label, classes: dataset.num_classes });
    }

    let mut order: Vec<usize> = (0..dataset.num_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[order_seed, 0x5747])));

    let mut task_of = vec![None; dataset.num_classes];
    let mut start = 0;
    let mut tasks = Vec::with_capacity(increments.len());
    for (index, &k) in increments.iter().enumerate() {
        let mut classes = order[start..start + k].to_vec();
        classes.sort_unstable();
        for &c in &classes {
            task_of[c] = Some(index);
        }
        start += k;
        tasks.push(Task { index, classes, train: Vec::new(), test: Vec::new() });
    }
    for s in &dataset.train {
        if let Some(t) = task_of[s.label] {
            tasks[t].train.push(s.clone());
        }
    }
    for s in &dataset.test {
        if let Some(t) = task_of[s.label] {
            tasks[t].test.push(s.clone());
        }
    }
    if let Some(task) = tasks.iter().find(|t| t.train.is_empty()) {
        return Err(Error::Stream(format!("task {} has no training samples", task.index)));
    }
    Ok(TaskStream { tasks, order_seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_dataset, SynthSpec};
    use proptest::prelude::*;

    fn toy() -> Dataset {
        synth_dataset(&SynthSpec { train_per_class: 3, test_per_class: 2, image_size: 4, ..Default::default() }).unwrap()
    }

    #[test]
    fn five_disjoint_tasks_of_two() {
        let ds = toy();
        let s = build_task_stream(&ds, &[2; 5], 0).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.increments(), vec![2; 5]);
        let mut all: Vec<usize> = s.tasks.iter().flat_map(|t| t.classes.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for t in &s.tasks {
            assert!(t.train.iter().chain(&t.test).all(|x| t.classes.contains(&x.label)));
            assert_eq!(t.train.len(), 6);
            assert_eq!(t.test.len(), 4);
        }
        assert_eq!(s.seen_classes(1).len(), 4);
        assert_eq!(s.seen_test(2).len(), 12);
    }

    #[test]
    fn rejects_bad_increments() {
        let ds = toy();
        assert!(matches!(build_task_stream(&ds, &[6, 5], 0), Err(Error::Stream(_))));
        assert!(matches!(build_task_stream(&ds, &[], 0), Err(Error::Stream(_))));
        assert!(matches!(build_task_stream(&ds, &[2, 0], 0), Err(Error::Stream(_))));
        assert!(build_task_stream(&ds, &[3, 3], 0).is_ok());
    }

    #[test]
    fn reordering_is_a_permutation() {
        let s = build_task_stream(&toy(), &[2; 5], 4).unwrap();
        let r = s.reordered(&[4, 3, 2, 1, 0]).unwrap();
        assert_eq!(r.tasks[0].classes, s.tasks[4].classes);
        assert_eq!(r.tasks[0].index, 0);
        assert!(s.reordered(&[0, 0, 1, 2, 3]).is_err());
        assert!(s.reordered(&[0, 1]).is_err());
    }

    proptest! {
        #[test]
        fn seeds_permute_membership(a in any::<u64>(), b in any::<u64>()) {
            let ds = toy();
            let sa = build_task_stream(&ds, &[2; 5], a).unwrap();
            let sa2 = build_task_stream(&ds, &[2; 5], a).unwrap();
            let sb = build_task_stream(&ds, &[2; 5], b).unwrap();
            let classes = |s: &TaskStream| s.tasks.iter().map(|t| t.classes.clone()).collect::<Vec<_>>();
            prop_assert_eq!(classes(&sa), classes(&sa2));
            let mut fa: Vec<usize> = classes(&sa).concat();
            let mut fb: Vec<usize> = classes(&sb).concat();
            fa.sort_unstable();
            fb.sort_unstable();
            prop_assert_eq!(fa, fb);
        }
    }
}
