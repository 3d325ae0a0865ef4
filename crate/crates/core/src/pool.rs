//! The active-learning state: a feature matrix plus disjoint labeled,
//! unlabeled, validation and test index sets.

use std::collections::HashSet;

use ndarray::{Array2, Axis};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Pool {
    features: Array2<f64>,
    labels: Vec<Option<usize>>,
    num_classes: usize,
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

impl Pool {
    /// A pool with every index unlabeled. `labels[i]` is the ground truth
    /// when known (simulated oracles), `None` otherwise.
    pub fn new(features: Array2<f64>, labels: Vec<Option<usize>>, num_classes: usize) -> Result<Self> {
        if labels.len() != features.nrows() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Shape(format!("need at least 2 classes, got {num_classes}")));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&y| y >= num_classes) {
            return Err(Error::Shape(format!("label {bad} outside 0..{num_classes}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pool features must be finite".into()));
        }
        let unlabeled = (0..features.nrows()).collect();
        Ok(Self {
            features,
            labels,
            num_classes,
            labeled: Vec::new(),
            unlabeled,
            val: Vec::new(),
            test: Vec::new(),
        })
    }

    /// A fully labeled pool.
    pub fn from_labeled(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        Self::new(features, labels.into_iter().map(Some).collect(), num_classes)
    }

    /// Assigns the four index sets explicitly.
    pub fn with_split(
        mut self,
        labeled: Vec<usize>,
        unlabeled: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        self.labeled = labeled;
        self.unlabeled = unlabeled;
        self.val = val;
        self.test = test;
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    pub fn val(&self) -> &[usize] {
        &self.val
    }

    pub fn test(&self) -> &[usize] {
        &self.test
    }

    pub fn label(&self, index: usize) -> Option<usize> {
        self.labels.get(index).copied().flatten()
    }

    /// Ground-truth labels as stored (`None` where unknown).
    pub fn raw_labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    /// Removes stored labels from every unlabeled index.
    pub fn hide_unlabeled(&mut self) {
        for &i in &self.unlabeled {
            self.labels[i] = None;
        }
    }

    pub fn rows(&self, indices: &[usize]) -> Array2<f64> {
        self.features.select(Axis(0), indices)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Result<Vec<usize>> {
        indices
            .iter()
            .map(|&i| {
                self.label(i)
                    .ok_or_else(|| Error::Precondition(format!("index {i} has no known label")))
            })
            .collect()
    }

    /// Moves `indices` from the unlabeled set to the labeled set with the
    /// given labels.
    pub fn add_labels(&mut self, indices: &[usize], labels: &[usize]) -> Result<()> {
        if indices.len() != labels.len() {
            return Err(Error::Shape(format!("{} indices but {} labels", indices.len(), labels.len())));
        }
        let pending: HashSet<usize> = self.unlabeled.iter().copied().collect();
        let mut seen = HashSet::new();
        for (&i, &y) in indices.iter().zip(labels) {
            if !pending.contains(&i) || !seen.insert(i) {
                return Err(Error::Precondition(format!("index {i} is not a distinct unlabeled index")));
            }
            if y >= self.num_classes {
                return Err(Error::Precondition(format!("label {y} outside 0..{}", self.num_classes)));
            }
        }
        for (&i, &y) in indices.iter().zip(labels) {
            self.labels[i] = Some(y);
        }
        self.unlabeled.retain(|i| !seen.contains(i));
        self.labeled.extend_from_slice(indices);
        Ok(())
    }

    /// Checks disjointness, range and label availability of the index sets.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let mut seen = vec![false; n];
        for (name, set) in [
            ("labeled", &self.labeled),
            ("unlabeled", &self.unlabeled),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            for &i in set {
                if i >= n {
                    return Err(Error::Precondition(format!("{name} index {i} out of range 0..{n}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Precondition(format!("index {i} appears in more than one set")));
                }
                if name != "unlabeled" && self.labels[i].is_none() {
                    return Err(Error::Precondition(format!("{name} index {i} has no label")));
                }
            }
        }
        Ok(())
    }
}
