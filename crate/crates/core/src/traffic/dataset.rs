use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Flow;
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// A collection of traces (or pairs) from one split, represented at
/// `fixed_length` when fed to a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S = Flow> {
    pub samples: Vec<S>,
    pub split: Split,
    pub fixed_length: usize,
    pub class_count: usize,
}

#[derive(Clone, Debug)]
pub struct Splits<S = Flow> {
    pub train: Dataset<S>,
    pub validation: Dataset<S>,
    pub test: Dataset<S>,
}

impl<S> Dataset<S> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

impl Dataset<Flow> {
    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|f| f.label).collect()
    }

    /// Per-class stratified split; within each class the order is shuffled
    /// with `seed`, then cut by the given fractions.
    pub fn split_stratified(&self, validation_frac: f64, test_frac: f64, seed: u64) -> Splits {
        assert!(validation_frac >= 0.0 && test_frac >= 0.0 && validation_frac + test_frac < 1.0);
        let mut rng = seeded(seed);
        let mut parts: [Vec<Flow>; 3] = Default::default();
        for class in 0..self.class_count {
            let mut members: Vec<&Flow> = self.samples.iter().filter(|f| f.label == class).collect();
            members.shuffle(&mut rng);
            let n = members.len();
            let n_val = (n as f64 * validation_frac).round() as usize;
            let n_test = (n as f64 * test_frac).round() as usize;
            for (i, f) in members.into_iter().enumerate() {
                let part = if i < n_test {
                    2
                } else if i < n_test + n_val {
                    1
                } else {
                    0
                };
                parts[part].push(f.clone());
            }
        }
        let [train, validation, test] = parts;
        let mk = |samples, split| Dataset {
            samples,
            split,
            fixed_length: self.fixed_length,
            class_count: self.class_count,
        };
        Splits {
            train: mk(train, Split::Train),
            validation: mk(validation, Split::Validation),
            test: mk(test, Split::Test),
        }
    }
}
