use crate::adaptation::check_alpha;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, predict, Model};
use crate::tensor::Tensor;

/// Confident predictions on an unlabeled set.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub confidences: Vec<f32>,
    pub alpha: f64,
    /// Size of the set the selection was made from.
    pub total: usize,
}

impl PseudoLabelSet {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn fraction(&self) -> f64 {
        self.indices.len() as f64 / self.total.max(1) as f64
    }
}

/// Rows of an `n × c` probability matrix whose maximum exceeds `alpha`
/// (strictly), labeled with the argmax.
pub fn select_confident(probs: &Tensor, alpha: f64) -> Result<PseudoLabelSet> {
    check_alpha("pseudo_label", alpha)?;
    if probs.rank() != 2 {
        return Err(Error::shape("pseudo_label", &[probs.shape()[0], 0], probs.shape()));
    }
    let n = probs.shape()[0];
    let mut set = PseudoLabelSet {
        indices: Vec::new(),
        labels: Vec::new(),
        confidences: Vec::new(),
        alpha,
        total: n,
    };
    for i in 0..n {
        let row = probs.row(i);
        let k = argmax(row);
        if row[k] as f64 > alpha {
            set.indices.push(i);
            set.labels.push(k);
            set.confidences.push(row[k]);
        }
    }
    if set.is_empty() {
        log::warn!("pseudo_label: no sample above alpha {alpha} out of {n}");
    }
    Ok(set)
}

/// Frozen-model pseudo labels for `unlabeled`. An empty result is returned
/// as such, with a warning logged.
pub fn pseudo_label(model: &Model, unlabeled: &Dataset, alpha: f64) -> Result<PseudoLabelSet> {
    model.require_frozen("pseudo_label")?;
    check_alpha("pseudo_label", alpha)?;
    select_confident(&predict(model, unlabeled)?, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_examples() {
        let p = Tensor::new(vec![2, 2], vec![0.95, 0.05, 0.6, 0.4]).unwrap();
        let s = select_confident(&p, 0.9).unwrap();
        assert_eq!((s.indices, s.labels), (vec![0], vec![0]));
        let uniform = Tensor::full(vec![5, 10], 0.1);
        assert!(select_confident(&uniform, 0.11).unwrap().is_empty());
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let p = Tensor::new(vec![1, 3], vec![0.2, 0.4, 0.4]).unwrap();
        assert_eq!(select_confident(&p, 0.3).unwrap().labels, vec![1]);
    }
}
