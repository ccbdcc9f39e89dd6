//! Prototype store and prototype-anchored feature translation.
//!
//! Old-class features are synthesized from the current task's live features:
//! each old class is matched to its nearest new prototype, and that class's
//! features are shifted by `μ_old − μ_new`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::checksum_of;
use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Distance used to match an old prototype to a new one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    Euclidean,
    Manhattan,
}

impl Distance {
    pub fn between(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Euclidean => crate::numeric::squared_distance(a, b).sqrt(),
            Distance::Manhattan => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class: usize,
    /// 0-based task that introduced the class.
    pub task: usize,
    pub mean: Vec<f64>,
}

/// One mean feature per learned class. Entries are never overwritten.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    entries: Vec<Prototype>,
}

impl PrototypeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Prototype] {
        &self.entries
    }

    pub fn get(&self, class: usize) -> Option<&Prototype> {
        self.entries.iter().find(|p| p.class == class)
    }

    pub fn insert(&mut self, class: usize, task: usize, mean: Vec<f64>) -> Result<()> {
        if self.get(class).is_some() {
            return Err(Error::contract(format!(
                "prototype for class {class} already stored"
            )));
        }
        if let Some(first) = self.entries.first() {
            if first.mean.len() != mean.len() {
                return Err(Error::domain(format!(
                    "prototype width {} != stored width {}",
                    mean.len(),
                    first.mean.len()
                )));
            }
        }
        self.entries.push(Prototype { class, task, mean });
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        checksum_of(self.entries.iter().map(|p| p.mean.as_slice()))
    }
}

/// Arithmetic mean of the rows.
pub fn compute_prototype(features: &Matrix) -> Result<Vec<f64>> {
    if features.rows() == 0 {
        return Err(Error::domain("cannot take the prototype of an empty class"));
    }
    let mut mean = features.column_sums();
    let inv = 1.0 / features.rows() as f64;
    mean.iter_mut().for_each(|v| *v *= inv);
    Ok(mean)
}

/// Prototype per `(class, features)` pair, in input order.
pub fn compute_prototypes(by_class: &[(usize, Matrix)]) -> Result<Vec<(usize, Vec<f64>)>> {
    by_class
        .iter()
        .map(|(c, f)| {
            compute_prototype(f)
                .map(|m| (*c, m))
                .map_err(|_| Error::domain(format!("class {c} has no feature rows")))
        })
        .collect()
}

/// Class whose prototype is closest to `mu_old` (Euclidean); ties go to the
/// lowest class id.
pub fn nearest_new_prototype(mu_old: &[f64], candidates: &[(usize, Vec<f64>)]) -> Result<usize> {
    nearest_by(Distance::Euclidean, mu_old, candidates)
}

pub fn nearest_by(
    metric: Distance,
    mu_old: &[f64],
    candidates: &[(usize, Vec<f64>)],
) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (class, mu) in candidates {
        if mu.len() != mu_old.len() {
            return Err(Error::domain(format!(
                "candidate width {} != prototype width {}",
                mu.len(),
                mu_old.len()
            )));
        }
        let d = metric.between(mu_old, mu);
        let better = match best {
            None => true,
            Some((bc, bd)) => d < bd || (d == bd && *class < bc),
        };
        if better {
            best = Some((*class, d));
        }
    }
    best.map(|(c, _)| c)
        .ok_or_else(|| Error::domain("no new prototypes to match against"))
}

/// f̂ = f − μ_new + μ_old, row by row.
pub fn translate_features(mu_old: &[f64], source: &Matrix, mu_new: &[f64]) -> Result<Matrix> {
    if mu_old.len() != source.cols() || mu_new.len() != source.cols() {
        return Err(Error::domain(format!(
            "translation widths: μ_old {}, features {}, μ_new {}",
            mu_old.len(),
            source.cols(),
            mu_new.len()
        )));
    }
    let shift: Vec<f64> = mu_old.iter().zip(mu_new).map(|(o, n)| o - n).collect();
    let mut out = source.clone();
    out.add_row_broadcast(&shift);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslatedClass {
    pub class: usize,
    /// Current-task class whose features were shifted.
    pub source: usize,
    pub features: Matrix,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TranslatedFeatureSet {
    pub classes: Vec<TranslatedClass>,
}

impl TranslatedFeatureSet {
    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn total_rows(&self) -> usize {
        self.classes.iter().map(|c| c.features.rows()).sum()
    }
}

/// Translated features for every stored class not present in `current`.
/// Empty when there is no history.
pub fn build_translation(
    store: &PrototypeStore,
    current: &[(usize, Matrix)],
) -> Result<TranslatedFeatureSet> {
    build_translation_by(Distance::Euclidean, store, current)
}

pub fn build_translation_by(
    metric: Distance,
    store: &PrototypeStore,
    current: &[(usize, Matrix)],
) -> Result<TranslatedFeatureSet> {
    let old: Vec<&Prototype> = store
        .entries()
        .iter()
        .filter(|p| current.iter().all(|(c, _)| *c != p.class))
        .collect();
    if old.is_empty() {
        return Ok(TranslatedFeatureSet::default());
    }
    let new_protos = compute_prototypes(current)?;
    let mut classes = Vec::with_capacity(old.len());
    for p in old {
        let k = nearest_by(metric, &p.mean, &new_protos)?;
        let at = new_protos.iter().position(|(c, _)| *c == k).expect("matched class exists");
        let features = translate_features(&p.mean, &current[at].1, &new_protos[at].1)?;
        classes.push(TranslatedClass {
            class: p.class,
            source: k,
            features,
        });
    }
    Ok(TranslatedFeatureSet { classes })
}

/// `count` translated rows with their class labels. Classes are visited in
/// shuffled rounds so every class appears once per round; rows within a
/// class are drawn uniformly with replacement.
pub fn sample_translated_batch(
    set: &TranslatedFeatureSet,
    count: usize,
    seed: u64,
) -> Result<(Matrix, Vec<usize>)> {
    if count == 0 {
        return Err(Error::domain("translated batch size must be positive"));
    }
    sample_with(set, count, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub(crate) fn sample_with(
    set: &TranslatedFeatureSet,
    count: usize,
    rng: &mut impl Rng,
) -> Result<(Matrix, Vec<usize>)> {
    let usable: Vec<&TranslatedClass> = set.classes.iter().filter(|c| c.features.rows() > 0).collect();
    if usable.is_empty() {
        return Err(Error::domain("no translated features to sample from"));
    }
    let dim = usable[0].features.cols();
    let mut out = Matrix::zeros(count, dim);
    let mut labels = Vec::with_capacity(count);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    for i in 0..count {
        if i % usable.len() == 0 {
            order.shuffle(rng);
        }
        let c = usable[order[i % usable.len()]];
        let r = rng.gen_range(0..c.features.rows());
        out.row_mut(i).copy_from_slice(c.features.row(r));
        labels.push(c.class);
    }
    Ok((out, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn prototype_is_the_mean() {
        assert_eq!(compute_prototype(&m(&[&[1.0, 0.0], &[3.0, 0.0]])).unwrap(), vec![2.0, 0.0]);
        assert_eq!(compute_prototype(&m(&[&[4.0, -1.0]])).unwrap(), vec![4.0, -1.0]);
        assert!(compute_prototype(&Matrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn nearest_prefers_smaller_distance_then_lower_id() {
        let c = vec![(4, vec![1.0, 0.0]), (2, vec![0.0, 2.0])];
        assert_eq!(nearest_new_prototype(&[0.0, 0.0], &c).unwrap(), 4);
        let tie = vec![(7, vec![1.0, 0.0]), (3, vec![-1.0, 0.0])];
        assert_eq!(nearest_new_prototype(&[0.0, 0.0], &tie).unwrap(), 3);
        assert!(nearest_new_prototype(&[0.0], &[]).is_err());
    }

    #[test]
    fn translation_worked_example() {
        let f = translate_features(&[0.0, 5.0], &m(&[&[1.0, 0.0], &[3.0, 0.0]]), &[2.0, 0.0]).unwrap();
        assert_eq!(f, m(&[&[-1.0, 5.0], &[1.0, 5.0]]));
        assert!(translate_features(&[0.0], &f, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn store_refuses_overwrite() {
        let mut s = PrototypeStore::new();
        s.insert(0, 0, vec![1.0]).unwrap();
        assert!(matches!(s.insert(0, 1, vec![2.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn build_is_empty_without_history() {
        let cur = vec![(0, m(&[&[1.0, 1.0]]))];
        assert!(build_translation(&PrototypeStore::new(), &cur).unwrap().is_empty());
    }

    #[test]
    fn balanced_sampling() {
        let set = TranslatedFeatureSet {
            classes: (0..3)
                .map(|c| TranslatedClass {
                    class: c,
                    source: 9,
                    features: m(&[&[c as f64], &[c as f64 + 0.5]]),
                })
                .collect(),
        };
        let (_, labels) = sample_translated_batch(&set, 3, 1).unwrap();
        let mut sorted = labels.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
        assert_eq!(
            sample_translated_batch(&set, 7, 4).unwrap(),
            sample_translated_batch(&set, 7, 4).unwrap()
        );
        assert!(sample_translated_batch(&set, 0, 4).is_err());
    }
}
