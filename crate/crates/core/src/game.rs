//! Exhaustive solvers for finite antidistillation games.
//!
//! The defender picks a poisoned dataset from a finite set of perturbations;
//! for every hypothesis class the attacker then trains the hypothesis with the
//! lowest training loss on that dataset (the best response). Three defender
//! objectives are supported:
//!
//! * robust: maximize, over perturbations, the minimum over classes of the
//!   best response's population loss;
//! * data poisoning: the same with a single known class;
//! * Bayesian: maximize the prior-weighted average over classes.
//!
//! All infima are minima over finite sets. Ties break toward the lowest index
//! everywhere, for perturbations, classes and hypotheses alike.

use std::collections::HashSet;

use indexmap::IndexMap;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Slack used when comparing the robust value against the Bayesian value.
pub const RELAXATION_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GameError {
    #[error("the game has no perturbations")]
    NoPerturbations,
    #[error("the game has no hypothesis classes")]
    NoClasses,
    #[error("class {0:?} is empty")]
    EmptyClass(String),
    #[error("unknown perturbation {0:?}")]
    UnknownPerturbation(String),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("unknown hypothesis {0:?}")]
    UnknownHypothesis(String),
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("missing train loss for perturbation {perturbation:?}, hypothesis {hypothesis:?}")]
    MissingTrainLoss {
        perturbation: String,
        hypothesis: String,
    },
    #[error("missing population loss for hypothesis {0:?}")]
    MissingPopLoss(String),
    #[error("loss for {0:?} is not finite")]
    NonFiniteLoss(String),
    #[error("the game has no prior over classes")]
    MissingPrior,
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("no class is the union of all classes")]
    MissingUnionClass,
    #[error("no perturbation is within distortion {0}")]
    NothingAdmissible(f64),
    #[error("invalid game file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisClass {
    pub name: String,
    /// Indices into [`GameInstance::hypotheses`].
    pub members: Vec<usize>,
}

/// A finite game as data.
#[derive(Debug, Clone, PartialEq)]
pub struct GameInstance {
    perturbations: Vec<String>,
    hypotheses: Vec<String>,
    classes: Vec<HypothesisClass>,
    /// `train_loss[d][h]`.
    train_loss: Vec<Vec<f64>>,
    pop_loss: Vec<f64>,
    prior: Option<Vec<f64>>,
}

/// Defender's choice together with the attacker's best responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub chosen_perturbation: String,
    pub per_class_best_response: IndexMap<String, String>,
    pub value: f64,
}

/// Which defender objective to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Robust,
    DataPoisoning(usize),
    Bayesian,
}

impl GameInstance {
    /// Builds an instance from index-addressed tables.
    ///
    /// `classes` lists, per class, indices into `hypotheses`; a hypothesis may
    /// belong to several classes.
    pub fn new(
        perturbations: Vec<String>,
        hypotheses: Vec<String>,
        classes: Vec<HypothesisClass>,
        train_loss: Vec<Vec<f64>>,
        pop_loss: Vec<f64>,
        prior: Option<Vec<f64>>,
    ) -> Result<Self, GameError> {
        if perturbations.is_empty() {
            return Err(GameError::NoPerturbations);
        }
        if classes.is_empty() {
            return Err(GameError::NoClasses);
        }
        for labels in [&perturbations, &hypotheses] {
            let mut seen = HashSet::new();
            if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
                return Err(GameError::DuplicateLabel(dup.clone()));
            }
        }
        let mut seen = HashSet::new();
        for c in &classes {
            if !seen.insert(c.name.as_str()) {
                return Err(GameError::DuplicateLabel(c.name.clone()));
            }
            if c.members.is_empty() {
                return Err(GameError::EmptyClass(c.name.clone()));
            }
            if let Some(&h) = c.members.iter().find(|&&h| h >= hypotheses.len()) {
                return Err(GameError::UnknownHypothesis(format!("#{h}")));
            }
        }
        if train_loss.len() != perturbations.len() {
            return Err(GameError::Format(
                "train loss needs one row per perturbation".into(),
            ));
        }
        for (d, row) in train_loss.iter().enumerate() {
            if row.len() != hypotheses.len() {
                return Err(GameError::Format(
                    "train loss needs one column per hypothesis".into(),
                ));
            }
            if let Some(h) = row.iter().position(|v| !v.is_finite()) {
                return Err(GameError::NonFiniteLoss(format!(
                    "{}/{}",
                    perturbations[d], hypotheses[h]
                )));
            }
        }
        if pop_loss.len() != hypotheses.len() {
            return Err(GameError::Format(
                "population loss needs one entry per hypothesis".into(),
            ));
        }
        if let Some(h) = pop_loss.iter().position(|v| !v.is_finite()) {
            return Err(GameError::NonFiniteLoss(hypotheses[h].clone()));
        }
        if let Some(prior) = &prior {
            check_prior(prior, classes.len())?;
        }
        Ok(GameInstance {
            perturbations,
            hypotheses,
            classes,
            train_loss,
            pop_loss,
            prior,
        })
    }

    pub fn perturbations(&self) -> &[String] {
        &self.perturbations
    }

    pub fn hypotheses(&self) -> &[String] {
        &self.hypotheses
    }

    pub fn classes(&self) -> &[HypothesisClass] {
        &self.classes
    }

    pub fn prior(&self) -> Option<&[f64]> {
        self.prior.as_deref()
    }

    pub fn train_loss(&self, perturbation: usize, hypothesis: usize) -> f64 {
        self.train_loss[perturbation][hypothesis]
    }

    pub fn pop_loss(&self, hypothesis: usize) -> f64 {
        self.pop_loss[hypothesis]
    }

    pub fn with_prior(mut self, prior: Vec<f64>) -> Result<Self, GameError> {
        check_prior(&prior, self.classes.len())?;
        self.prior = Some(prior);
        Ok(self)
    }

    /// Copy with every population loss multiplied by `factor`.
    pub fn scale_pop_loss(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.pop_loss.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// Copy restricted to the given classes (in the given order). The prior,
    /// if any, is dropped.
    pub fn restrict_classes(&self, keep: &[usize]) -> Result<Self, GameError> {
        let classes = keep
            .iter()
            .map(|&c| {
                self.classes
                    .get(c)
                    .cloned()
                    .ok_or_else(|| GameError::UnknownClass(format!("#{c}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if classes.is_empty() {
            return Err(GameError::NoClasses);
        }
        Ok(GameInstance {
            classes,
            prior: None,
            ..self.clone()
        })
    }

    /// Keeps only perturbations whose distortion is at most `epsilon`.
    pub fn restrict_by_distortion(
        &self,
        distortion: &[f64],
        epsilon: f64,
    ) -> Result<Self, GameError> {
        if distortion.len() != self.perturbations.len() {
            return Err(GameError::Format(
                "distortion needs one entry per perturbation".into(),
            ));
        }
        let keep: Vec<usize> = (0..distortion.len())
            .filter(|&d| distortion[d] <= epsilon)
            .collect();
        if keep.is_empty() {
            return Err(GameError::NothingAdmissible(epsilon));
        }
        Ok(GameInstance {
            perturbations: keep
                .iter()
                .map(|&d| self.perturbations[d].clone())
                .collect(),
            train_loss: keep.iter().map(|&d| self.train_loss[d].clone()).collect(),
            ..self.clone()
        })
    }

    pub fn perturbation_index(&self, label: &str) -> Result<usize, GameError> {
        self.perturbations
            .iter()
            .position(|p| p == label)
            .ok_or_else(|| GameError::UnknownPerturbation(label.to_string()))
    }

    pub fn class_index(&self, name: &str) -> Result<usize, GameError> {
        self.classes
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| GameError::UnknownClass(name.to_string()))
    }

    /// Hypothesis index minimizing training loss within `class` on `perturbation`.
    pub fn best_response_index(&self, class: usize, perturbation: usize) -> usize {
        let losses = &self.train_loss[perturbation];
        let members = &self.classes[class].members;
        let mut best = members[0];
        for &h in &members[1..] {
            if losses[h] < losses[best] {
                best = h;
            }
        }
        best
    }

    /// Population loss of `class`'s best response to `perturbation`.
    pub fn response_loss(&self, class: usize, perturbation: usize) -> f64 {
        self.pop_loss[self.best_response_index(class, perturbation)]
    }

    /// The defender's payoff for `perturbation` under `objective`.
    pub fn evaluate(&self, objective: Objective, perturbation: usize) -> Result<f64, GameError> {
        Ok(match objective {
            Objective::Robust => (0..self.classes.len())
                .map(|c| self.response_loss(c, perturbation))
                .fold(f64::INFINITY, f64::min),
            Objective::DataPoisoning(c) => {
                if c >= self.classes.len() {
                    return Err(GameError::UnknownClass(format!("#{c}")));
                }
                self.response_loss(c, perturbation)
            }
            Objective::Bayesian => {
                let prior = self.prior.as_ref().ok_or(GameError::MissingPrior)?;
                prior
                    .iter()
                    .enumerate()
                    .map(|(c, w)| w * self.response_loss(c, perturbation))
                    .sum()
            }
        })
    }

    /// Re-evaluates `objective` at a reported equilibrium's perturbation.
    pub fn evaluate_equilibrium(
        &self,
        objective: Objective,
        eq: &Equilibrium,
    ) -> Result<f64, GameError> {
        self.evaluate(objective, self.perturbation_index(&eq.chosen_perturbation)?)
    }

    fn solve(&self, objective: Objective) -> Result<Equilibrium, GameError> {
        let mut best = 0;
        let mut best_value = self.evaluate(objective, 0)?;
        for d in 1..self.perturbations.len() {
            let v = self.evaluate(objective, d)?;
            if v > best_value {
                best = d;
                best_value = v;
            }
        }
        let classes: Vec<usize> = match objective {
            Objective::DataPoisoning(c) => vec![c],
            _ => (0..self.classes.len()).collect(),
        };
        let per_class_best_response = classes
            .into_iter()
            .map(|c| {
                (
                    self.classes[c].name.clone(),
                    self.hypotheses[self.best_response_index(c, best)].clone(),
                )
            })
            .collect();
        Ok(Equilibrium {
            chosen_perturbation: self.perturbations[best].clone(),
            per_class_best_response,
            value: best_value,
        })
    }

    /// Parses the JSON instance format; see [`GameFile`].
    pub fn from_json(text: &str) -> Result<Self, GameError> {
        let file: GameFile =
            serde_json::from_str(text).map_err(|e| GameError::Format(e.to_string()))?;
        file.into_instance()
    }

    pub fn to_file(&self) -> GameFile {
        GameFile {
            perturbations: self.perturbations.clone(),
            classes: self
                .classes
                .iter()
                .map(|c| {
                    (
                        c.name.clone(),
                        c.members
                            .iter()
                            .map(|&h| self.hypotheses[h].clone())
                            .collect(),
                    )
                })
                .collect(),
            train_loss: self
                .perturbations
                .iter()
                .zip(&self.train_loss)
                .map(|(d, row)| {
                    (
                        d.clone(),
                        self.hypotheses
                            .iter()
                            .cloned()
                            .zip(row.iter().copied())
                            .collect(),
                    )
                })
                .collect(),
            pop_loss: self
                .hypotheses
                .iter()
                .cloned()
                .zip(self.pop_loss.iter().copied())
                .collect(),
            prior: self.prior.as_ref().map(|p| {
                self.classes
                    .iter()
                    .map(|c| c.name.clone())
                    .zip(p.iter().copied())
                    .collect()
            }),
            distortion: None,
            epsilon: None,
        }
    }
}

fn check_prior(prior: &[f64], classes: usize) -> Result<(), GameError> {
    if prior.len() != classes {
        return Err(GameError::InvalidPrior(format!(
            "{} weights for {classes} classes",
            prior.len()
        )));
    }
    if prior.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(GameError::InvalidPrior(
            "weights must be finite and non-negative".into(),
        ));
    }
    let sum: f64 = prior.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(GameError::InvalidPrior(format!("weights sum to {sum}")));
    }
    Ok(())
}

/// On-disk instance format.
///
/// ```json
/// {
///   "perturbations": ["d1", "d2"],
///   "classes": {"H1": ["a1", "a2"], "H2": ["b1"]},
///   "train_loss": {"d1": {"a1": 0.1, "a2": 0.2, "b1": 0.3}, "d2": {...}},
///   "pop_loss": {"a1": 0.4, "a2": 0.5, "b1": 0.6},
///   "prior": {"H1": 0.5, "H2": 0.5},
///   "distortion": {"d1": 0.1, "d2": 0.9},
///   "epsilon": 0.5
/// }
/// ```
///
/// Hypotheses are identified by label across classes. When `distortion` and
/// `epsilon` are both present, perturbations with distortion above `epsilon`
/// are dropped before solving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameFile {
    pub perturbations: Vec<String>,
    pub classes: IndexMap<String, Vec<String>>,
    pub train_loss: IndexMap<String, IndexMap<String, f64>>,
    pub pop_loss: IndexMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<IndexMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distortion: Option<IndexMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

impl GameFile {
    pub fn into_instance(self) -> Result<GameInstance, GameError> {
        let mut hypotheses: Vec<String> = Vec::new();
        let mut classes = Vec::new();
        for (name, labels) in &self.classes {
            let mut members = Vec::new();
            for label in labels {
                let idx = match hypotheses.iter().position(|h| h == label) {
                    Some(i) => i,
                    None => {
                        hypotheses.push(label.clone());
                        hypotheses.len() - 1
                    }
                };
                if members.contains(&idx) {
                    return Err(GameError::DuplicateLabel(label.clone()));
                }
                members.push(idx);
            }
            classes.push(HypothesisClass {
                name: name.clone(),
                members,
            });
        }
        for label in self
            .pop_loss
            .keys()
            .chain(self.train_loss.values().flat_map(|r| r.keys()))
        {
            if !hypotheses.contains(label) {
                return Err(GameError::UnknownHypothesis(label.clone()));
            }
        }
        for d in self.train_loss.keys() {
            if !self.perturbations.contains(d) {
                return Err(GameError::UnknownPerturbation(d.clone()));
            }
        }
        let train_loss = self
            .perturbations
            .iter()
            .map(|d| {
                let row = self.train_loss.get(d);
                hypotheses
                    .iter()
                    .map(|h| {
                        row.and_then(|r| r.get(h)).copied().ok_or_else(|| {
                            GameError::MissingTrainLoss {
                                perturbation: d.clone(),
                                hypothesis: h.clone(),
                            }
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let pop_loss = hypotheses
            .iter()
            .map(|h| {
                self.pop_loss
                    .get(h)
                    .copied()
                    .ok_or_else(|| GameError::MissingPopLoss(h.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let prior = match &self.prior {
            None => None,
            Some(map) => {
                if let Some(unknown) = map.keys().find(|k| !self.classes.contains_key(*k)) {
                    return Err(GameError::UnknownClass(unknown.clone()));
                }
                Some(
                    self.classes
                        .keys()
                        .map(|c| map.get(c).copied().unwrap_or(0.0))
                        .collect(),
                )
            }
        };
        let instance = GameInstance::new(
            self.perturbations.clone(),
            hypotheses,
            classes,
            train_loss,
            pop_loss,
            prior,
        )?;
        match (&self.distortion, self.epsilon) {
            (Some(distortion), Some(epsilon)) => {
                let table = self
                    .perturbations
                    .iter()
                    .map(|d| {
                        distortion.get(d).copied().ok_or_else(|| {
                            GameError::Format(format!("missing distortion for {d:?}"))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                instance.restrict_by_distortion(&table, epsilon)
            }
            (None, None) => Ok(instance),
            _ => Err(GameError::Format(
                "distortion and epsilon must be given together".into(),
            )),
        }
    }
}

/// Attacker's best response: the class member with the lowest training loss.
pub fn best_response(
    instance: &GameInstance,
    class: &str,
    perturbation: &str,
) -> Result<String, GameError> {
    let c = instance.class_index(class)?;
    let d = instance.perturbation_index(perturbation)?;
    Ok(instance.hypotheses[instance.best_response_index(c, d)].clone())
}

/// Max over perturbations of the min over classes of the best response's
/// population loss.
pub fn robust_value(instance: &GameInstance) -> Result<Equilibrium, GameError> {
    instance.solve(Objective::Robust)
}

/// The single-class game: max over perturbations of `class`'s best-response
/// population loss.
pub fn data_poisoning_value(
    instance: &GameInstance,
    class: &str,
) -> Result<Equilibrium, GameError> {
    instance.solve(Objective::DataPoisoning(instance.class_index(class)?))
}

/// Max over perturbations of the prior-weighted best-response population loss.
pub fn bayesian_value(instance: &GameInstance) -> Result<Equilibrium, GameError> {
    instance.solve(Objective::Bayesian)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxationCheck {
    pub robust: f64,
    pub bayesian: f64,
    pub holds: bool,
}

/// Checks that the Bayesian objective upper-bounds the robust one.
pub fn check_relaxation(instance: &GameInstance) -> Result<RelaxationCheck, GameError> {
    let bayesian = bayesian_value(instance)?.value;
    let robust = robust_value(instance)?.value;
    Ok(RelaxationCheck {
        robust,
        bayesian,
        holds: robust <= bayesian + RELAXATION_TOL,
    })
}

/// Training the best hypothesis of the whole function space versus the
/// robust objective over architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    pub union_class: String,
    /// Defender value when the attacker minimizes training loss over the union.
    pub pulled_inside_value: f64,
    pub pulled_inside_perturbation: String,
    pub pulled_inside_hypothesis: String,
    /// Robust value over the remaining (architecture) classes.
    pub robust_value: f64,
    pub robust_perturbation: String,
    pub gap: f64,
}

/// Contrasts the two placements of the infimum over classes.
///
/// Requires a class whose members are exactly the union of every class's
/// members. The robust side ranges over all other classes, or over the union
/// class itself when it is the only one.
pub fn memorization_demo(instance: &GameInstance) -> Result<MemorizationReport, GameError> {
    let all: HashSet<usize> = instance
        .classes
        .iter()
        .flat_map(|c| c.members.iter().copied())
        .collect();
    let union = instance
        .classes
        .iter()
        .position(|c| c.members.iter().copied().collect::<HashSet<_>>() == all)
        .ok_or(GameError::MissingUnionClass)?;
    let inside = instance.solve(Objective::DataPoisoning(union))?;
    let others: Vec<usize> = (0..instance.classes.len())
        .filter(|&c| c != union)
        .collect();
    let architectures = if others.is_empty() {
        vec![union]
    } else {
        others
    };
    let robust = robust_value(&instance.restrict_classes(&architectures)?)?;
    let union_name = instance.classes[union].name.clone();
    Ok(MemorizationReport {
        pulled_inside_hypothesis: inside.per_class_best_response[&union_name].clone(),
        union_class: union_name,
        pulled_inside_value: inside.value,
        pulled_inside_perturbation: inside.chosen_perturbation,
        gap: inside.value - robust.value,
        robust_value: robust.value,
        robust_perturbation: robust.chosen_perturbation,
    })
}

/// Size limits for [`random_instance`].
#[derive(Debug, Clone, Copy)]
pub struct InstanceShape {
    pub max_perturbations: usize,
    pub max_classes: usize,
    pub max_class_size: usize,
    /// Losses are drawn from this many evenly spaced levels in `[0, 1]`, so
    /// ties occur; `0` draws continuous values.
    pub loss_levels: u32,
}

impl Default for InstanceShape {
    fn default() -> Self {
        InstanceShape {
            max_perturbations: 6,
            max_classes: 6,
            max_class_size: 6,
            loss_levels: 0,
        }
    }
}

/// Random instance with a random prior. Each class owns its hypotheses.
pub fn random_instance(shape: InstanceShape, seed: u64) -> GameInstance {
    let mut rng = seed::rng(seed);
    let loss = |rng: &mut seed::Rng| -> f64 {
        if shape.loss_levels == 0 {
            rng.random::<f64>()
        } else {
            f64::from(rng.random_range(0..=shape.loss_levels)) / f64::from(shape.loss_levels)
        }
    };
    let n_pert = rng.random_range(1..=shape.max_perturbations);
    let n_class = rng.random_range(1..=shape.max_classes);
    let mut hypotheses = Vec::new();
    let mut classes = Vec::new();
    for c in 0..n_class {
        let size = rng.random_range(1..=shape.max_class_size);
        let members = (0..size)
            .map(|i| {
                hypotheses.push(format!("h{c}_{i}"));
                hypotheses.len() - 1
            })
            .collect();
        classes.push(HypothesisClass {
            name: format!("H{c}"),
            members,
        });
    }
    let train_loss = (0..n_pert)
        .map(|_| (0..hypotheses.len()).map(|_| loss(&mut rng)).collect())
        .collect();
    let pop_loss = (0..hypotheses.len()).map(|_| loss(&mut rng)).collect();
    let weights: Vec<f64> = (0..n_class).map(|_| rng.random::<f64>() + 1e-3).collect();
    let total: f64 = weights.iter().sum();
    let mut prior: Vec<f64> = weights.iter().map(|w| w / total).collect();
    // Put rounding residue on the last weight so the prior sums to 1.
    let head: f64 = prior[..n_class - 1].iter().sum();
    prior[n_class - 1] = 1.0 - head;
    GameInstance::new(
        (0..n_pert).map(|d| format!("d{d}")).collect(),
        hypotheses,
        classes,
        train_loss,
        pop_loss,
        Some(prior),
    )
    .expect("generated instance is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two perturbations, two classes; best-response population losses are
    /// d1: (0.4, 0.6) and d2: (0.5, 0.3).
    pub(crate) fn two_by_two() -> GameInstance {
        GameInstance::from_json(
            r#"{
              "perturbations": ["d1", "d2"],
              "classes": {"H1": ["a1", "a2"], "H2": ["b1", "b2"]},
              "train_loss": {
                "d1": {"a1": 0.1, "a2": 0.2, "b1": 0.1, "b2": 0.2},
                "d2": {"a1": 0.2, "a2": 0.1, "b1": 0.2, "b2": 0.1}
              },
              "pop_loss": {"a1": 0.4, "a2": 0.5, "b1": 0.6, "b2": 0.3},
              "prior": {"H1": 0.5, "H2": 0.5}
            }"#,
        )
        .unwrap()
    }

    fn single(train: &[f64], pop: &[f64]) -> GameInstance {
        let n = train.len();
        GameInstance::new(
            vec!["d".into()],
            (0..n).map(|i| format!("h{}", i + 1)).collect(),
            vec![HypothesisClass {
                name: "H".into(),
                members: (0..n).collect(),
            }],
            vec![train.to_vec()],
            pop.to_vec(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn best_response_rules() {
        assert_eq!(
            best_response(&single(&[0.3, 0.1], &[0.0, 0.0]), "H", "d").unwrap(),
            "h2"
        );
        assert_eq!(
            best_response(&single(&[0.2, 0.2], &[0.0, 0.0]), "H", "d").unwrap(),
            "h1"
        );
        assert_eq!(
            best_response(&single(&[0.9], &[0.0]), "H", "d").unwrap(),
            "h1"
        );
        assert!(matches!(
            best_response(&single(&[0.9], &[0.0]), "X", "d"),
            Err(GameError::UnknownClass(_))
        ));
    }

    #[test]
    fn two_by_two_values() {
        let g = two_by_two();
        let r = robust_value(&g).unwrap();
        assert_eq!(r.chosen_perturbation, "d1");
        assert_eq!(r.value, 0.4);
        assert_eq!(r.per_class_best_response["H1"], "a1");
        assert_eq!(r.per_class_best_response["H2"], "b1");

        let b = bayesian_value(&g).unwrap();
        assert_eq!(b.chosen_perturbation, "d1");
        assert!((b.value - 0.5).abs() < 1e-15);

        // H1 alone: d1 -> a1 (0.4), d2 -> a2 (0.5).
        let p = data_poisoning_value(&g, "H1").unwrap();
        assert_eq!(p.chosen_perturbation, "d2");
        assert_eq!(p.value, 0.5);
        assert_eq!(p.per_class_best_response.len(), 1);

        let c = check_relaxation(&g).unwrap();
        assert_eq!(c.robust, 0.4);
        assert!((c.bayesian - 0.5).abs() < 1e-15);
        assert!(c.holds);
    }

    #[test]
    fn degenerate_games() {
        let g = two_by_two()
            .restrict_by_distortion(&[0.0, 1.0], 0.5)
            .unwrap();
        let r = robust_value(&g).unwrap();
        assert_eq!((r.chosen_perturbation.as_str(), r.value), ("d1", 0.4));

        let constant = GameInstance::new(
            vec!["x".into(), "y".into()],
            vec!["a".into(), "b".into()],
            vec![
                HypothesisClass {
                    name: "A".into(),
                    members: vec![0],
                },
                HypothesisClass {
                    name: "B".into(),
                    members: vec![1],
                },
            ],
            vec![vec![0.7, 0.7], vec![0.7, 0.7]],
            vec![0.7, 0.7],
            None,
        )
        .unwrap();
        let r = robust_value(&constant).unwrap();
        assert_eq!((r.chosen_perturbation.as_str(), r.value), ("x", 0.7));
        assert_eq!(bayesian_value(&constant), Err(GameError::MissingPrior));

        let one = single(&[0.5, 0.2], &[1.5, 2.5]);
        assert_eq!(
            robust_value(&one).unwrap(),
            data_poisoning_value(&one, "H").unwrap()
        );
        let one = single(&[0.5], &[1.5]);
        assert_eq!(data_poisoning_value(&one, "H").unwrap().value, 1.5);
    }

    #[test]
    fn priors() {
        let g = two_by_two().with_prior(vec![1.0, 0.0]).unwrap();
        let b = bayesian_value(&g).unwrap();
        let p = data_poisoning_value(&g, "H1").unwrap();
        assert_eq!(
            (b.chosen_perturbation, b.value),
            (p.chosen_perturbation, p.value)
        );

        // Point mass on H1, the binding class at the robust choice d1.
        let c = check_relaxation(&g).unwrap();
        assert!(c.holds);
        assert!(c.bayesian >= c.robust);

        assert!(matches!(
            two_by_two().with_prior(vec![0.6, 0.6]),
            Err(GameError::InvalidPrior(_))
        ));
        assert!(matches!(
            two_by_two().with_prior(vec![1.0]),
            Err(GameError::InvalidPrior(_))
        ));
    }

    #[test]
    fn file_errors() {
        assert!(matches!(
            GameInstance::from_json("{}"),
            Err(GameError::Format(_))
        ));
        let missing =
            r#"{"perturbations":["d"],"classes":{"H":["a"]},"train_loss":{},"pop_loss":{"a":1}}"#;
        assert!(matches!(
            GameInstance::from_json(missing),
            Err(GameError::MissingTrainLoss { .. })
        ));
        let empty =
            r#"{"perturbations":["d"],"classes":{"H":[]},"train_loss":{"d":{}},"pop_loss":{}}"#;
        assert_eq!(
            GameInstance::from_json(empty),
            Err(GameError::EmptyClass("H".into()))
        );
        let no_b =
            r#"{"perturbations":[],"classes":{"H":["a"]},"train_loss":{},"pop_loss":{"a":1}}"#;
        assert_eq!(
            GameInstance::from_json(no_b),
            Err(GameError::NoPerturbations)
        );
        let half = r#"{"perturbations":["d"],"classes":{"H":["a"]},"train_loss":{"d":{"a":0}},"pop_loss":{"a":1},"epsilon":1}"#;
        assert!(matches!(
            GameInstance::from_json(half),
            Err(GameError::Format(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let g = two_by_two();
        let text = serde_json::to_string(&g.to_file()).unwrap();
        assert_eq!(GameInstance::from_json(&text).unwrap(), g);
    }

    #[test]
    fn distortion_filter_from_file() {
        let g = GameInstance::from_json(
            r#"{"perturbations":["d1","d2"],"classes":{"H":["a","b"]},
                "train_loss":{"d1":{"a":0,"b":1},"d2":{"a":1,"b":0}},
                "pop_loss":{"a":0.2,"b":0.9},
                "distortion":{"d1":0.1,"d2":0.8},"epsilon":0.5}"#,
        )
        .unwrap();
        assert_eq!(g.perturbations(), ["d1"]);
        assert_eq!(robust_value(&g).unwrap().value, 0.2);
    }

    #[test]
    fn memorization() {
        // H1 and H2 are architectures; "All" is their union. The memorizer m
        // fits the poisoned data perfectly but generalizes terribly.
        let g = GameInstance::from_json(
            r#"{
              "perturbations": ["d1", "d2"],
              "classes": {"H1": ["a", "m"], "H2": ["b"], "All": ["a", "m", "b"]},
              "train_loss": {"d1": {"a": 0.3, "m": 0.0, "b": 0.2}, "d2": {"a": 0.1, "m": 0.5, "b": 0.2}},
              "pop_loss": {"a": 0.2, "m": 10.0, "b": 0.3}
            }"#,
        )
        .unwrap();
        let report = memorization_demo(&g).unwrap();
        assert_eq!(report.union_class, "All");
        assert_eq!(report.pulled_inside_value, 10.0);
        assert_eq!(report.pulled_inside_hypothesis, "m");
        assert_eq!(report.pulled_inside_perturbation, "d1");
        // d1: H1 -> m (10), H2 -> b (0.3) => 0.3; d2: H1 -> a (0.2), H2 -> b => 0.2.
        assert_eq!(report.robust_value, 0.3);
        assert_eq!(report.robust_perturbation, "d1");

        let no_union = two_by_two();
        assert_eq!(
            memorization_demo(&no_union),
            Err(GameError::MissingUnionClass)
        );

        let one = single(&[0.5, 0.2], &[1.5, 2.5]);
        let report = memorization_demo(&one).unwrap();
        assert_eq!(report.pulled_inside_value, report.robust_value);
    }

    #[test]
    fn memorization_without_memorizer_agrees() {
        // Every class's best response is its lowest-population-loss member, and
        // the overall training minimizer is also the robust class's choice.
        let g = GameInstance::from_json(
            r#"{
              "perturbations": ["d1", "d2"],
              "classes": {"H1": ["a"], "H2": ["b"], "All": ["a", "b"]},
              "train_loss": {"d1": {"a": 0.1, "b": 0.4}, "d2": {"a": 0.1, "b": 0.3}},
              "pop_loss": {"a": 0.5, "b": 0.9}
            }"#,
        )
        .unwrap();
        let report = memorization_demo(&g).unwrap();
        assert_eq!(report.pulled_inside_value, 0.5);
        assert_eq!(report.robust_value, 0.5);
        assert_eq!(report.gap, 0.0);
    }

    #[test]
    fn random_instances_are_valid() {
        for s in 0..50 {
            let g = random_instance(InstanceShape::default(), s);
            assert!(g.perturbations().len() <= 6 && g.classes().len() <= 6);
            assert!(g
                .classes()
                .iter()
                .all(|c| (1..=6).contains(&c.members.len())));
            assert!(g.prior().is_some());
        }
    }
}
