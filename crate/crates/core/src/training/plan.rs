use std::fmt;
use std::str::FromStr;

use crate::autograd::ParamGroup;
use crate::error::{Error, Result};
use crate::model::Head;

/// The three stages of the schedule, in the only order they may run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PhaseKind {
    Holistic,
    Relation,
    Fusion,
}

impl PhaseKind {
    pub const ALL: [PhaseKind; 3] = [PhaseKind::Holistic, PhaseKind::Relation, PhaseKind::Fusion];

    pub fn head(self) -> Head {
        match self {
            PhaseKind::Holistic => Head::Holistic,
            PhaseKind::Relation => Head::Relation,
            PhaseKind::Fusion => Head::Fusion,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhaseKind::Holistic => "holistic",
            PhaseKind::Relation => "relation",
            PhaseKind::Fusion => "fusion",
        })
    }
}

impl FromStr for PhaseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "holistic" => Ok(PhaseKind::Holistic),
            "relation" => Ok(PhaseKind::Relation),
            "fusion" => Ok(PhaseKind::Fusion),
            other => Err(Error::config(format!("unknown phase {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhasePlan {
    pub kind: PhaseKind,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub trainable: Vec<ParamGroup>,
}

impl PhasePlan {
    /// Default trainable groups: each phase trains its own pathway and head;
    /// the relation phase includes the frame extractor.
    pub fn default_trainable(kind: PhaseKind) -> Vec<ParamGroup> {
        match kind {
            PhaseKind::Holistic => vec![ParamGroup::Holistic, ParamGroup::HolisticHead],
            PhaseKind::Relation => vec![ParamGroup::FrameExtractor, ParamGroup::RelationMlp, ParamGroup::RelationHead],
            PhaseKind::Fusion => vec![ParamGroup::Fusion, ParamGroup::FusionHead],
        }
    }

    pub fn new(kind: PhaseKind, epochs: usize, lr: f64, seed: u64) -> Self {
        PhasePlan {
            kind,
            epochs,
            lr,
            batch_size: 6,
            momentum: 0.9,
            weight_decay: 0.0005,
            seed,
            trainable: Self::default_trainable(kind),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub phases: Vec<PhasePlan>,
}

/// Per-phase seeds derived from one run seed.
pub fn phase_seed(run_seed: u64, kind: PhaseKind) -> u64 {
    run_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(kind.index() as u64 + 1)
}

impl TrainPlan {
    pub const FULL_EPOCHS: [usize; 3] = [100, 100, 120];
    pub const DESK_EPOCHS: [usize; 3] = [20, 20, 30];
    pub const LEARNING_RATES: [f64; 3] = [1e-3, 1e-4, 1e-4];

    pub fn with_epochs(epochs: [usize; 3], run_seed: u64) -> Self {
        TrainPlan {
            phases: PhaseKind::ALL
                .iter()
                .zip(epochs)
                .zip(Self::LEARNING_RATES)
                .map(|((&kind, e), lr)| PhasePlan::new(kind, e, lr, phase_seed(run_seed, kind)))
                .collect(),
        }
    }

    pub fn full(run_seed: u64) -> Self {
        Self::with_epochs(Self::FULL_EPOCHS, run_seed)
    }

    pub fn desk(run_seed: u64) -> Self {
        Self::with_epochs(Self::DESK_EPOCHS, run_seed)
    }

    /// Keeps only the listed phases (in schedule order).
    pub fn restrict(mut self, keep: &[PhaseKind]) -> Self {
        self.phases.retain(|p| keep.contains(&p.kind));
        self
    }

    pub fn phase(&self, kind: PhaseKind) -> Option<&PhasePlan> {
        self.phases.iter().find(|p| p.kind == kind)
    }

    pub fn phase_mut(&mut self, kind: PhaseKind) -> Option<&mut PhasePlan> {
        self.phases.iter_mut().find(|p| p.kind == kind)
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::config("the plan has no phases"));
        }
        for w in self.phases.windows(2) {
            if w[0].kind >= w[1].kind {
                return Err(Error::config(format!(
                    "phase {} cannot follow phase {}; the order is holistic, relation, fusion",
                    w[1].kind, w[0].kind
                )));
            }
        }
        for p in &self.phases {
            if p.batch_size == 0 {
                return Err(Error::config(format!("phase {}: batch size must be positive", p.kind)));
            }
            if p.trainable.is_empty() {
                return Err(Error::config(format!("phase {}: no trainable parameter groups", p.kind)));
            }
            if !(p.lr > 0.0 && p.lr.is_finite()) {
                return Err(Error::config(format!("phase {}: learning rate must be positive", p.kind)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_constants() {
        let plan = TrainPlan::full(0);
        let epochs: Vec<usize> = plan.phases.iter().map(|p| p.epochs).collect();
        assert_eq!(epochs, vec![100, 100, 120]);
        assert_eq!(plan.phases[0].lr, 1e-3);
        assert_eq!(plan.phases[1].lr, 1e-4);
        for p in &plan.phases {
            assert_eq!((p.batch_size, p.momentum, p.weight_decay), (6, 0.9, 0.0005));
        }
        plan.validate().unwrap();
    }

    #[test]
    fn order_is_enforced() {
        let mut plan = TrainPlan::desk(1);
        plan.phases.swap(0, 1);
        assert!(matches!(plan.validate(), Err(Error::Config(_))));
        let mut plan = TrainPlan::desk(1);
        plan.phases[2].trainable.clear();
        assert!(matches!(plan.validate(), Err(Error::Config(_))));
        let single = TrainPlan::desk(1).restrict(&[PhaseKind::Relation]);
        assert_eq!(single.phases.len(), 1);
        single.validate().unwrap();
    }
}
