use serde::{Deserialize, Serialize};

use super::archive::{ClassRole, FeatureArchive, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Train on the training split, select on validation.
    One,
    /// Retrain on training plus validation, report on test.
    Two,
}

/// Which samples a protocol stage may train on and evaluate on.
///
/// All indices are archive-global: sample indices into the feature
/// matrices, class indices into the manifest's class list. Every list is
/// sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageView {
    pub stage: Stage,
    pub train_samples: Vec<usize>,
    pub eval_seen_samples: Vec<usize>,
    pub eval_unseen_samples: Vec<usize>,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
}

impl StageView {
    /// Seen then unseen classes, the candidate set at evaluation time.
    pub fn eval_classes(&self) -> Vec<usize> {
        let mut all = self.seen_classes.clone();
        all.extend(&self.unseen_classes);
        all.sort_unstable();
        all
    }

    pub fn eval_samples(&self) -> Vec<usize> {
        let mut all = self.eval_seen_samples.clone();
        all.extend(&self.eval_unseen_samples);
        all.sort_unstable();
        all
    }
}

pub fn stage_view(archive: &FeatureArchive, stage: Stage) -> StageView {
    let classes = |roles: &[ClassRole]| -> Vec<usize> {
        (0..archive.num_classes())
            .filter(|&k| roles.contains(&archive.role(k)))
            .collect()
    };
    let samples = |splits: &[Split]| -> Vec<usize> {
        (0..archive.num_samples())
            .filter(|&i| splits.contains(&archive.splits[i]))
            .collect()
    };
    match stage {
        Stage::One => StageView {
            stage,
            train_samples: samples(&[Split::Train]),
            eval_seen_samples: samples(&[Split::ValS]),
            eval_unseen_samples: samples(&[Split::ValU]),
            seen_classes: classes(&[ClassRole::TrainSeen]),
            unseen_classes: classes(&[ClassRole::ValUnseen]),
        },
        Stage::Two => StageView {
            stage,
            train_samples: samples(&[Split::Train, Split::ValS, Split::ValU]),
            eval_seen_samples: samples(&[Split::TestS]),
            eval_unseen_samples: samples(&[Split::TestU]),
            seen_classes: classes(&[ClassRole::TrainSeen, ClassRole::ValUnseen]),
            unseen_classes: classes(&[ClassRole::TestUnseen]),
        },
    }
}
