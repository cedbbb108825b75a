use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Profile, TrainConfig};
use crate::dataset::{expand_pairs, filter_split, load_manifest, CaptionRecord, Split};
use crate::{Error, Result};

/// Experimental setups: in-domain with header tuning, cross-domain, and
/// training on every available dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setup {
    I,
    Ii,
    Iii,
}

impl std::str::FromStr for Setup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "i" | "1" => Ok(Setup::I),
            "ii" | "2" => Ok(Setup::Ii),
            "iii" | "3" => Ok(Setup::Iii),
            other => Err(Error::InvalidArgument(format!("unknown setup {other:?}; expected i, ii or iii"))),
        }
    }
}

/// Resolved data and flags for one setup. Audio paths are absolute.
#[derive(Debug, Clone)]
pub struct SetupPlan {
    /// `None` for plain training on the given manifests.
    pub setup: Option<Setup>,
    pub train: Vec<CaptionRecord>,
    pub val: Vec<CaptionRecord>,
    pub test: Vec<CaptionRecord>,
    /// Forced header-tuning flag; `None` keeps the caller's.
    pub header_tuning: Option<bool>,
    pub cross_domain: bool,
    /// Profile override; `None` keeps the caller's.
    pub profile: Option<Profile>,
}

impl SetupPlan {
    /// Number of (audio, caption) training pairs.
    pub fn train_pairs(&self) -> usize {
        expand_pairs(&self.train).len()
    }

    /// Label attached to evaluation reports.
    pub fn domain_tag(&self) -> &'static str {
        if self.cross_domain {
            "cross-domain"
        } else {
            "in-domain"
        }
    }

    pub fn apply(&self, config: &mut TrainConfig) {
        if let Some(h) = self.header_tuning {
            config.header_tuning = h;
        }
        if let Some(p) = self.profile {
            config.profile = p;
        }
    }
}

pub(crate) fn load_absolute(path: &Path) -> Result<Vec<CaptionRecord>> {
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let base = std::path::absolute(&base).map_err(|e| Error::io(&base, e))?;
    let mut records = load_manifest(path)?;
    for r in &mut records {
        r.audio_path = r.resolved_audio(&base);
    }
    Ok(records)
}

/// Loads the manifests for `setup`.
///
/// * `i`: one training manifest; its own test split is the test set.
/// * `ii`: one training manifest; `test` names the other dataset, whose
///   test split (or every record, if it has none) is evaluated.
/// * `iii`: two or more training manifests concatenated; the test set is
///   `test` if given, else every manifest's test split.
pub fn plan_setup(setup: Setup, train: &[PathBuf], test: Option<&Path>) -> Result<SetupPlan> {
    let needs = |ok: bool, reason: &str| {
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("setup {setup:?}: {reason}")))
        }
    };
    match setup {
        Setup::I | Setup::Ii => needs(train.len() == 1, "expects exactly one training manifest")?,
        Setup::Iii => needs(train.len() >= 2, "expects at least two training manifests")?,
    }
    if setup == Setup::Ii {
        needs(test.is_some(), "needs a test manifest from another dataset")?;
    }
    let mut plan = load_plan(train, test)?;
    plan.setup = Some(setup);
    plan.header_tuning = Some(setup == Setup::I);
    plan.cross_domain = setup == Setup::Ii;
    plan.profile = (setup == Setup::Iii).then_some(Profile::Merged);
    Ok(plan)
}

/// Plain training: train/val splits of every manifest, test set from `test`
/// or the manifests' test splits; no flags forced.
pub fn plan_plain(train: &[PathBuf], test: Option<&Path>) -> Result<SetupPlan> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training manifests given".into()));
    }
    load_plan(train, test)
}

fn load_plan(train: &[PathBuf], test: Option<&Path>) -> Result<SetupPlan> {
    let mut all = Vec::new();
    let mut seen = HashSet::new();
    for path in train {
        for r in load_absolute(path)? {
            if !seen.insert(r.audio_id.clone()) {
                return Err(Error::DuplicateAudioId(r.audio_id));
            }
            all.push(r);
        }
    }
    let test_records = match test {
        Some(p) => {
            let records = load_absolute(p)?;
            let split = filter_split(&records, Split::Test);
            if split.is_empty() {
                records
            } else {
                split
            }
        }
        None => filter_split(&all, Split::Test),
    };

    Ok(SetupPlan {
        setup: None,
        train: filter_split(&all, Split::Train),
        val: filter_split(&all, Split::Val),
        test: test_records,
        header_tuning: None,
        cross_domain: false,
        profile: None,
    })
}
