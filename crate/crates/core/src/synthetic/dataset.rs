//! Dataset generation: faces, manipulations, PNG and landmark files, and the
//! JSON-lines manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{apply_manipulation, sample_face, FamilyKind, ManipulationFamily};
use crate::dataset::{Label, Manifest, Record, Split};
use crate::error::{Error, Result};
use crate::imageio::save_png;
use crate::seed;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";
pub const LANDMARK_DIR: &str = "landmarks";

/// Image counts are per class: a split with `n` holds `n` reals and `n`
/// fakes, the fakes shared evenly among the included families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Per-class size of the unseen-test split; only used with `leave_out`.
    pub unseen_test: usize,
    pub families: Vec<FamilyKind>,
    /// Family withheld from train/val/test and used for the unseen-test split.
    pub leave_out: Option<FamilyKind>,
    /// Manipulation strengths are drawn uniformly from this range.
    pub strength: (f64, f64),
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            train: 500,
            val: 50,
            test: 200,
            unseen_test: 200,
            families: FamilyKind::ALL.to_vec(),
            leave_out: None,
            strength: (0.5, 1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Job {
    index: usize,
    split: Split,
    family: Option<FamilyKind>,
}

impl DatasetSpec {
    /// Families used for train, val and test.
    pub fn seen_families(&self) -> Vec<FamilyKind> {
        self.families
            .iter()
            .copied()
            .filter(|f| Some(*f) != self.leave_out)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.train == 0 {
            return Err(Error::contract("training split needs at least one image per class"));
        }
        if self.seen_families().is_empty() {
            return Err(Error::contract("no manipulation family left for training"));
        }
        if let Some(f) = self.leave_out {
            if !self.families.contains(&f) {
                return Err(Error::contract(format!("left-out family `{f}` is not in the family list")));
            }
        }
        let (lo, hi) = self.strength;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::contract(format!("strength range ({lo}, {hi}) must lie in (0, 1]")));
        }
        Ok(())
    }

    /// Total records the spec produces.
    pub fn total(&self) -> usize {
        let unseen = if self.leave_out.is_some() { self.unseen_test } else { 0 };
        2 * (self.train + self.val + self.test + unseen)
    }

    fn jobs(&self) -> Vec<Job> {
        let seen = self.seen_families();
        let mut splits = vec![
            (Split::Train, self.train, seen.clone()),
            (Split::Val, self.val, seen.clone()),
            (Split::Test, self.test, seen),
        ];
        if let Some(f) = self.leave_out {
            splits.push((Split::UnseenTest, self.unseen_test, vec![f]));
        }
        let mut jobs = Vec::with_capacity(self.total());
        for (split, n, fams) in splits {
            for j in 0..n {
                for family in [None, Some(fams[j % fams.len()])] {
                    jobs.push(Job {
                        index: jobs.len(),
                        split,
                        family,
                    });
                }
            }
        }
        jobs
    }
}

fn make_record(job: &Job, spec: &DatasetSpec, out: &Path) -> Result<Record> {
    let id = format!("{}-{:06}", job.split, job.index);
    let (mut img, lm) = sample_face(seed::derive(spec.seed, &[1, job.index as u64]))?;
    let (label, family) = match job.family {
        None => (Label::Real, "real".to_string()),
        Some(kind) => {
            let mut rng = seed::rng(spec.seed, &[2, job.index as u64]);
            let (lo, hi) = spec.strength;
            let strength = if lo < hi { rng.random_range(lo..=hi) } else { lo };
            let fam = ManipulationFamily::new(kind, strength, rng.random())?;
            img = apply_manipulation(&img, &lm, &fam)?;
            (Label::Fake, kind.name().to_string())
        }
    };
    let image = PathBuf::from(IMAGE_DIR).join(format!("{id}.png"));
    let landmarks = PathBuf::from(LANDMARK_DIR).join(format!("{id}.txt"));
    save_png(&out.join(&image), &img)?;
    lm.save(&out.join(&landmarks))?;
    Ok(Record {
        id,
        image,
        landmarks,
        label,
        family,
        split: job.split,
    })
}

/// Writes every image, landmark file and `manifest.jsonl` under `out`.
/// Each image depends only on the spec seed and its index, so the result is
/// identical for any thread count.
pub fn generate_dataset(spec: &DatasetSpec, out: &Path) -> Result<Manifest> {
    spec.validate()?;
    for dir in [out.to_path_buf(), out.join(IMAGE_DIR), out.join(LANDMARK_DIR)] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let records = spec
        .jobs()
        .par_iter()
        .map(|job| make_record(job, spec, out))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(out, records);
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(leave_out: Option<FamilyKind>) -> DatasetSpec {
        DatasetSpec {
            train: 5,
            val: 1,
            test: 2,
            unseen_test: 3,
            leave_out,
            seed: 42,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn counts_match_spec() {
        let spec = small(None);
        let jobs = spec.jobs();
        assert_eq!(jobs.len(), spec.total());
        assert_eq!(jobs.len(), 2 * (5 + 1 + 2));
        let train_fakes: Vec<_> = jobs
            .iter()
            .filter(|j| j.split == Split::Train && j.family.is_some())
            .map(|j| j.family.unwrap())
            .collect();
        assert_eq!(train_fakes.len(), 5);
        // 5 fakes over 4 families: the first gets the remainder
        assert_eq!(train_fakes.iter().filter(|f| **f == FamilyKind::LocalEyes).count(), 2);
    }

    #[test]
    fn leave_out_excluded_from_seen_splits() {
        let spec = small(Some(FamilyKind::GlobalWarp));
        let jobs = spec.jobs();
        for j in &jobs {
            match j.split {
                Split::UnseenTest => assert!(j.family.is_none() || j.family == Some(FamilyKind::GlobalWarp)),
                _ => assert_ne!(j.family, Some(FamilyKind::GlobalWarp)),
            }
        }
        assert_eq!(jobs.iter().filter(|j| j.split == Split::UnseenTest).count(), 6);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = small(None);
        s.train = 0;
        assert!(s.validate().is_err());
        let mut s = small(None);
        s.families = vec![FamilyKind::GlobalColor];
        s.leave_out = Some(FamilyKind::GlobalColor);
        assert!(s.validate().is_err());
        let mut s = small(None);
        s.strength = (0.0, 0.5);
        assert!(s.validate().is_err());
    }

    #[test]
    fn generation_writes_files_and_is_deterministic() {
        let spec = DatasetSpec {
            train: 2,
            val: 0,
            test: 1,
            unseen_test: 1,
            leave_out: Some(FamilyKind::LocalEyes),
            seed: 7,
            ..DatasetSpec::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_dataset(&spec, a.path()).unwrap();
        generate_dataset(&spec, b.path()).unwrap();
        assert_eq!(ma.len(), spec.total());
        let read = |d: &Path| fs::read(d.join(MANIFEST_FILE)).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
        let r = &ma.records[1];
        assert_eq!(r.label, Label::Fake);
        assert_eq!(
            fs::read(a.path().join(&r.image)).unwrap(),
            fs::read(b.path().join(&r.image)).unwrap()
        );
        let loaded = Manifest::load(&a.path().join(MANIFEST_FILE)).unwrap();
        let (img, lm) = loaded.load_sample(&loaded.records[0]).unwrap();
        assert_eq!(img.shape(), &[128, 128, 3]);
        assert_eq!(lm.points().len(), 81);
    }

    #[test]
    fn unwritable_output_is_io_error() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let err = generate_dataset(&small(None), &f.path().join("sub")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
