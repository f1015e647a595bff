//! Metrics and experiment protocols: evaluation reports, leave-one-family-out
//! generalization and ablations over fragments and attention modules.

mod experiments;
mod roc;

pub use experiments::{
    run_ablation, run_generalization, sweep, train_model, unseen_summary, ATTENTION_GROUP, FRAGMENT_GROUP, AblationPlan, AblationReport, AblationRow,
    AttentionVariant, ExperimentConfig, GeneralizationReport, GeneralizationRow, SweepRun,
};
pub use roc::{auc, roc_auc, roc_curve, RocPoint};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::branches::{
    cache_predictions, decide, fake_score, fragment_predict, fuse_masked, DetectorModel, FragmentCache,
    PossibilityMatrix, WeightMatrix, NUM_FRAGMENTS,
};
use crate::dataset::{Label, Manifest, Split};
use crate::error::{Error, Result};
use crate::mfss::Fragment;
use crate::nn::checkpoint::write_atomic;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const ROC_CSV: &str = "roc_points.csv";

/// First 16 hex digits of the SHA-256 of the value's JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

/// Rows are the true class, columns the prediction; fake is the positive
/// class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub true_fake_pred_fake: usize,
    pub true_fake_pred_real: usize,
    pub true_real_pred_fake: usize,
    pub true_real_pred_real: usize,
}

impl Confusion {
    fn add(&mut self, truth: Label, pred: Label) {
        match (truth, pred) {
            (Label::Fake, Label::Fake) => self.true_fake_pred_fake += 1,
            (Label::Fake, Label::Real) => self.true_fake_pred_real += 1,
            (Label::Real, Label::Fake) => self.true_real_pred_fake += 1,
            (Label::Real, Label::Real) => self.true_real_pred_real += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.true_fake_pred_fake + self.true_fake_pred_real + self.true_real_pred_fake + self.true_real_pred_real
    }

    pub fn correct(&self) -> usize {
        self.true_fake_pred_fake + self.true_real_pred_real
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub split: Split,
    /// `[fake, real]` sample counts.
    pub counts: [usize; 2],
    pub accuracy: f64,
    pub confusion: Confusion,
    /// Present when the split holds both classes.
    pub auc: Option<f64>,
    #[serde(with = "roc_points")]
    pub roc: Vec<RocPoint>,
    /// Accuracy of each fragment's own decision, keyed `p, b, f, e, m, n`.
    pub fragment_accuracy: BTreeMap<String, f64>,
    /// Accuracy per manipulation family (and `real`).
    pub family_accuracy: BTreeMap<String, f64>,
    /// Fragments excluded from the fusion.
    pub removed: Vec<Fragment>,
    pub meta: RunMeta,
}

/// Threshold infinity is written as the string "inf" so reports stay valid
/// JSON.
mod roc_points {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::RocPoint;

    #[derive(Serialize, Deserialize)]
    struct Raw {
        fpr: f64,
        tpr: f64,
        threshold: serde_json::Value,
    }

    pub fn serialize<S: Serializer>(pts: &[RocPoint], s: S) -> Result<S::Ok, S::Error> {
        pts.iter()
            .map(|p| Raw {
                fpr: p.fpr,
                tpr: p.tpr,
                threshold: if p.threshold.is_finite() {
                    serde_json::json!(p.threshold)
                } else {
                    serde_json::json!("inf")
                },
            })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<RocPoint>, D::Error> {
        let raw = Vec::<Raw>::deserialize(d)?;
        raw.into_iter()
            .map(|r| {
                let threshold = match &r.threshold {
                    serde_json::Value::String(s) if s == "inf" => f64::INFINITY,
                    v => v
                        .as_f64()
                        .ok_or_else(|| serde::de::Error::custom("threshold must be a number or \"inf\""))?,
                };
                Ok(RocPoint {
                    fpr: r.fpr,
                    tpr: r.tpr,
                    threshold,
                })
            })
            .collect()
    }
}

/// Per-sample branch outputs for one split, computed once and reusable for
/// every fragment-removal variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub dataset: String,
    pub split: Split,
    pub predictions: Vec<(PossibilityMatrix, WeightMatrix)>,
    pub labels: Vec<Label>,
    pub families: Vec<String>,
}

impl Scored {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Runs both branches over one split of `manifest`.
pub fn score_split(model: &DetectorModel, manifest: &Manifest, split: Split) -> Result<Scored> {
    let part = manifest.split(split);
    if part.is_empty() {
        return Err(Error::contract(format!(
            "split `{split}` of {} is empty",
            manifest.root.display()
        )));
    }
    let cache = FragmentCache::build(&part, &model.config.mfss)?;
    score_cache(model, &cache, &part, split)
}

/// As [`score_split`] for a prebuilt cache of `part`'s records.
pub fn score_cache(model: &DetectorModel, cache: &FragmentCache, part: &Manifest, split: Split) -> Result<Scored> {
    if cache.is_empty() {
        return Err(Error::contract(format!("split `{split}` is empty")));
    }
    Ok(Scored {
        dataset: part.root.display().to_string(),
        split,
        predictions: cache_predictions(model, cache)?,
        labels: part.records.iter().map(|r| r.label).collect(),
        families: part.records.iter().map(|r| r.family.clone()).collect(),
    })
}

/// Builds a report from scored samples, fusing only the fragments in `keep`.
pub fn report_from(scored: &Scored, keep: &[bool; NUM_FRAGMENTS], meta: RunMeta) -> Result<EvalReport> {
    if scored.is_empty() {
        return Err(Error::contract("cannot report on an empty split"));
    }
    let mut confusion = Confusion::default();
    let mut frag_correct = [0usize; NUM_FRAGMENTS];
    let mut fam: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut scores = Vec::with_capacity(scored.len());
    let mut counts = [0usize; 2];
    for (((p, w), &truth), family) in scored.predictions.iter().zip(&scored.labels).zip(&scored.families) {
        let fused = fuse_masked(p, w, keep);
        let pred = decide(fused);
        confusion.add(truth, pred);
        counts[truth.index()] += 1;
        scores.push(fake_score(fused));
        for (i, c) in frag_correct.iter_mut().enumerate() {
            if fragment_predict(p.cols[i]) == truth {
                *c += 1;
            }
        }
        let e = fam.entry(family.clone()).or_default();
        e.1 += 1;
        if pred == truth {
            e.0 += 1;
        }
    }
    let n = scored.len() as f64;
    let (roc, auc) = if counts[0] > 0 && counts[1] > 0 {
        let positive: Vec<bool> = scored.labels.iter().map(|&l| l == Label::Fake).collect();
        let (curve, a) = roc_auc(&scores, &positive)?;
        (curve, Some(a))
    } else {
        (Vec::new(), None)
    };
    Ok(EvalReport {
        dataset: scored.dataset.clone(),
        split: scored.split,
        counts,
        accuracy: confusion.correct() as f64 / n,
        confusion,
        auc,
        roc,
        fragment_accuracy: Fragment::ALL
            .iter()
            .map(|f| (f.key().to_string(), frag_correct[f.index()] as f64 / n))
            .collect(),
        family_accuracy: fam
            .into_iter()
            .map(|(k, (c, t))| (k, c as f64 / t as f64))
            .collect(),
        removed: Fragment::ALL
            .into_iter()
            .filter(|f| !keep[f.index()])
            .collect(),
        meta,
    })
}

pub fn model_meta(model: &DetectorModel) -> Result<RunMeta> {
    Ok(RunMeta {
        seed: model.meta.seed,
        config_hash: config_hash(&model.config)?,
    })
}

/// Evaluates the full model on one split of `manifest`.
pub fn evaluate(model: &DetectorModel, manifest: &Manifest, split: Split) -> Result<EvalReport> {
    let scored = score_split(model, manifest, split)?;
    report_from(&scored, &[true; NUM_FRAGMENTS], model_meta(model)?)
}

fn report_csv(r: &EvalReport) -> String {
    let mut s = String::from("dataset,split,fake,real,accuracy,auc,tp,fn,fp,tn");
    for f in Fragment::ALL {
        let _ = write!(s, ",acc_{}", f.key());
    }
    s.push('\n');
    let c = &r.confusion;
    let _ = write!(
        s,
        "{},{},{},{},{},{},{},{},{},{}",
        r.dataset,
        r.split,
        r.counts[0],
        r.counts[1],
        r.accuracy,
        r.auc.map(|a| a.to_string()).unwrap_or_default(),
        c.true_fake_pred_fake,
        c.true_fake_pred_real,
        c.true_real_pred_fake,
        c.true_real_pred_real
    );
    for f in Fragment::ALL {
        let _ = write!(s, ",{}", r.fragment_accuracy[f.key()]);
    }
    s.push('\n');
    s
}

fn roc_csv(r: &EvalReport) -> String {
    let mut s = String::from("fpr,tpr,threshold\n");
    for p in &r.roc {
        let _ = writeln!(s, "{},{},{}", p.fpr, p.tpr, p.threshold);
    }
    s
}

/// Writes `report.json`, `report.csv` and `roc_points.csv` into `dir`.
pub fn write_report(dir: &Path, r: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(REPORT_JSON), serde_json::to_string_pretty(r)?.as_bytes())?;
    write_atomic(&dir.join(REPORT_CSV), report_csv(r).as_bytes())?;
    write_atomic(&dir.join(ROC_CSV), roc_csv(r).as_bytes())
}

pub fn read_report(dir: &Path) -> Result<EvalReport> {
    let path = dir.join(REPORT_JSON);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scored(p0: &[f64], labels: &[Label]) -> Scored {
        Scored {
            dataset: "mem".into(),
            split: Split::Test,
            predictions: p0
                .iter()
                .map(|&v| {
                    (
                        PossibilityMatrix {
                            cols: [[v, 1.0 - v]; NUM_FRAGMENTS],
                        },
                        WeightMatrix::uniform(),
                    )
                })
                .collect(),
            labels: labels.to_vec(),
            families: labels
                .iter()
                .map(|l| if *l == Label::Real { "real".into() } else { "local-eyes".into() })
                .collect(),
        }
    }

    fn meta() -> RunMeta {
        RunMeta {
            seed: 0,
            config_hash: "x".into(),
        }
    }

    const ALL: [bool; NUM_FRAGMENTS] = [true; NUM_FRAGMENTS];

    #[test]
    fn always_fake_on_balanced_split() {
        let labels: Vec<Label> = (0..10).map(|i| if i % 2 == 0 { Label::Fake } else { Label::Real }).collect();
        let r = report_from(&scored(&[0.9; 10], &labels), &ALL, meta()).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.auc, Some(0.5));
        assert_eq!(r.confusion.true_real_pred_fake, 5);
        assert_eq!(r.counts, [5, 5]);
    }

    #[test]
    fn perfect_predictions() {
        let labels = [Label::Fake, Label::Real, Label::Fake, Label::Real];
        let r = report_from(&scored(&[0.9, 0.2, 0.7, 0.4], &labels), &ALL, meta()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.auc, Some(1.0));
        assert_eq!(r.fragment_accuracy["m"], 1.0);
        assert_eq!(r.family_accuracy["real"], 1.0);
        assert_eq!(r.confusion.total(), 4);
    }

    #[test]
    fn removal_is_recorded_and_counts_kept() {
        let labels = [Label::Fake, Label::Real];
        let mut keep = ALL;
        keep[Fragment::Nose.index()] = false;
        let r = report_from(&scored(&[0.9, 0.2], &labels), &keep, meta()).unwrap();
        assert_eq!(r.removed, vec![Fragment::Nose]);
        assert_eq!(r.counts, [1, 1]);
    }

    #[test]
    fn report_files_round_trip() {
        let labels = [Label::Fake, Label::Real, Label::Real];
        let r = report_from(&scored(&[0.9, 0.2, 0.6], &labels), &ALL, meta()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &r).unwrap();
        assert_eq!(read_report(dir.path()).unwrap(), r);
        let roc = fs::read_to_string(dir.path().join(ROC_CSV)).unwrap();
        assert_eq!(roc.lines().count(), r.roc.len() + 1);
        assert!(roc.contains("inf"));
        let csv = fs::read_to_string(dir.path().join(REPORT_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn empty_split_is_contract_error() {
        let s = scored(&[], &[]);
        assert!(matches!(report_from(&s, &ALL, meta()), Err(Error::Contract(_))));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash(&(1, "a")).unwrap();
        assert_eq!(a, config_hash(&(1, "a")).unwrap());
        assert_ne!(a, config_hash(&(2, "a")).unwrap());
        assert_eq!(a.len(), 16);
    }
}
