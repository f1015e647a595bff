//! Multi-seed experiment protocols built on one shared training sweep.
//!
//! For every held-out family and seed the sweep trains one F-Branch per LAM
//! setting and one G-Branch per variant that uses semantic attention. Variants
//! that differ only in the G-Branch reuse the F-Branch bytes: its training
//! depends on the seed and LAM setting alone, so retraining would reproduce it
//! exactly.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::{config_hash, report_from, score_cache, write_report, EvalReport, RunMeta, Scored};
use crate::branches::{train_fbranch, train_gbranch, DetectorModel, FragmentCache, ModelConfig, TrainConfig, NUM_FRAGMENTS};
use crate::dataset::{Manifest, Split};
use crate::error::{Error, Result};
use crate::mfss::Fragment;
use crate::nn::checkpoint::write_atomic;
use crate::synthetic::{generate_dataset, DatasetSpec, FamilyKind, MANIFEST_FILE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttentionVariant {
    #[serde(rename = "no-attention")]
    NoAttention,
    #[serde(rename = "sam-only")]
    SamOnly,
    #[serde(rename = "lams-only")]
    LamsOnly,
    #[serde(rename = "lams+sam")]
    LamsSam,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 4] = [
        AttentionVariant::NoAttention,
        AttentionVariant::SamOnly,
        AttentionVariant::LamsOnly,
        AttentionVariant::LamsSam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::NoAttention => "no-attention",
            AttentionVariant::SamOnly => "sam-only",
            AttentionVariant::LamsOnly => "lams-only",
            AttentionVariant::LamsSam => "lams+sam",
        }
    }

    pub fn use_lam(self) -> bool {
        matches!(self, AttentionVariant::LamsOnly | AttentionVariant::LamsSam)
    }

    pub fn use_sam(self) -> bool {
        matches!(self, AttentionVariant::SamOnly | AttentionVariant::LamsSam)
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            use_lam: self.use_lam(),
            use_sam: self.use_sam(),
            ..base.clone()
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown attention variant `{s}`")))
    }
}

/// Trains both steps from scratch. The training seed and the model seed are
/// both `seed`.
pub fn train_model(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &FragmentCache,
    val: &FragmentCache,
    seed: u64,
) -> Result<DetectorModel> {
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let mut model = DetectorModel::new(model_cfg.clone(), seed)?;
    train_fbranch(&mut model, train, val, &cfg)?;
    train_gbranch(&mut model, train, val, &cfg)?;
    Ok(model)
}

/// One trained variant scored on the seen and unseen test splits.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub variant: AttentionVariant,
    pub family: FamilyKind,
    pub seed: u64,
    pub seen: Scored,
    pub unseen: Scored,
    pub meta: RunMeta,
}

/// Generates (or reuses) the leave-one-out dataset for `family` under `work`.
fn leave_out_dataset(base: &DatasetSpec, family: FamilyKind, work: &Path) -> Result<Manifest> {
    let spec = DatasetSpec {
        leave_out: Some(family),
        ..base.clone()
    };
    let dir = work.join("data").join(format!("leave-{family}"));
    let spec_path = dir.join("spec.json");
    let spec_json = serde_json::to_string_pretty(&spec)?;
    if fs::read_to_string(&spec_path).ok().as_deref() == Some(spec_json.as_str()) {
        if let Ok(m) = Manifest::load(&dir.join(MANIFEST_FILE)) {
            if m.len() == spec.total() {
                return Ok(m);
            }
        }
    }
    let m = generate_dataset(&spec, &dir)?;
    write_atomic(&spec_path, spec_json.as_bytes())?;
    Ok(m)
}

struct SplitCaches {
    train: FragmentCache,
    val: FragmentCache,
    test: (FragmentCache, Manifest),
    unseen: (FragmentCache, Manifest),
}

fn build_caches(m: &Manifest, cfg: &ModelConfig) -> Result<SplitCaches> {
    let part = |s: Split| -> Result<(FragmentCache, Manifest)> {
        let p = m.split(s);
        Ok((FragmentCache::build(&p, &cfg.mfss)?, p))
    };
    Ok(SplitCaches {
        train: part(Split::Train)?.0,
        val: part(Split::Val)?.0,
        test: part(Split::Test)?,
        unseen: part(Split::UnseenTest)?,
    })
}

/// Trains every variant for every held-out family and seed, scoring each on
/// the seen test split and the unseen-test split.
pub fn sweep(
    cfg: &ExperimentConfig,
    variants: &[AttentionVariant],
    families: &[FamilyKind],
    work: &Path,
) -> Result<Vec<SweepRun>> {
    if variants.is_empty() || families.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::contract("sweep needs at least one variant, family and seed"));
    }
    for v in variants {
        v.apply(&cfg.model).validate()?;
    }
    let mut runs = Vec::new();
    for &family in families {
        let manifest = leave_out_dataset(&cfg.dataset, family, work)?;
        let caches = build_caches(&manifest, &cfg.model)?;
        for &seed in &cfg.seeds {
            let train_cfg = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            for use_lam in [false, true] {
                let group: Vec<AttentionVariant> = variants.iter().copied().filter(|v| v.use_lam() == use_lam).collect();
                if group.is_empty() {
                    continue;
                }
                info!("leave out {family}, seed {seed}: F-Branch with use_lam={use_lam}");
                let fcfg = ModelConfig {
                    use_lam,
                    use_sam: false,
                    ..cfg.model.clone()
                };
                let mut base = DetectorModel::new(fcfg, seed)?;
                train_fbranch(&mut base, &caches.train, &caches.val, &train_cfg)?;
                for variant in group {
                    let mut model = DetectorModel::new(variant.apply(&cfg.model), seed)?;
                    model.fstores = base.fstores.clone();
                    model.meta.fbranch = base.meta.fbranch.clone();
                    if variant.use_sam() {
                        info!("leave out {family}, seed {seed}: G-Branch for {variant}");
                    }
                    train_gbranch(&mut model, &caches.train, &caches.val, &train_cfg)?;
                    let meta = RunMeta {
                        seed,
                        config_hash: config_hash(&(&model.config, &train_cfg))?,
                    };
                    runs.push(SweepRun {
                        variant,
                        family,
                        seed,
                        seen: score_cache(&model, &caches.test.0, &caches.test.1, Split::Test)?,
                        unseen: score_cache(&model, &caches.unseen.0, &caches.unseen.1, Split::UnseenTest)?,
                        meta,
                    });
                }
            }
        }
    }
    Ok(runs)
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationRow {
    pub variant: AttentionVariant,
    pub family: FamilyKind,
    pub seed: u64,
    pub seen: EvalReport,
    pub unseen: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub rows: Vec<GeneralizationRow>,
}

impl GeneralizationReport {
    pub fn from_runs(runs: &[SweepRun]) -> Result<Self> {
        let all = [true; NUM_FRAGMENTS];
        let rows = runs
            .iter()
            .map(|r| {
                Ok(GeneralizationRow {
                    variant: r.variant,
                    family: r.family,
                    seed: r.seed,
                    seen: report_from(&r.seen, &all, r.meta.clone())?,
                    unseen: report_from(&r.unseen, &all, r.meta.clone())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(GeneralizationReport { rows })
    }

    fn select(&self, variant: AttentionVariant, family: FamilyKind) -> impl Iterator<Item = &GeneralizationRow> {
        self.rows
            .iter()
            .filter(move |r| r.variant == variant && r.family == family)
    }

    /// Seed-mean unseen-test accuracy.
    pub fn mean_unseen(&self, variant: AttentionVariant, family: FamilyKind) -> f64 {
        mean(self.select(variant, family).map(|r| r.unseen.accuracy))
    }

    pub fn mean_seen(&self, variant: AttentionVariant, family: FamilyKind) -> f64 {
        mean(self.select(variant, family).map(|r| r.seen.accuracy))
    }

    fn variants(&self) -> Vec<AttentionVariant> {
        let mut v: Vec<_> = self.rows.iter().map(|r| r.variant).collect();
        v.sort();
        v.dedup();
        v
    }

    fn families(&self) -> Vec<FamilyKind> {
        let mut v: Vec<_> = self.rows.iter().map(|r| r.family).collect();
        v.sort();
        v.dedup();
        v
    }

    /// One row per held-out family; seen and unseen seed-mean accuracy per
    /// variant.
    pub fn table_csv(&self) -> String {
        let variants = self.variants();
        let mut s = String::from("held_out");
        for v in &variants {
            let _ = write!(s, ",{v} seen,{v} unseen");
        }
        s.push('\n');
        for f in self.families() {
            s.push_str(f.name());
            for &v in &variants {
                let _ = write!(s, ",{:.4},{:.4}", self.mean_seen(v, f), self.mean_unseen(v, f));
            }
            s.push('\n');
        }
        s
    }

    /// Writes `generalization.json`, `generalization.csv` and one report
    /// directory per run.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("generalization.json"), serde_json::to_string_pretty(self)?.as_bytes())?;
        write_atomic(&dir.join("generalization.csv"), self.table_csv().as_bytes())?;
        for r in &self.rows {
            let run = run_dir(dir, r.variant, r.family, r.seed);
            write_report(&run.join("seen"), &r.seen)?;
            write_report(&run.join("unseen"), &r.unseen)?;
        }
        Ok(())
    }
}

fn run_dir(dir: &Path, variant: AttentionVariant, family: FamilyKind, seed: u64) -> PathBuf {
    dir.join("runs")
        .join(variant.name().replace('+', "-"))
        .join(format!("leave-{family}"))
        .join(format!("seed-{seed}"))
}

/// Fragment-removal and attention-module variants to evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationPlan {
    /// Evaluate the full method with each fragment excluded from the fusion.
    pub remove_fragments: bool,
    pub attention: Vec<AttentionVariant>,
    /// Held-out families the unseen accuracy is averaged over.
    pub families: Vec<FamilyKind>,
}

impl Default for AblationPlan {
    fn default() -> Self {
        AblationPlan {
            remove_fragments: true,
            attention: AttentionVariant::ALL.to_vec(),
            families: FamilyKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `fragment` or `attention`.
    pub group: String,
    /// Removed fragment key or `none`, or the attention variant name.
    pub variant: String,
    pub family: FamilyKind,
    pub seed: u64,
    pub seen: EvalReport,
    pub unseen: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

pub const FRAGMENT_GROUP: &str = "fragment";
pub const ATTENTION_GROUP: &str = "attention";

impl AblationReport {
    pub fn from_runs(runs: &[SweepRun], plan: &AblationPlan) -> Result<Self> {
        let mut rows = Vec::new();
        for r in runs.iter().filter(|r| plan.families.contains(&r.family)) {
            if plan.attention.contains(&r.variant) {
                let all = [true; NUM_FRAGMENTS];
                rows.push(AblationRow {
                    group: ATTENTION_GROUP.into(),
                    variant: r.variant.name().into(),
                    family: r.family,
                    seed: r.seed,
                    seen: report_from(&r.seen, &all, r.meta.clone())?,
                    unseen: report_from(&r.unseen, &all, r.meta.clone())?,
                });
            }
            if plan.remove_fragments && r.variant == AttentionVariant::LamsSam {
                for removed in std::iter::once(None).chain(Fragment::ALL.map(Some)) {
                    let mut keep = [true; NUM_FRAGMENTS];
                    if let Some(f) = removed {
                        keep[f.index()] = false;
                    }
                    rows.push(AblationRow {
                        group: FRAGMENT_GROUP.into(),
                        variant: removed.map_or("none", Fragment::key).into(),
                        family: r.family,
                        seed: r.seed,
                        seen: report_from(&r.seen, &keep, r.meta.clone())?,
                        unseen: report_from(&r.unseen, &keep, r.meta.clone())?,
                    });
                }
            }
        }
        if plan.remove_fragments && !rows.iter().any(|r| r.group == FRAGMENT_GROUP) {
            return Err(Error::contract(
                "fragment removal needs the lams+sam variant in the sweep",
            ));
        }
        Ok(AblationReport { rows })
    }

    pub fn select<'a>(&'a self, group: &'a str, variant: &'a str) -> impl Iterator<Item = &'a AblationRow> {
        self.rows
            .iter()
            .filter(move |r| r.group == group && r.variant == variant)
    }

    /// Unseen accuracy averaged over seeds and held-out families.
    pub fn mean_unseen(&self, group: &str, variant: &str) -> f64 {
        mean(self.select(group, variant).map(|r| r.unseen.accuracy))
    }

    pub fn mean_seen(&self, group: &str, variant: &str) -> f64 {
        mean(self.select(group, variant).map(|r| r.seen.accuracy))
    }

    fn variants(&self, group: &str) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        for r in self.rows.iter().filter(|r| r.group == group) {
            if !v.contains(&r.variant) {
                v.push(r.variant.clone());
            }
        }
        v
    }

    /// One row per variant: unseen accuracy per (held-out family, seed), then
    /// seen and unseen means.
    pub fn table_csv(&self, group: &str) -> String {
        let variants = self.variants(group);
        let mut cols: Vec<(FamilyKind, u64)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.group == group) {
            if !cols.contains(&(r.family, r.seed)) {
                cols.push((r.family, r.seed));
            }
        }
        let mut s = String::from(if group == FRAGMENT_GROUP { "removed" } else { "attention" });
        for (f, seed) in &cols {
            let _ = write!(s, ",unseen {f} seed {seed}");
        }
        s.push_str(",mean seen,mean unseen\n");
        for v in variants {
            s.push_str(&v);
            for (f, seed) in &cols {
                let acc = self
                    .select(group, &v)
                    .find(|r| r.family == *f && r.seed == *seed)
                    .map(|r| format!("{:.4}", r.unseen.accuracy))
                    .unwrap_or_default();
                let _ = write!(s, ",{acc}");
            }
            let _ = writeln!(s, ",{:.4},{:.4}", self.mean_seen(group, &v), self.mean_unseen(group, &v));
        }
        s
    }

    /// Writes `ablation.json`, `fragments.csv` and `attention.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("ablation.json"), serde_json::to_string_pretty(self)?.as_bytes())?;
        write_atomic(&dir.join("fragments.csv"), self.table_csv(FRAGMENT_GROUP).as_bytes())?;
        write_atomic(&dir.join("attention.csv"), self.table_csv(ATTENTION_GROUP).as_bytes())
    }
}

/// Leave-one-family-out over all four families for each variant.
pub fn run_generalization(
    cfg: &ExperimentConfig,
    variants: &[AttentionVariant],
    work: &Path,
) -> Result<GeneralizationReport> {
    let runs = sweep(cfg, variants, &FamilyKind::ALL, work)?;
    GeneralizationReport::from_runs(&runs)
}

pub fn run_ablation(cfg: &ExperimentConfig, plan: &AblationPlan, work: &Path) -> Result<AblationReport> {
    let mut variants = plan.attention.clone();
    if plan.remove_fragments && !variants.contains(&AttentionVariant::LamsSam) {
        variants.push(AttentionVariant::LamsSam);
    }
    let runs = sweep(cfg, &variants, &plan.families, work)?;
    AblationReport::from_runs(&runs, plan)
}

/// Per-family seed-mean unseen accuracies, keyed by variant name.
pub fn unseen_summary(report: &GeneralizationReport) -> BTreeMap<String, BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for v in report.variants() {
        let row: BTreeMap<String, f64> = report
            .families()
            .into_iter()
            .map(|f| (f.name().to_string(), report.mean_unseen(v, f)))
            .collect();
        out.insert(v.name().to_string(), row);
    }
    out
}
