use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    decide, fuse, loss_sam, DetectorModel, PossibilityMatrix, WeightMatrix, NUM_FRAGMENTS,
};
use crate::autograd::Tape;
use crate::dataset::Manifest;
use crate::error::{Error, Result};
use crate::mfss::{Fragment, MfssConfig};
use crate::nn::{self, Mode, ParamStore, SgdMomentum, StepSchedule, LOG_FLOOR};
use crate::seed;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub decay_period: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            momentum: 0.9,
            decay_period: 5,
            decay_factor: 0.1,
            epochs: 15,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            lr0: self.lr0,
            gamma: self.decay_factor,
            period: self.decay_period,
            total_epochs: self.epochs,
        }
    }
}

/// Fragment crops and labels for a whole split, held in memory.
#[derive(Debug, Clone)]
pub struct FragmentCache {
    pub size: usize,
    /// `samples[k][i]` is fragment `i` of sample `k`, `S×S×3`.
    pub samples: Vec<[Tensor; NUM_FRAGMENTS]>,
    pub labels: Vec<usize>,
}

impl FragmentCache {
    /// Loads and segments every record; runs on the current rayon pool but
    /// the result order follows the manifest.
    pub fn build(manifest: &Manifest, cfg: &MfssConfig) -> Result<FragmentCache> {
        let samples = manifest
            .records
            .par_iter()
            .map(|r| {
                let (img, lm) = manifest.load_sample(r)?;
                Ok(super::fragments_for(cfg, &img, &lm, &r.id)?.crops)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FragmentCache {
            size: cfg.fragment_size,
            samples,
            labels: manifest.records.iter().map(|r| r.label.index()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks fragment `frag` of the listed samples into `B×S×S×3`.
    pub fn batch(&self, frag: usize, idx: &[usize]) -> Tensor {
        let s = self.size;
        let mut data = Vec::with_capacity(idx.len() * s * s * 3);
        for &k in idx {
            data.extend_from_slice(self.samples[k][frag].data());
        }
        Tensor::new(&[idx.len(), s, s, 3], data).expect("cache entries share one shape")
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&k| self.labels[k]).collect()
    }

    fn check_trainable(&self) -> Result<()> {
        let fakes = self.labels.iter().filter(|&&y| y == 0).count();
        let reals = self.labels.len() - fakes;
        if fakes == 0 || reals == 0 {
            return Err(Error::contract(format!(
                "training split needs both classes, found {fakes} fake and {reals} real"
            )));
        }
        Ok(())
    }
}

/// Shuffled mini-batches. A trailing batch of one sample is merged into its
/// predecessor so batch statistics are always defined.
fn batches(n: usize, size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(size.max(2)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

fn eval_chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(EVAL_BATCH).map(move |s| (s..(s + EVAL_BATCH).min(n)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentMetrics {
    pub fragment: Fragment,
    /// Epoch (0-based) whose parameters were kept; `None` when untrained.
    pub best_epoch: Option<usize>,
    pub val_accuracy: Option<f64>,
    pub val_loss: Option<f64>,
    pub train_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FBranchReport {
    pub trained: bool,
    pub epochs: usize,
    pub lr_trace: Vec<f64>,
    pub fragments: Vec<FragmentMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GBranchReport {
    pub trained: bool,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub val_accuracy: Option<f64>,
    pub val_loss: Option<f64>,
    pub train_loss: Vec<f64>,
    /// Mean validation weight per fragment for the kept parameters.
    pub mean_val_weights: Option<[f64; NUM_FRAGMENTS]>,
}

/// Higher accuracy wins; equal accuracy falls back to lower loss.
fn improves(acc: f64, loss: f64, best: Option<(f64, f64)>) -> bool {
    match best {
        None => true,
        Some((ba, bl)) => acc > ba || (acc == ba && loss < bl),
    }
}

/// Step one: each fragment network is optimized on its own fragment with
/// cross-entropy. Keeps, per fragment, the epoch with the best validation
/// accuracy. Fragments train in parallel on the current rayon pool; results do
/// not depend on the pool size.
pub fn train_fbranch(
    model: &mut DetectorModel,
    train: &FragmentCache,
    val: &FragmentCache,
    cfg: &TrainConfig,
) -> Result<FBranchReport> {
    if train.size != model.fragment_size() {
        return Err(Error::contract(format!(
            "cache fragment size {} does not match model size {}",
            train.size,
            model.fragment_size()
        )));
    }
    let schedule = cfg.schedule();
    if cfg.epochs == 0 {
        let report = FBranchReport {
            trained: false,
            epochs: 0,
            lr_trace: Vec::new(),
            fragments: Fragment::ALL
                .into_iter()
                .map(|fragment| FragmentMetrics {
                    fragment,
                    best_epoch: None,
                    val_accuracy: None,
                    val_loss: None,
                    train_loss: Vec::new(),
                })
                .collect(),
        };
        model.meta.fbranch = Some(report.clone());
        return Ok(report);
    }
    train.check_trainable()?;
    let nets = model.fnets.clone();
    let results: Vec<Result<(ParamStore, FragmentMetrics)>> = model
        .fstores
        .par_iter()
        .zip(nets.par_iter())
        .enumerate()
        .map(|(i, (store, net))| {
            let frag = Fragment::ALL[i];
            let mut store = store.clone();
            let mut rng = seed::rng(cfg.seed, &[10, i as u64]);
            let mut opt = SgdMomentum::new(cfg.lr0, cfg.momentum);
            let mut tape = Tape::new();
            let mut best: Option<(f64, f64, usize, ParamStore)> = None;
            let mut train_loss = Vec::new();
            for epoch in 0..cfg.epochs {
                opt.lr = schedule.lr_at_epoch(epoch as i64)?;
                let mut total = 0.0;
                for idx in batches(train.len(), cfg.batch_size, &mut rng) {
                    tape.reset();
                    let mut p = store.bind(&mut tape, true);
                    let x = tape.constant(train.batch(i, &idx));
                    let out = net.forward(&mut tape, &mut p, x, Mode::Train)?;
                    let loss = nn::cross_entropy_loss(&mut tape, out.probs, &train.labels_of(&idx))?;
                    total += tape.value(loss).data()[0] * idx.len() as f64;
                    tape.backward(loss)?;
                    opt.step(&mut store, &tape, &p)?;
                    store.apply_stat_updates(&mut p);
                }
                train_loss.push(total / train.len() as f64);
                if !val.is_empty() {
                    let (acc, loss) = eval_fragment(net, &store, val, i)?;
                    debug!(
                        "fragment {} epoch {epoch}: train loss {:.4}, val acc {acc:.4}, val loss {loss:.4}",
                        frag.key(),
                        train_loss[epoch]
                    );
                    if improves(acc, loss, best.as_ref().map(|b| (b.0, b.1))) {
                        best = Some((acc, loss, epoch, store.clone()));
                    }
                }
            }
            let metrics = match best {
                Some((acc, loss, epoch, kept)) => {
                    store = kept;
                    FragmentMetrics {
                        fragment: frag,
                        best_epoch: Some(epoch),
                        val_accuracy: Some(acc),
                        val_loss: Some(loss),
                        train_loss,
                    }
                }
                None => FragmentMetrics {
                    fragment: frag,
                    best_epoch: Some(cfg.epochs - 1),
                    val_accuracy: None,
                    val_loss: None,
                    train_loss,
                },
            };
            info!(
                "F-Branch {}: best epoch {:?}, val accuracy {:?}",
                frag.key(),
                metrics.best_epoch,
                metrics.val_accuracy
            );
            Ok((store, metrics))
        })
        .collect();
    let mut fragments = Vec::with_capacity(NUM_FRAGMENTS);
    for (i, r) in results.into_iter().enumerate() {
        let (store, metrics) = r?;
        model.fstores[i] = store;
        fragments.push(metrics);
    }
    let report = FBranchReport {
        trained: true,
        epochs: cfg.epochs,
        lr_trace: schedule.trace(),
        fragments,
    };
    model.meta.fbranch = Some(report.clone());
    Ok(report)
}

/// Validation accuracy and mean loss of one fragment network.
fn eval_fragment(net: &super::FragmentNet, store: &ParamStore, val: &FragmentCache, i: usize) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut loss = 0.0;
    let mut tape = Tape::new();
    for idx in eval_chunks(val.len()) {
        tape.reset();
        let mut p = store.bind(&mut tape, false);
        let x = tape.constant(val.batch(i, &idx));
        let out = net.forward(&mut tape, &mut p, x, Mode::Eval)?;
        let probs = tape.value(out.probs).data();
        for (k, &y) in val.labels_of(&idx).iter().enumerate() {
            let pv = [probs[2 * k], probs[2 * k + 1]];
            if decide(pv).index() == y {
                correct += 1;
            }
            loss += nn::cross_entropy(&pv, y)?;
        }
    }
    Ok((correct as f64 / val.len() as f64, loss / val.len() as f64))
}

/// Runs the frozen F-Branch in eval mode over a cache. Returns the
/// attentive fragments (as a new cache) and each sample's possibility matrix.
pub fn attentive_cache(model: &DetectorModel, cache: &FragmentCache) -> Result<(FragmentCache, Vec<PossibilityMatrix>)> {
    let n = cache.len();
    let s = cache.size;
    let per_fragment: Vec<Result<(Vec<Tensor>, Vec<[f64; 2]>)>> = (0..NUM_FRAGMENTS)
        .into_par_iter()
        .map(|i| {
            let mut atts = Vec::with_capacity(n);
            let mut probs = Vec::with_capacity(n);
            let mut tape = Tape::new();
            for idx in eval_chunks(n) {
                tape.reset();
                let mut p = model.fstores[i].bind(&mut tape, false);
                let x = tape.constant(cache.batch(i, &idx));
                let out = model.fnets[i].forward(&mut tape, &mut p, x, Mode::Eval)?;
                let xa = tape.value(out.x_att).data();
                let pr = tape.value(out.probs).data();
                let step = s * s * 3;
                for k in 0..idx.len() {
                    atts.push(Tensor::new(&[s, s, 3], xa[k * step..(k + 1) * step].to_vec())?);
                    probs.push([pr[2 * k], pr[2 * k + 1]]);
                }
            }
            Ok((atts, probs))
        })
        .collect();
    let mut atts_by_frag = Vec::with_capacity(NUM_FRAGMENTS);
    let mut probs_by_frag = Vec::with_capacity(NUM_FRAGMENTS);
    for r in per_fragment {
        let (a, p) = r?;
        atts_by_frag.push(a.into_iter());
        probs_by_frag.push(p);
    }
    let samples = (0..n)
        .map(|_| std::array::from_fn(|i| atts_by_frag[i].next().expect("one per sample")))
        .collect();
    let ps = (0..n)
        .map(|k| PossibilityMatrix {
            cols: std::array::from_fn(|i| probs_by_frag[i][k]),
        })
        .collect();
    Ok((
        FragmentCache {
            size: s,
            samples,
            labels: cache.labels.clone(),
        },
        ps,
    ))
}

/// Eval-mode `P` and `W` for every sample of a cache, in cache order.
pub fn cache_predictions(model: &DetectorModel, cache: &FragmentCache) -> Result<Vec<(PossibilityMatrix, WeightMatrix)>> {
    let (atts, ps) = attentive_cache(model, cache)?;
    let ws = cache_weights(model, &atts)?;
    Ok(ps.into_iter().zip(ws).collect())
}

/// Eval-mode weights for every sample of an attentive cache.
fn cache_weights(model: &DetectorModel, atts: &FragmentCache) -> Result<Vec<WeightMatrix>> {
    let n = atts.len();
    if !model.config.use_sam {
        return Ok(vec![WeightMatrix::uniform(); n]);
    }
    let mut out = vec![WeightMatrix { w: [0.0; NUM_FRAGMENTS] }; n];
    let mut tape = Tape::new();
    for i in 0..NUM_FRAGMENTS {
        let mut k0 = 0;
        for idx in eval_chunks(n) {
            tape.reset();
            let mut p = model.sstores[i].bind(&mut tape, false);
            let x = tape.constant(atts.batch(i, &idx));
            let w = model.sams[i].forward(&mut tape, &mut p, x, Mode::Eval)?;
            for (k, &v) in tape.value(w).data().iter().enumerate() {
                out[k0 + k].w[i] = v;
            }
            k0 += idx.len();
        }
    }
    Ok(out)
}

/// Step two: the F-Branch is frozen (eval mode, parameters untouched) and only
/// the six semantic heads learn, through the fused cross-entropy.
pub fn train_gbranch(
    model: &mut DetectorModel,
    train: &FragmentCache,
    val: &FragmentCache,
    cfg: &TrainConfig,
) -> Result<GBranchReport> {
    if model.meta.fbranch.is_none() {
        return Err(Error::contract(
            "G-Branch training needs a trained F-Branch; run step one first",
        ));
    }
    if !model.config.use_sam || cfg.epochs == 0 {
        let report = GBranchReport {
            trained: false,
            epochs: 0,
            best_epoch: None,
            val_accuracy: None,
            val_loss: None,
            train_loss: Vec::new(),
            mean_val_weights: None,
        };
        model.meta.gbranch = Some(report.clone());
        return Ok(report);
    }
    train.check_trainable()?;
    let schedule = cfg.schedule();
    let normalized = model.config.normalized_sam_loss;
    let (train_att, train_p) = attentive_cache(model, train)?;
    let (val_att, val_p) = attentive_cache(model, val)?;
    let mut rng = seed::rng(cfg.seed, &[20]);
    let mut opts: Vec<SgdMomentum> = (0..NUM_FRAGMENTS)
        .map(|_| SgdMomentum::new(cfg.lr0, cfg.momentum))
        .collect();
    let mut tape = Tape::new();
    let mut best: Option<(f64, f64, usize, Vec<ParamStore>, [f64; NUM_FRAGMENTS])> = None;
    let mut train_loss = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at_epoch(epoch as i64)?;
        opts.iter_mut().for_each(|o| o.lr = lr);
        let mut total = 0.0;
        for idx in batches(train.len(), cfg.batch_size, &mut rng) {
            tape.reset();
            let labels = train.labels_of(&idx);
            let mut bounds = Vec::with_capacity(NUM_FRAGMENTS);
            let mut ws = Vec::with_capacity(NUM_FRAGMENTS);
            for i in 0..NUM_FRAGMENTS {
                let mut p = model.sstores[i].bind(&mut tape, true);
                let x = tape.constant(train_att.batch(i, &idx));
                ws.push(model.sams[i].forward(&mut tape, &mut p, x, Mode::Train)?);
                bounds.push(p);
            }
            let w = tape.concat_last(&ws)?;
            let py: Vec<f64> = idx
                .iter()
                .zip(&labels)
                .flat_map(|(&k, &y)| train_p[k].row(y))
                .collect();
            let py = tape.constant(Tensor::new(&[idx.len(), NUM_FRAGMENTS], py)?);
            let wp = tape.mul(w, py)?;
            let num = tape.sum_last(wp)?;
            let arg = if normalized {
                let den = tape.sum_last(w)?;
                tape.div(num, den)?
            } else {
                num
            };
            let logs = tape.log_clamped(arg, LOG_FLOOR)?;
            let mean = tape.mean(logs)?;
            let loss = tape.scale(mean, -1.0)?;
            total += tape.value(loss).data()[0] * idx.len() as f64;
            tape.backward(loss)?;
            for (i, p) in bounds.iter_mut().enumerate() {
                opts[i].step(&mut model.sstores[i], &tape, p)?;
                model.sstores[i].apply_stat_updates(p);
            }
        }
        train_loss.push(total / train.len() as f64);
        if !val.is_empty() {
            let weights = cache_weights(model, &val_att)?;
            let (acc, loss) = fused_metrics(&val_p, &weights, &val.labels, normalized)?;
            debug!("G-Branch epoch {epoch}: train loss {:.4}, val acc {acc:.4}, val loss {loss:.4}", train_loss[epoch]);
            if improves(acc, loss, best.as_ref().map(|b| (b.0, b.1))) {
                best = Some((acc, loss, epoch, model.sstores.clone(), mean_weights(&weights)));
            }
        }
    }
    let report = match best {
        Some((acc, loss, epoch, stores, mw)) => {
            model.sstores = stores;
            GBranchReport {
                trained: true,
                epochs: cfg.epochs,
                best_epoch: Some(epoch),
                val_accuracy: Some(acc),
                val_loss: Some(loss),
                train_loss,
                mean_val_weights: Some(mw),
            }
        }
        None => GBranchReport {
            trained: true,
            epochs: cfg.epochs,
            best_epoch: Some(cfg.epochs - 1),
            val_accuracy: None,
            val_loss: None,
            train_loss,
            mean_val_weights: None,
        },
    };
    info!("G-Branch: best epoch {:?}, val accuracy {:?}", report.best_epoch, report.val_accuracy);
    model.meta.gbranch = Some(report.clone());
    Ok(report)
}

fn mean_weights(ws: &[WeightMatrix]) -> [f64; NUM_FRAGMENTS] {
    let mut m = [0.0; NUM_FRAGMENTS];
    for w in ws {
        for (a, b) in m.iter_mut().zip(w.w) {
            *a += b;
        }
    }
    m.map(|v| v / ws.len().max(1) as f64)
}

fn fused_metrics(ps: &[PossibilityMatrix], ws: &[WeightMatrix], labels: &[usize], normalized: bool) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut loss = 0.0;
    for ((p, w), &y) in ps.iter().zip(ws).zip(labels) {
        if decide(fuse(p, w)).index() == y {
            correct += 1;
        }
        loss += loss_sam(p, w, y, normalized)?;
    }
    let n = labels.len().max(1) as f64;
    Ok((correct as f64 / n, loss / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branches::{BackboneConfig, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(s: usize) -> ModelConfig {
        ModelConfig {
            mfss: MfssConfig {
                fragment_size: s,
                ..MfssConfig::default()
            },
            backbone: BackboneConfig {
                stages: vec![4],
                hidden: 8,
            },
            sam_mlp: vec![1024, 8, 1],
            ..ModelConfig::default()
        }
    }

    /// Bright fragments are fake, dark ones real, with pixel noise.
    fn separable(n: usize, s: usize, seed: u64) -> FragmentCache {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for k in 0..n {
            let y = k % 2;
            let base = if y == 0 { 0.7 } else { 0.3 };
            samples.push(std::array::from_fn(|_| {
                Tensor::from_fn(&[s, s, 3], |_| base + rng.random_range(-0.15..0.15))
            }));
            labels.push(y);
        }
        FragmentCache { size: s, samples, labels }
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            lr0: 0.01,
            epochs: 3,
            batch_size: 8,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn batches_cover_everything_without_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in [2, 9, 33, 64, 65] {
            let b = batches(n, 32, &mut rng);
            let mut all: Vec<usize> = b.iter().flatten().copied().collect();
            all.sort();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert!(b.iter().all(|x| x.len() >= 2));
        }
    }

    #[test]
    fn separable_fragments_are_learned() {
        let s = 8;
        let mut cfg = config(s);
        cfg.use_sam = false;
        let mut m = DetectorModel::new(cfg, 1).unwrap();
        let train = separable(96, s, 1);
        let val = separable(32, s, 2);
        let cfg = TrainConfig {
            epochs: 5,
            lr0: 0.02,
            ..quick()
        };
        let report = train_fbranch(&mut m, &train, &val, &cfg).unwrap();
        for f in &report.fragments {
            assert!(f.val_accuracy.unwrap() >= 0.99, "{f:?}");
        }
    }

    #[test]
    fn zero_epochs_leave_model_untouched() {
        let mut m = DetectorModel::new(config(32), 2).unwrap();
        let before = m.fbranch_bytes();
        let cache = separable(4, 32, 0);
        let r = train_fbranch(&mut m, &cache, &cache, &TrainConfig { epochs: 0, ..quick() }).unwrap();
        assert!(!r.trained);
        assert_eq!(m.fbranch_bytes(), before);
        let g = train_gbranch(&mut m, &cache, &cache, &TrainConfig { epochs: 0, ..quick() }).unwrap();
        assert!(!g.trained);
    }

    #[test]
    fn single_class_split_is_refused() {
        let mut cfg = config(8);
        cfg.use_sam = false;
        let mut m = DetectorModel::new(cfg, 3).unwrap();
        let mut cache = separable(6, 8, 0);
        cache.labels.iter_mut().for_each(|y| *y = 1);
        let err = train_fbranch(&mut m, &cache, &cache, &quick()).unwrap_err();
        assert!(err.to_string().contains("both classes"), "{err}");
    }

    #[test]
    fn gbranch_needs_fbranch() {
        let mut m = DetectorModel::new(config(32), 4).unwrap();
        let cache = separable(4, 32, 0);
        assert!(matches!(
            train_gbranch(&mut m, &cache, &cache, &quick()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn two_step_training_is_reproducible_and_freezes_fbranch() {
        let run = || {
            let mut m = DetectorModel::new(config(32), 6).unwrap();
            let train = separable(12, 32, 3);
            let val = separable(6, 32, 4);
            train_fbranch(&mut m, &train, &val, &quick()).unwrap();
            let frozen = m.fbranch_bytes();
            train_gbranch(&mut m, &train, &val, &quick()).unwrap();
            assert_eq!(m.fbranch_bytes(), frozen);
            (frozen, m.gbranch_bytes())
        };
        let (a, b) = run();
        let (c, d) = run();
        assert_eq!(a, c);
        assert_eq!(b, d);
    }

    #[test]
    fn pool_size_does_not_change_results() {
        let train = separable(10, 8, 7);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut cfg = config(8);
                cfg.use_sam = false;
                let mut m = DetectorModel::new(cfg, 9).unwrap();
                train_fbranch(&mut m, &train, &train, &quick()).unwrap();
                m.fbranch_bytes()
            })
        };
        assert_eq!(run(1), run(3));
    }
}
