//! The two branches of the detector.
//!
//! Each fragment gets its own local attention module and backbone classifier
//! (the F-Branch); their softmax outputs form the 2×6 possibility matrix `P`.
//! Six semantic attention heads (the G-Branch) produce the 1×6 weight row `W`
//! and the fused score `P·Wᵀ`.

mod checkpoint;
mod train;

pub use checkpoint::{load_model, save_model, MODEL_MANIFEST};
pub use train::{
    attentive_cache, cache_predictions, train_fbranch, train_gbranch, FBranchReport, FragmentCache,
    FragmentMetrics, GBranchReport, TrainConfig,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Lam, Sam, DEFAULT_SAM_MLP};
use crate::autograd::{Tape, Var};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::mfss::{extract_fragments, segment, Fragment, FragmentSet, LandmarkSet, MfssConfig};
use crate::nn::{self, BatchNormLayer, Bound, ConvLayer, Linear, Mode, ParamStore, LOG_FLOOR};
use crate::seed;
use crate::tensor::Tensor;

pub const NUM_FRAGMENTS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Output channels of each conv stage; every stage ends in a 2×2 max-pool.
    pub stages: Vec<usize>,
    /// Width of the hidden classifier layer.
    pub hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stages: vec![16, 32, 64],
            hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub mfss: MfssConfig,
    pub backbone: BackboneConfig,
    pub sam_mlp: Vec<usize>,
    /// Gate fragments with a local attention module before the backbone.
    pub use_lam: bool,
    /// Learn fragment weights; otherwise every weight is 1/6.
    pub use_sam: bool,
    /// Divide the fused score by `Σ wᵢ` inside the step-two loss.
    pub normalized_sam_loss: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mfss: MfssConfig::default(),
            backbone: BackboneConfig::default(),
            sam_mlp: DEFAULT_SAM_MLP.to_vec(),
            use_lam: true,
            use_sam: true,
            normalized_sam_loss: true,
        }
    }
}

impl ModelConfig {
    pub fn fragment_size(&self) -> usize {
        self.mfss.fragment_size
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.fragment_size();
        if self.use_sam && s < crate::attention::SAM_POOL {
            return Err(Error::contract(format!(
                "fragment size {s} is below the semantic pooling size {}",
                crate::attention::SAM_POOL
            )));
        }
        if self.backbone.stages.is_empty() || self.backbone.hidden == 0 {
            return Err(Error::contract("backbone needs at least one stage and a hidden width"));
        }
        if s >> self.backbone.stages.len() == 0 {
            return Err(Error::contract(format!(
                "fragment size {s} too small for {} pooling stages",
                self.backbone.stages.len()
            )));
        }
        Ok(())
    }
}

/// Conv stages followed by a two-layer head emitting two logits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Backbone {
    pub stages: Vec<(ConvLayer, BatchNormLayer)>,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BackboneConfig, size: usize, rng: &mut impl Rng) -> Self {
        let mut cin = 3;
        let mut side = size;
        let mut stages = Vec::new();
        for (i, &cout) in cfg.stages.iter().enumerate() {
            let conv = ConvLayer::new_unbiased(store, &format!("{name}.stage{i}.conv"), cin, cout, rng);
            let bn = BatchNormLayer::new(store, &format!("{name}.stage{i}.bn"), cout);
            stages.push((conv, bn));
            cin = cout;
            side /= 2;
        }
        let flat = side * side * cin;
        Backbone {
            stages,
            fc1: Linear::new(store, &format!("{name}.fc1"), flat, cfg.hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), cfg.hidden, 2, rng),
        }
    }

    /// `x` is `N×S×S×3`; returns logits `N×2`.
    pub fn forward(&self, tape: &mut Tape, p: &mut Bound, mut x: Var, mode: Mode) -> Result<Var> {
        for (conv, bn) in &self.stages {
            x = conv.forward(tape, p, x)?;
            x = bn.forward(tape, p, x, mode)?;
            x = tape.relu(x)?;
            x = tape.max_pool2(x)?;
        }
        let (n, h, w, c) = tape.value(x).nhwc()?;
        let x = tape.reshape(x, &[n, h * w * c])?;
        let x = self.fc1.forward(tape, p, x)?;
        let x = tape.relu(x)?;
        self.fc2.forward(tape, p, x)
    }

    pub fn zero_head(&self, store: &mut ParamStore) {
        self.fc2.zero(store);
    }
}

/// One F-Branch column: optional local attention, then the backbone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FragmentNet {
    pub lam: Option<Lam>,
    pub backbone: Backbone,
}

#[derive(Debug, Clone, Copy)]
pub struct FragmentOutput {
    /// Input to the semantic head: the gated fragment, or the raw fragment
    /// when local attention is disabled.
    pub x_att: Var,
    pub probs: Var,
}

impl FragmentNet {
    pub fn forward(&self, tape: &mut Tape, p: &mut Bound, x: Var, mode: Mode) -> Result<FragmentOutput> {
        let x_att = match &self.lam {
            Some(lam) => lam.forward(tape, p, x, mode)?.x_att,
            None => x,
        };
        let logits = self.backbone.forward(tape, p, x_att, mode)?;
        let probs = tape.softmax_last(logits)?;
        Ok(FragmentOutput { x_att, probs })
    }

    /// Gated fragment only, without running the backbone.
    pub fn attend(&self, tape: &mut Tape, p: &mut Bound, x: Var, mode: Mode) -> Result<Var> {
        match &self.lam {
            Some(lam) => Ok(lam.forward(tape, p, x, mode)?.x_att),
            None => Ok(x),
        }
    }
}

/// Columns `[p⁰, p¹]` for fragments in [`Fragment::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PossibilityMatrix {
    pub cols: [[f64; 2]; NUM_FRAGMENTS],
}

impl PossibilityMatrix {
    pub fn column(&self, f: Fragment) -> [f64; 2] {
        self.cols[f.index()]
    }

    /// Row `y` as a length-6 array.
    pub fn row(&self, y: usize) -> [f64; NUM_FRAGMENTS] {
        std::array::from_fn(|i| self.cols[i][y])
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[2, NUM_FRAGMENTS], |k| self.cols[k % NUM_FRAGMENTS][k / NUM_FRAGMENTS])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    pub w: [f64; NUM_FRAGMENTS],
}

impl WeightMatrix {
    pub fn uniform() -> Self {
        WeightMatrix {
            w: [1.0 / NUM_FRAGMENTS as f64; NUM_FRAGMENTS],
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        WeightMatrix {
            w: self.w.map(|v| v * c),
        }
    }
}

/// Fused scores `P·Wᵀ`, summed over fragments in column order.
pub fn fuse(p: &PossibilityMatrix, w: &WeightMatrix) -> [f64; 2] {
    fuse_masked(p, w, &[true; NUM_FRAGMENTS])
}

/// [`fuse`] restricted to the fragments with `keep` set.
pub fn fuse_masked(p: &PossibilityMatrix, w: &WeightMatrix, keep: &[bool; NUM_FRAGMENTS]) -> [f64; 2] {
    let mut s = [0.0; 2];
    for (y, sy) in s.iter_mut().enumerate() {
        for i in 0..NUM_FRAGMENTS {
            if keep[i] {
                *sy += p.cols[i][y] * w.w[i];
            }
        }
    }
    s
}

/// Argmax over `[fake, real]`; an exact tie is called fake.
pub fn decide(scores: [f64; 2]) -> Label {
    if scores[1] > scores[0] {
        Label::Real
    } else {
        Label::Fake
    }
}

/// Per-fragment decision from a possibility vector.
pub fn fragment_predict(p: [f64; 2]) -> Label {
    decide(p)
}

/// Normalized fake mass of the fused scores; the ROC statistic.
pub fn fake_score(scores: [f64; 2]) -> f64 {
    let total = scores[0] + scores[1];
    if total > 0.0 {
        scores[0] / total
    } else {
        0.5
    }
}

pub fn loss_lam(p: [f64; 2], y: usize) -> Result<f64> {
    nn::cross_entropy(&p, y)
}

/// `−log(Σ pᵢʸ wᵢ / Σ wᵢ)`, or `−log(Σ pᵢʸ wᵢ)` when not normalized.
pub fn loss_sam(p: &PossibilityMatrix, w: &WeightMatrix, y: usize, normalized: bool) -> Result<f64> {
    if y > 1 {
        return Err(Error::contract(format!("label {y} outside {{0, 1}}")));
    }
    let num: f64 = (0..NUM_FRAGMENTS).map(|i| p.cols[i][y] * w.w[i]).sum();
    let arg = if normalized {
        let den: f64 = w.w.iter().sum();
        if den <= 0.0 {
            return Err(Error::contract("fragment weights sum to zero"));
        }
        num / den
    } else {
        num
    };
    Ok(-arg.max(LOG_FLOOR).ln())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub fbranch: Option<FBranchReport>,
    pub gbranch: Option<GBranchReport>,
}

/// Six fragment networks and six semantic heads, each with its own store.
#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub config: ModelConfig,
    pub fnets: Vec<FragmentNet>,
    pub fstores: Vec<ParamStore>,
    /// Empty when the configuration disables semantic attention.
    pub sams: Vec<Sam>,
    pub sstores: Vec<ParamStore>,
    pub meta: TrainingMeta,
}

impl DetectorModel {
    /// Freshly initialized model. Parameters depend only on `config` and `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let s = config.fragment_size();
        let mut fnets = Vec::new();
        let mut fstores = Vec::new();
        let mut sams = Vec::new();
        let mut sstores = Vec::new();
        for f in Fragment::ALL {
            let mut rng = seed::rng(seed, &[0, f.index() as u64]);
            let mut store = ParamStore::new();
            let lam = config
                .use_lam
                .then(|| Lam::new(&mut store, &format!("{}.lam", f.key()), &mut rng));
            let backbone = Backbone::new(&mut store, &format!("{}.backbone", f.key()), &config.backbone, s, &mut rng);
            fnets.push(FragmentNet { lam, backbone });
            fstores.push(store);
            if config.use_sam {
                let mut rng = seed::rng(seed, &[1, f.index() as u64]);
                let mut store = ParamStore::new();
                sams.push(Sam::new(&mut store, &format!("{}.sam", f.key()), &config.sam_mlp, &mut rng)?);
                sstores.push(store);
            }
        }
        Ok(DetectorModel {
            config,
            fnets,
            fstores,
            sams,
            sstores,
            meta: TrainingMeta {
                seed,
                ..TrainingMeta::default()
            },
        })
    }

    pub fn fragment_size(&self) -> usize {
        self.config.fragment_size()
    }

    /// Concatenated bytes of every F-Branch store.
    pub fn fbranch_bytes(&self) -> Vec<u8> {
        self.fstores.iter().flat_map(ParamStore::to_bytes).collect()
    }

    pub fn gbranch_bytes(&self) -> Vec<u8> {
        self.sstores.iter().flat_map(ParamStore::to_bytes).collect()
    }

    /// Zeroes every backbone's output layer so all possibilities are 0.5.
    pub fn zero_fbranch_heads(&mut self) {
        for (net, store) in self.fnets.iter().zip(&mut self.fstores) {
            net.backbone.zero_head(store);
        }
    }

    /// Zeroes every semantic head's output layer so all weights are 0.5.
    pub fn zero_gbranch_heads(&mut self) {
        for (sam, store) in self.sams.iter().zip(&mut self.sstores) {
            sam.mlp.last().zero(store);
        }
    }
}

/// Eval-mode F-Branch on one fragment set: returns `P` and the six
/// attentive fragments.
pub fn fbranch_forward(model: &DetectorModel, frags: &FragmentSet) -> Result<(PossibilityMatrix, Vec<Tensor>)> {
    let s = model.fragment_size();
    let mut cols = [[0.0; 2]; NUM_FRAGMENTS];
    let mut atts = Vec::with_capacity(NUM_FRAGMENTS);
    for f in Fragment::ALL {
        let crop = &frags.crops[f.index()];
        if crop.shape() != [s, s, 3] {
            return Err(Error::contract(format!(
                "fragment `{}` has shape {:?}, expected [{s}, {s}, 3]",
                f.key(),
                crop.shape()
            )));
        }
        let mut tape = Tape::new();
        let mut p = model.fstores[f.index()].bind(&mut tape, false);
        let x = tape.constant(crop.clone());
        let out = model.fnets[f.index()].forward(&mut tape, &mut p, x, Mode::Eval)?;
        let probs = tape.value(out.probs).data();
        cols[f.index()] = [probs[0], probs[1]];
        atts.push(tape.value(out.x_att).clone());
    }
    Ok((PossibilityMatrix { cols }, atts))
}

/// Eval-mode G-Branch: weights, fused scores and decision.
pub fn gbranch_forward(
    model: &DetectorModel,
    p: &PossibilityMatrix,
    attentive: &[Tensor],
) -> Result<(WeightMatrix, [f64; 2], Label)> {
    if attentive.len() != NUM_FRAGMENTS {
        return Err(Error::contract(format!(
            "expected {NUM_FRAGMENTS} attentive fragments in order [p, b, f, e, m, n], got {}",
            attentive.len()
        )));
    }
    let w = if model.config.use_sam {
        let mut w = [0.0; NUM_FRAGMENTS];
        for (i, x) in attentive.iter().enumerate() {
            w[i] = model.sams[i].infer(&model.sstores[i], x)?;
        }
        WeightMatrix { w }
    } else {
        WeightMatrix::uniform()
    };
    let scores = fuse(p, &w);
    Ok((w, scores, decide(scores)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub scores: [f64; 2],
    pub p: PossibilityMatrix,
    pub w: WeightMatrix,
    pub fragment_labels: [Label; NUM_FRAGMENTS],
}

impl Prediction {
    pub fn fake_score(&self) -> f64 {
        fake_score(self.scores)
    }
}

pub fn predict_fragments(model: &DetectorModel, frags: &FragmentSet) -> Result<Prediction> {
    let (p, atts) = fbranch_forward(model, frags)?;
    let (w, scores, label) = gbranch_forward(model, &p, &atts)?;
    Ok(Prediction {
        label,
        scores,
        p,
        w,
        fragment_labels: p.cols.map(fragment_predict),
    })
}

/// Full pipeline: segmentation, fragment extraction and both branches.
pub fn predict(model: &DetectorModel, img: &Tensor, lm: &LandmarkSet) -> Result<Prediction> {
    let frags = fragments_for(&model.config.mfss, img, lm, "")?;
    predict_fragments(model, &frags)
}

pub fn fragments_for(cfg: &MfssConfig, img: &Tensor, lm: &LandmarkSet, id: &str) -> Result<FragmentSet> {
    let seg = segment(img, lm, cfg)?;
    extract_fragments(img, &seg.masks, cfg.fragment_size, id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example_p() -> PossibilityMatrix {
        let p0 = [0.8, 0.2, 0.6, 0.9, 0.7, 0.5];
        PossibilityMatrix {
            cols: p0.map(|v| [v, 1.0 - v]),
        }
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            mfss: MfssConfig {
                fragment_size: 32,
                ..MfssConfig::default()
            },
            backbone: BackboneConfig {
                stages: vec![4, 8],
                hidden: 8,
            },
            sam_mlp: vec![1024, 8, 1],
            ..ModelConfig::default()
        }
    }

    fn random_frags(seed: u64, s: usize) -> FragmentSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FragmentSet {
            crops: std::array::from_fn(|_| Tensor::from_fn(&[s, s, 3], |_| rng.random())),
            size: s,
            source_id: "x".into(),
        }
    }

    #[test]
    fn fusion_example() {
        let w = WeightMatrix {
            w: [0.5, 0.1, 0.2, 0.9, 0.4, 0.3],
        };
        let s = fuse(&example_p(), &w);
        assert!((s[0] - 1.78).abs() < 1e-12 && (s[1] - 0.62).abs() < 1e-12);
        assert_eq!(decide(s), Label::Fake);
        let l = loss_sam(&example_p(), &w, 0, true).unwrap();
        assert!((l + (1.78f64 / 2.4).ln()).abs() < 1e-12);
    }

    #[test]
    fn unanimous_uniform_vote() {
        let p = PossibilityMatrix {
            cols: [[1.0, 0.0]; 6],
        };
        let s = fuse(&p, &WeightMatrix::uniform());
        assert!((s[0] - 1.0).abs() < 1e-15);
        assert_eq!(s[1], 0.0);
        assert_eq!(decide(s), Label::Fake);
    }

    #[test]
    fn tie_rule() {
        assert_eq!(fragment_predict([0.9, 0.1]), Label::Fake);
        assert_eq!(fragment_predict([0.1, 0.9]), Label::Real);
        assert_eq!(fragment_predict([0.5, 0.5]), Label::Fake);
    }

    #[test]
    fn loss_values() {
        assert!((loss_lam([0.5, 0.5], 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((loss_lam([0.25, 0.75], 1).unwrap() + 0.75f64.ln()).abs() < 1e-15);
        assert!(loss_lam([0.0, 1.0], 1).unwrap().abs() < 1e-11);
        assert!(loss_lam([0.5, 0.5], 2).is_err());
        let ones = PossibilityMatrix { cols: [[0.0, 1.0]; 6] };
        let w = WeightMatrix { w: [0.3, 0.9, 0.1, 0.5, 0.5, 0.2] };
        assert!(loss_sam(&ones, &w, 1, true).unwrap().abs() < 1e-15);
        let half = PossibilityMatrix { cols: [[0.5, 0.5]; 6] };
        assert!((loss_sam(&half, &w, 0, true).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(loss_sam(&half, &WeightMatrix { w: [0.0; 6] }, 0, true).is_err());
        // literal form differs once weights do not sum to one
        let lit = loss_sam(&half, &w, 0, false).unwrap();
        assert!((lit + (0.5 * 2.5f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn uniform_loss_is_ce_of_mean() {
        let p = example_p();
        let mean0 = p.row(0).iter().sum::<f64>() / 6.0;
        let a = loss_sam(&p, &WeightMatrix::uniform(), 0, true).unwrap();
        assert!((a + mean0.ln()).abs() < 1e-12);
    }

    #[test]
    fn tensor_layout_of_p() {
        let t = example_p().to_tensor();
        assert_eq!(t.shape(), &[2, 6]);
        assert_eq!(t.data()[3], 0.9);
        assert!((t.data()[9] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_heads_give_half_everywhere() {
        let mut m = DetectorModel::new(small_config(), 3).unwrap();
        m.zero_fbranch_heads();
        m.zero_gbranch_heads();
        let pred = predict_fragments(&m, &random_frags(1, 32)).unwrap();
        assert!(pred.p.cols.iter().flatten().all(|&v| v == 0.5));
        assert!(pred.w.w.iter().all(|&v| v == 0.5));
        assert_eq!(pred.scores[0], pred.scores[1]);
        assert_eq!(pred.label, Label::Fake);
    }

    #[test]
    fn fbranch_columns_sum_to_one_and_repeat() {
        let m = DetectorModel::new(small_config(), 4).unwrap();
        let frags = random_frags(2, 32);
        let (p, atts) = fbranch_forward(&m, &frags).unwrap();
        for c in p.cols {
            assert!((c[0] + c[1] - 1.0).abs() < 1e-9 && c[0] >= 0.0 && c[1] >= 0.0);
        }
        assert_eq!(atts.len(), 6);
        let m2 = DetectorModel::new(small_config(), 4).unwrap();
        let (p2, _) = fbranch_forward(&m2, &frags).unwrap();
        for (a, b) in p.cols.iter().flatten().zip(p2.cols.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn wrong_fragment_shape_names_fragment() {
        let m = DetectorModel::new(small_config(), 5).unwrap();
        let mut frags = random_frags(3, 32);
        frags.crops[3] = Tensor::zeros(&[16, 16, 3]);
        let err = fbranch_forward(&m, &frags).unwrap_err();
        assert!(err.to_string().contains("`e`"));
    }

    #[test]
    fn gbranch_rejects_wrong_count() {
        let m = DetectorModel::new(small_config(), 6).unwrap();
        let err = gbranch_forward(&m, &example_p(), &[]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn prediction_is_self_consistent() {
        let m = DetectorModel::new(small_config(), 7).unwrap();
        for seed in 0..3 {
            let pred = predict_fragments(&m, &random_frags(seed, 32)).unwrap();
            assert_eq!(pred.label, decide(pred.scores));
            assert_eq!(pred.scores, fuse(&pred.p, &pred.w));
            assert!(pred.w.w.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn no_sam_means_uniform_weights() {
        let cfg = ModelConfig {
            use_sam: false,
            use_lam: false,
            ..small_config()
        };
        let m = DetectorModel::new(cfg, 8).unwrap();
        assert!(m.sams.is_empty());
        let pred = predict_fragments(&m, &random_frags(0, 32)).unwrap();
        assert_eq!(pred.w, WeightMatrix::uniform());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.mfss.fragment_size = 16;
        assert!(DetectorModel::new(cfg.clone(), 0).is_err());
        cfg.use_sam = false;
        assert!(DetectorModel::new(cfg.clone(), 0).is_ok());
        cfg.backbone.stages = vec![2; 5];
        assert!(DetectorModel::new(cfg, 0).is_err());
    }
}
