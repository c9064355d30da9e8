//! Per-timestep MLP pixel classifiers over decoder features, and the bank that
//! holds one per trained timestep plus a multi-timestep classifier.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{shape_err, Error, Result};
use crate::optim::{Adam, AdamConfig, ParamSet};
use crate::par;
use crate::segmap::{Palette, SegMap};
use crate::tensor::Tensor;
use crate::unet::{DiffusionModel, FeatureMap};

/// Timesteps whose features feed the multi-step classifier.
pub const DEFAULT_MULTI_STEPS: [usize; 3] = [50, 150, 250];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden: [usize; 2],
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: [128, 32],
            lr: 1e-3,
            epochs: 4,
            batch: 64,
            seed: 0,
        }
    }
}

/// Three affine layers with ReLU between them, mapping `[P, in_dim]` feature
/// rows to `[P, K]` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelClassifier {
    pub in_dim: usize,
    pub hidden: [usize; 2],
    pub n_classes: usize,
    pub params: ParamSet,
}

const LAYERS: [&str; 3] = ["l1", "l2", "l3"];

impl PixelClassifier {
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        hidden: [usize; 2],
        n_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || n_classes == 0 || hidden.contains(&0) {
            return Err(Error::InvalidArgument(
                "classifier widths must be >= 1".into(),
            ));
        }
        let dims = [in_dim, hidden[0], hidden[1], n_classes];
        let mut params = ParamSet::new();
        for (l, name) in LAYERS.iter().enumerate() {
            let (din, dout) = (dims[l], dims[l + 1]);
            let bound = (6.0 / din as f64).sqrt();
            let w = Tensor::uniform([din, dout], -bound, bound, rng);
            params.insert(format!("{name}.w"), Arc::new(w));
            params.insert(format!("{name}.b"), Arc::new(Tensor::zeros([dout])));
        }
        Ok(PixelClassifier {
            in_dim,
            hidden,
            n_classes,
            params,
        })
    }

    /// Logits for feature rows already on the graph. Parameters are attached as
    /// leaves that require gradients only when `train` is set.
    pub fn forward(
        &self,
        g: &mut Graph,
        rows: Var,
        train: bool,
    ) -> Result<(Var, Vec<(String, Var)>)> {
        let s = g.shape(rows);
        if s.len() != 2 || s[1] != self.in_dim {
            return shape_err(
                "pixel classifier",
                format!("rows {:?}, expected [P, {}]", s, self.in_dim),
            );
        }
        let mut h = rows;
        let mut leaves = Vec::with_capacity(6);
        for (l, name) in LAYERS.iter().enumerate() {
            let wn = format!("{name}.w");
            let bn = format!("{name}.b");
            let w = g.leaf_shared(Arc::clone(&self.params[&wn]), train);
            let b = g.leaf_shared(Arc::clone(&self.params[&bn]), train);
            leaves.push((wn, w));
            leaves.push((bn, b));
            let z = g.matmul(h, w)?;
            h = g.add_bias(z, b)?;
            if l < 2 {
                h = g.act(h, Activation::Relu)?;
            }
        }
        Ok((h, leaves))
    }

    pub fn logits(&self, rows: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let r = g.constant(rows.clone());
        let (out, _) = self.forward(&mut g, r, false)?;
        Ok(g.value(out).clone())
    }

    /// Per-row argmax; ties go to the lowest class id.
    pub fn predict_labels(&self, rows: &Tensor) -> Result<Vec<u8>> {
        Ok(argmax_rows(&self.logits(rows)?, self.n_classes))
    }

    /// Folds an input standardisation `(x - mean) / std` into the first layer.
    fn fold_standardisation(&mut self, mean: &[f64], std: &[f64]) {
        let (d, h) = (self.in_dim, self.hidden[0]);
        let w = self.params["l1.w"].data().to_vec();
        let mut b = self.params["l1.b"].data().to_vec();
        let mut w2 = w.clone();
        for i in 0..d {
            for j in 0..h {
                w2[i * h + j] = w[i * h + j] / std[i];
                b[j] -= mean[i] * w2[i * h + j];
            }
        }
        self.params.insert(
            "l1.w".into(),
            Arc::new(Tensor::new([d, h], w2).expect("same shape")),
        );
        self.params.insert(
            "l1.b".into(),
            Arc::new(Tensor::new([h], b).expect("same shape")),
        );
    }

    fn meta(&self) -> ClassifierMeta {
        ClassifierMeta {
            in_dim: self.in_dim,
            hidden: self.hidden,
            n_classes: self.n_classes,
        }
    }

    fn from_parts(meta: &ClassifierMeta, params: BTreeMap<String, Tensor>) -> Result<Self> {
        let dims = [meta.in_dim, meta.hidden[0], meta.hidden[1], meta.n_classes];
        for (l, name) in LAYERS.iter().enumerate() {
            let w = params
                .get(&format!("{name}.w"))
                .ok_or_else(|| Error::Missing(format!("{name}.w")))?;
            if w.shape() != [dims[l], dims[l + 1]] {
                return Err(Error::Format(format!("{name}.w has shape {:?}", w.shape())));
            }
        }
        Ok(PixelClassifier {
            in_dim: meta.in_dim,
            hidden: meta.hidden,
            n_classes: meta.n_classes,
            params: params.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
        })
    }
}

pub fn argmax_rows(logits: &Tensor, k: usize) -> Vec<u8> {
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}

/// Map predicted for the first image of `features`.
pub fn predict_map(
    g: &PixelClassifier,
    features: &FeatureMap,
    palette: &Palette,
) -> Result<SegMap> {
    if features.dim() != g.in_dim {
        return shape_err(
            "predict_map",
            format!("feature dim {} vs classifier {}", features.dim(), g.in_dim),
        );
    }
    let labels = g.predict_labels(&features.pixel_rows(0))?;
    SegMap::new(features.height(), features.width(), labels, palette.clone())
}

/// Pixel features of a batch of images `[N, C, S, S]` noised to each of `ts`
/// with noise from `rng`, concatenated across `ts` in order.
pub fn noisy_features<R: Rng + ?Sized>(
    model: &DiffusionModel,
    x0: &Tensor,
    ts: &[usize],
    rng: &mut R,
) -> Result<FeatureMap> {
    if ts.is_empty() {
        return Err(Error::Empty("timestep list".into()));
    }
    let mut maps = Vec::with_capacity(ts.len());
    for &t in ts {
        let eps = Tensor::randn(x0.shape().to_vec(), rng);
        let xt = model.sched.q_sample(x0, t, &eps)?;
        maps.push(model.net.predict_with_features(&xt, t)?.1);
    }
    if maps.len() == 1 {
        return Ok(maps.pop().expect("one map"));
    }
    FeatureMap::concat(&maps)
}

/// Per-pixel training pairs: features of noised copies of each annotated image,
/// labelled with the clean image's annotation.
pub struct PixelDataset {
    pub rows: Tensor,
    pub labels: Vec<usize>,
}

pub fn pixel_dataset<R: Rng + ?Sized>(
    annotated: &[(Tensor, SegMap)],
    ts: &[usize],
    model: &DiffusionModel,
    rng: &mut R,
) -> Result<PixelDataset> {
    let (first, k) = match annotated.first() {
        Some((_, y)) => (y, y.num_classes()),
        None => return Err(Error::Empty("annotated set".into())),
    };
    let (h, w) = (first.height(), first.width());
    let mut labels = Vec::with_capacity(annotated.len() * h * w);
    let mut images = Vec::with_capacity(annotated.len());
    for (x, y) in annotated {
        if !y.same_dims(first) || y.num_classes() != k {
            return Err(Error::InvalidArgument(
                "annotations differ in size or classes".into(),
            ));
        }
        labels.extend(y.labels().iter().map(|&l| l as usize));
        images.push(x.clone());
    }
    let batch = Tensor::stack_batch(&images)?;
    let feats = noisy_features(model, &batch, ts, rng)?;
    let d = feats.dim();
    let mut rows = Vec::with_capacity(labels.len() * d);
    for n in 0..annotated.len() {
        rows.extend_from_slice(feats.pixel_rows(n).data());
    }
    Ok(PixelDataset {
        rows: Tensor::new([labels.len(), d], rows)?,
        labels,
    })
}

/// Fits a classifier on feature rows with cross-entropy, Adam, shuffled minibatches.
pub fn fit_classifier(
    data: &PixelDataset,
    n_classes: usize,
    cfg: &ClassifierConfig,
) -> Result<PixelClassifier> {
    let (p, d) = (data.rows.shape()[0], data.rows.shape()[1]);
    if p == 0 {
        return Err(Error::Empty("pixel dataset".into()));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::LabelRange {
            label: bad,
            classes: n_classes,
        });
    }
    let src = data.rows.data();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for r in src.chunks(d) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= p as f64);
    for r in src.chunks(d) {
        for i in 0..d {
            var[i] += (r[i] - mean[i]).powi(2);
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| (v / p as f64).sqrt().max(1e-6))
        .collect();
    let norm: Vec<f64> = src
        .chunks(d)
        .flat_map(|r| {
            (0..d)
                .map(|i| (r[i] - mean[i]) / std[i])
                .collect::<Vec<_>>()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clf = PixelClassifier::new(d, cfg.hidden, n_classes, &mut rng)?;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut order: Vec<usize> = (0..p).collect();
    let bs = cfg.batch.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let mut rows = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                rows.extend_from_slice(&norm[i * d..(i + 1) * d]);
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mut g = Graph::new();
            let r = g.constant(Tensor::new([chunk.len(), d], rows)?);
            let (logits, leaves) = clf.forward(&mut g, r, true)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            let grads = g.backward(loss)?;
            let named = leaves
                .iter()
                .filter_map(|(k, v)| grads.get(*v).map(|t| (k.clone(), t.clone())))
                .collect();
            opt.step(&mut clf.params, &named)?;
        }
    }
    clf.fold_standardisation(&mean, &std);
    Ok(clf)
}

pub fn train_pixel_classifier(
    annotated: &[(Tensor, SegMap)],
    t: usize,
    model: &DiffusionModel,
    cfg: &ClassifierConfig,
) -> Result<PixelClassifier> {
    train_multi_classifier(annotated, &[t], model, cfg)
}

pub fn train_multi_classifier(
    annotated: &[(Tensor, SegMap)],
    steps: &[usize],
    model: &DiffusionModel,
    cfg: &ClassifierConfig,
) -> Result<PixelClassifier> {
    let k = annotated
        .first()
        .map(|(_, y)| y.num_classes())
        .ok_or_else(|| Error::Empty("annotated set".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ steps_key(steps));
    let data = pixel_dataset(annotated, steps, model, &mut rng)?;
    fit_classifier(&data, k, cfg)
}

fn steps_key(steps: &[usize]) -> u64 {
    steps.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &t| {
        (h ^ t as u64).wrapping_mul(0x100_0000_01b3)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ClassifierMeta {
    in_dim: usize,
    hidden: [usize; 2],
    n_classes: usize,
}

#[derive(Serialize, Deserialize)]
struct BankMeta {
    kind: String,
    multi_steps: Vec<usize>,
    per_t: BTreeMap<usize, ClassifierMeta>,
    multi: ClassifierMeta,
    palette: Palette,
}

/// Classifiers `G_t` at the trained timesteps plus `G_multi`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierBank {
    pub per_t: BTreeMap<usize, PixelClassifier>,
    pub multi: PixelClassifier,
    pub multi_steps: Vec<usize>,
    pub palette: Palette,
}

impl ClassifierBank {
    pub fn trained_ts(&self) -> Vec<usize> {
        self.per_t.keys().copied().collect()
    }

    /// `G_t` if trained at `t`, else the nearest trained timestep (ties toward smaller).
    pub fn resolve(&self, t: usize) -> Result<&PixelClassifier> {
        resolve_classifier(self, t)
    }

    pub fn n_classes(&self) -> usize {
        self.multi.n_classes
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = BankMeta {
            kind: "classifier_bank".into(),
            multi_steps: self.multi_steps.clone(),
            per_t: self.per_t.iter().map(|(t, c)| (*t, c.meta())).collect(),
            multi: self.multi.meta(),
            palette: self.palette.clone(),
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta)?);
        for (t, c) in &self.per_t {
            for (k, v) in &c.params {
                ck.insert(format!("t{t}/{k}"), (**v).clone());
            }
        }
        for (k, v) in &self.multi.params {
            ck.insert(format!("multi/{k}"), (**v).clone());
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: BankMeta = serde_json::from_value(ck.meta.clone())?;
        if meta.kind != "classifier_bank" {
            return Err(Error::Format(format!(
                "expected classifier_bank, got {}",
                meta.kind
            )));
        }
        let mut per_t = BTreeMap::new();
        for (t, m) in &meta.per_t {
            per_t.insert(
                *t,
                PixelClassifier::from_parts(m, ck.section(&format!("t{t}/")))?,
            );
        }
        Ok(ClassifierBank {
            per_t,
            multi: PixelClassifier::from_parts(&meta.multi, ck.section("multi/"))?,
            multi_steps: meta.multi_steps,
            palette: meta.palette,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub fn resolve_classifier(bank: &ClassifierBank, t: usize) -> Result<&PixelClassifier> {
    let below = bank.per_t.range(..=t).next_back();
    let above = bank.per_t.range(t..).next();
    match (below, above) {
        (Some((tb, b)), Some((ta, a))) => Ok(if ta - t < t - tb { a } else { b }),
        (Some((_, c)), None) | (None, Some((_, c))) => Ok(c),
        (None, None) => Err(Error::Empty("classifier bank".into())),
    }
}

/// Trains `G_t` for every `t` in `ts` (in parallel) and `G_multi` over `multi_steps`.
pub fn train_bank(
    annotated: &[(Tensor, SegMap)],
    ts: &[usize],
    multi_steps: &[usize],
    model: &DiffusionModel,
    cfg: &ClassifierConfig,
) -> Result<ClassifierBank> {
    let palette = annotated
        .first()
        .map(|(_, y)| y.palette().clone())
        .ok_or_else(|| Error::Empty("annotated set".into()))?;
    let mut ts: Vec<usize> = ts.to_vec();
    ts.sort_unstable();
    ts.dedup();
    for &t in ts.iter().chain(multi_steps) {
        model.sched.check_t(t)?;
    }
    let per: Vec<PixelClassifier> =
        par::map_slice(&ts, |&t| train_pixel_classifier(annotated, t, model, cfg))
            .into_iter()
            .collect::<Result<_>>()?;
    let multi = train_multi_classifier(annotated, multi_steps, model, cfg)?;
    Ok(ClassifierBank {
        per_t: ts.into_iter().zip(per).collect(),
        multi,
        multi_steps: multi_steps.to_vec(),
        palette,
    })
}

/// Features of `x` at the bank's multi steps, noised with a fixed seed.
pub fn multi_features(
    model: &DiffusionModel,
    bank: &ClassifierBank,
    x: &Tensor,
    seed: u64,
) -> Result<FeatureMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    noisy_features(model, x, &bank.multi_steps, &mut rng)
}

/// Segmentation map of `x` estimated by `G_multi`.
pub fn estimate_map(
    model: &DiffusionModel,
    bank: &ClassifierBank,
    x: &Tensor,
    seed: u64,
) -> Result<SegMap> {
    let f = multi_features(model, bank, x, seed)?;
    predict_map(&bank.multi, &f, &bank.palette)
}

/// Fraction of `rows` whose prediction matches `labels`.
pub fn pixel_accuracy(clf: &PixelClassifier, rows: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = clf.predict_labels(rows)?;
    if pred.is_empty() {
        return Err(Error::Empty("evaluation rows".into()));
    }
    let hit = pred
        .iter()
        .zip(labels)
        .filter(|(p, l)| **p as usize == **l)
        .count();
    Ok(hit as f64 / pred.len() as f64)
}
