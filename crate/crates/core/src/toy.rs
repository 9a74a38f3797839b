//! Desk-scale end-to-end protocol.
//!
//! Each "generator family" shares one real distribution and shifts its fakes
//! along a family-specific cue direction. Small two-layer detectors are
//! fine-tuned per family from one shared initialization, merged with every
//! configured rule and scored on seen and held-out families.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::merge::{merge_archives, MergeConfig, Method};
use crate::metrics::{self, ClassTag, EvalReport, FeatureMap, ScoreSet, Similarity};
use crate::tensor::{load_archive, save_archive, Role, Tensor, TensorArchive};
use crate::theory::derive_seed;

/// Largest allowed `|cos|` between two family cue directions.
pub const MAX_CUE_COSINE: f64 = 0.5;
pub const ARCHIVE_EXT: &str = "rma";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGeneratorFamily {
    pub id: String,
    pub real_mean: Vec<f64>,
    /// Unit artifact direction.
    pub cue: Vec<f64>,
    pub cue_strength: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl ToyGeneratorFamily {
    pub fn validate(&self) -> Result<()> {
        if self.real_mean.len() != self.cue.len() || self.cue.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "family {:?}: real mean has {} entries, cue has {}",
                self.id,
                self.real_mean.len(),
                self.cue.len()
            )));
        }
        if (norm(&self.cue) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "family {:?}: cue is not a unit vector",
                self.id
            )));
        }
        if !(self.cue_strength >= 0.0 && self.noise_scale >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "family {:?}: strength and noise must be nonnegative",
                self.id
            )));
        }
        Ok(())
    }
}

/// Rejects family sets with duplicate ids or cues closer than
/// [`MAX_CUE_COSINE`].
pub fn check_families(families: &[&ToyGeneratorFamily]) -> Result<()> {
    for (i, a) in families.iter().enumerate() {
        a.validate()?;
        for b in &families[i + 1..] {
            if a.id == b.id {
                return Err(Error::InvalidArgument(format!(
                    "duplicate family id {:?}",
                    a.id
                )));
            }
            let c = dot(&a.cue, &b.cue).abs();
            if c > MAX_CUE_COSINE + 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "families {:?} and {:?} have cue cosine {c:.3}",
                    a.id, b.id
                )));
            }
        }
    }
    Ok(())
}

/// Labeled samples; `indices` number the draws within one family's pool.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub family_id: String,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub indices: Vec<usize>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn class(&self, label: u8) -> Vec<Vec<f64>> {
        self.inputs
            .iter()
            .zip(&self.labels)
            .filter(|(_, y)| **y == label)
            .map(|(x, _)| x.clone())
            .collect()
    }

    fn take(&self, keep: impl Fn(usize) -> bool) -> ToyDataset {
        let mut out = ToyDataset {
            family_id: self.family_id.clone(),
            inputs: Vec::new(),
            labels: Vec::new(),
            indices: Vec::new(),
        };
        for k in 0..self.len() {
            if keep(k) {
                out.inputs.push(self.inputs[k].clone());
                out.labels.push(self.labels[k]);
                out.indices.push(self.indices[k]);
            }
        }
        out
    }
}

/// `n` real draws `m + s·z` followed by `n` fake draws `m + c·e + s·z`.
pub fn gen_toy_data(
    family: &ToyGeneratorFamily,
    n_per_class: usize,
    seed: u64,
) -> Result<ToyDataset> {
    family.validate()?;
    if n_per_class == 0 {
        return Err(Error::InvalidArgument(
            "n_per_class must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fake_mean: Vec<f64> = family
        .real_mean
        .iter()
        .zip(&family.cue)
        .map(|(m, c)| m + family.cue_strength * c)
        .collect();
    let mut inputs = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for (label, mean) in [(0u8, &family.real_mean), (1, &fake_mean)] {
        for _ in 0..n_per_class {
            inputs.push(
                mean.iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + family.noise_scale * z
                    })
                    .collect(),
            );
            labels.push(label);
        }
    }
    Ok(ToyDataset {
        family_id: family.id.clone(),
        inputs,
        labels,
        indices: (0..2 * n_per_class).collect(),
    })
}

/// Draws one pool of `n_train + n_test` per class and splits it by index.
pub fn gen_splits(
    family: &ToyGeneratorFamily,
    n_train: usize,
    n_test: usize,
) -> Result<(ToyDataset, ToyDataset)> {
    let n = n_train + n_test;
    let pool = gen_toy_data(family, n, family.seed)?;
    let in_train = |k: usize| k % n < n_train;
    Ok((pool.take(in_train), pool.take(|k| !in_train(k))))
}

/// Layer sizes of the toy detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyShape {
    pub input: usize,
    pub hidden: usize,
    pub feature: usize,
}

impl Default for ToyShape {
    fn default() -> Self {
        ToyShape {
            input: 32,
            hidden: 16,
            feature: 8,
        }
    }
}

/// `x → tanh(W₁x + b₁) → W₂h + b₂ → w·f + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub shape: ToyShape,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: f64,
}

const W1: &str = "mlp.w";
const B1: &str = "mlp.b";
const W2: &str = "attn.w";
const B2: &str = "attn.b";
const HEAD_W: &str = "head.w";
const HEAD_B: &str = "head.b";

fn quantize(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| *x as f32 as f64).collect()
}

impl ToyNet {
    pub fn zeros(shape: ToyShape) -> Self {
        let ToyShape {
            input: p,
            hidden: h,
            feature: d,
        } = shape;
        ToyNet {
            shape,
            w1: vec![0.0; h * p],
            b1: vec![0.0; h],
            w2: vec![0.0; d * h],
            b2: vec![0.0; d],
            head_w: vec![0.0; d],
            head_b: 0.0,
        }
    }

    /// Seeded scaled-Gaussian weights, zero biases, rounded to `f32`.
    pub fn init(shape: ToyShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let s = 1.0 / (fan_in as f64).sqrt();
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (s * z) as f32 as f64
                })
                .collect()
        };
        let mut net = ToyNet::zeros(shape);
        net.w1 = draw(shape.hidden * shape.input, shape.input);
        net.w2 = draw(shape.feature * shape.hidden, shape.hidden);
        net.head_w = draw(shape.feature, shape.feature);
        net
    }

    pub fn to_archive(&self, id: &str) -> Result<TensorArchive> {
        let ToyShape {
            input: p,
            hidden: h,
            feature: d,
        } = self.shape;
        let mut a = TensorArchive::new();
        a.insert(W1, Tensor::new(vec![h, p], Role::Mlp, quantize(&self.w1))?)?;
        a.insert(B1, Tensor::new(vec![h], Role::Other, quantize(&self.b1))?)?;
        a.insert(
            W2,
            Tensor::new(vec![d, h], Role::Attention, quantize(&self.w2))?,
        )?;
        a.insert(B2, Tensor::new(vec![d], Role::Other, quantize(&self.b2))?)?;
        a.insert(
            HEAD_W,
            Tensor::new(vec![1, d], Role::Head, quantize(&self.head_w))?,
        )?;
        a.insert(
            HEAD_B,
            Tensor::new(vec![1], Role::Head, quantize(&[self.head_b]))?,
        )?;
        a.set_id(id);
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let get = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let t = a
                .get(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("archive lacks tensor {name:?}")))?;
            if t.shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {name:?} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.data().to_vec())
        };
        let w1 = a
            .get(W1)
            .ok_or_else(|| Error::ShapeMismatch(format!("archive lacks tensor {W1:?}")))?;
        let w2 = a
            .get(W2)
            .ok_or_else(|| Error::ShapeMismatch(format!("archive lacks tensor {W2:?}")))?;
        if w1.shape().len() != 2 || w2.shape().len() != 2 {
            return Err(Error::ShapeMismatch(
                "layer weights must be matrices".into(),
            ));
        }
        let shape = ToyShape {
            input: w1.shape()[1],
            hidden: w1.shape()[0],
            feature: w2.shape()[0],
        };
        let ToyShape {
            input: p,
            hidden: h,
            feature: d,
        } = shape;
        Ok(ToyNet {
            shape,
            w1: get(W1, &[h, p])?,
            b1: get(B1, &[h])?,
            w2: get(W2, &[d, h])?,
            b2: get(B2, &[d])?,
            head_w: get(HEAD_W, &[1, d])?,
            head_b: get(HEAD_B, &[1])?[0],
        })
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        self.w1
            .chunks(self.shape.input)
            .zip(&self.b1)
            .map(|(row, b)| (dot(row, x) + b).tanh())
            .collect()
    }

    fn project(&self, hidden: &[f64]) -> Vec<f64> {
        self.w2
            .chunks(self.shape.hidden)
            .zip(&self.b2)
            .map(|(row, b)| dot(row, hidden) + b)
            .collect()
    }

    /// Pre-logit features.
    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        self.project(&self.hidden(x))
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        dot(&self.head_w, &self.embed(x)) + self.head_b
    }

    pub fn scores(&self, inputs: &[Vec<f64>]) -> Vec<f64> {
        inputs.par_iter().map(|x| self.score(x)).collect()
    }

    /// Mean logistic loss and its gradient, accumulated in sample order.
    pub fn loss_and_grad(&self, data: &ToyDataset) -> (f64, ToyNet) {
        let ToyShape {
            input: p,
            hidden: hd,
            ..
        } = self.shape;
        let mut g = ToyNet::zeros(self.shape);
        let mut loss = 0.0;
        for (x, &y) in data.inputs.iter().zip(&data.labels) {
            let h = self.hidden(x);
            let f = self.project(&h);
            let s = dot(&self.head_w, &f) + self.head_b;
            let y = f64::from(y);
            loss += s.max(0.0) + (-s.abs()).exp().ln_1p() - y * s;
            let ds = 1.0 / (1.0 + (-s).exp()) - y;
            g.head_w
                .iter_mut()
                .zip(&f)
                .for_each(|(gw, fk)| *gw += ds * fk);
            g.head_b += ds;
            let df: Vec<f64> = self.head_w.iter().map(|w| ds * w).collect();
            let mut dh = vec![0.0; hd];
            for (k, &dfk) in df.iter().enumerate() {
                g.b2[k] += dfk;
                let row = &self.w2[k * hd..(k + 1) * hd];
                let grow = &mut g.w2[k * hd..(k + 1) * hd];
                for j in 0..hd {
                    grow[j] += dfk * h[j];
                    dh[j] += dfk * row[j];
                }
            }
            for j in 0..hd {
                let dz = dh[j] * (1.0 - h[j] * h[j]);
                g.b1[j] += dz;
                let grow = &mut g.w1[j * p..(j + 1) * p];
                for (gw, xi) in grow.iter_mut().zip(x) {
                    *gw += dz * xi;
                }
            }
        }
        let n = data.len() as f64;
        g.scale(1.0 / n);
        (loss / n, g)
    }

    fn scale(&mut self, a: f64) {
        for v in [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.head_w,
        ] {
            v.iter_mut().for_each(|x| *x *= a);
        }
        self.head_b *= a;
    }

    fn step(&mut self, g: &ToyNet, lr: f64) {
        let pairs = [
            (&mut self.w1, &g.w1),
            (&mut self.b1, &g.b1),
            (&mut self.w2, &g.w2),
            (&mut self.b2, &g.b2),
            (&mut self.head_w, &g.head_w),
        ];
        for (v, gv) in pairs {
            v.iter_mut().zip(gv).for_each(|(x, d)| *x -= lr * d);
        }
        self.head_b -= lr * g.head_b;
    }
}

impl FeatureMap for ToyNet {
    fn input_dim(&self) -> usize {
        self.shape.input
    }

    fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.shape.input {
            return Err(Error::ShapeMismatch(format!(
                "input of size {} for a model of input size {}",
                x.len(),
                self.shape.input
            )));
        }
        Ok(self.embed(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub step_size: f64,
    /// Training fails if the final loss is not below this value.
    pub loss_threshold: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 100,
            step_size: 0.1,
            loss_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpecialist {
    pub family_id: String,
    pub checkpoint: TensorArchive,
    /// Loss before each step plus the final loss.
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent on the logistic loss, starting at `base`.
pub fn train_specialist(
    base: &TensorArchive,
    data: &ToyDataset,
    opts: &TrainOptions,
) -> Result<ToySpecialist> {
    if !data.labels.contains(&0) || !data.labels.contains(&1) {
        return Err(Error::InvalidArgument(format!(
            "training set for {:?} needs both classes",
            data.family_id
        )));
    }
    if !(opts.step_size > 0.0 && opts.step_size.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step size must be positive, got {}",
            opts.step_size
        )));
    }
    let mut net = ToyNet::from_archive(base)?;
    let mut losses = Vec::with_capacity(opts.epochs + 1);
    for epoch in 0..opts.epochs {
        let (loss, g) = net.loss_and_grad(data);
        if let Some(&initial) = losses.first() {
            if !loss.is_finite() || loss > 10.0 * initial {
                return Err(Error::Divergence {
                    epoch,
                    loss,
                    initial,
                });
            }
        }
        losses.push(loss);
        net.step(&g, opts.step_size);
    }
    let (final_loss, _) = net.loss_and_grad(data);
    losses.push(final_loss);
    if opts.epochs > 0 && !(final_loss < opts.loss_threshold) {
        return Err(Error::Validation(format!(
            "specialist {:?} ended at loss {final_loss:.4}, threshold {}",
            data.family_id, opts.loss_threshold
        )));
    }
    let checkpoint = if opts.epochs == 0 {
        let mut c = base.clone();
        c.set_id(data.family_id.clone());
        c
    } else {
        net.to_archive(&data.family_id)?
    };
    Ok(ToySpecialist {
        family_id: data.family_id.clone(),
        checkpoint,
        losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub shape: ToyShape,
    pub n_seen: usize,
    pub n_unseen: usize,
    pub cue_strength: f64,
    pub noise_scale: f64,
    /// Weight `ρ` of the forgery axis shared by every cue.
    pub shared_cue: f64,
    /// Seen strengths are spread linearly over `cue_strength · (1 ± spread)`.
    pub strength_spread: f64,
    /// Weight of the mean seen family part inside each held-out cue.
    pub unseen_mix: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub train: TrainOptions,
    /// Epochs of generic pretraining on the shared forgery axis before
    /// specialists are fine-tuned; 0 keeps the random initialization.
    pub pretrain_epochs: usize,
    pub seed: u64,
    pub methods: Vec<MergeConfig>,
    /// Also train one more family afterwards and re-merge.
    pub incremental: bool,
    /// Explicit families; generated from `seed` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seen: Option<Vec<ToyGeneratorFamily>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unseen: Option<Vec<ToyGeneratorFamily>>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            shape: ToyShape::default(),
            n_seen: 4,
            n_unseen: 2,
            cue_strength: 2.0,
            noise_scale: 1.0,
            shared_cue: 0.4,
            strength_spread: 0.3,
            unseen_mix: 0.4,
            n_train: 150,
            n_test: 150,
            train: TrainOptions::default(),
            pretrain_epochs: 100,
            seed: 2024,
            methods: Method::ALL.iter().map(|m| MergeConfig::new(*m)).collect(),
            incremental: false,
            seen: None,
            unseen: None,
        }
    }
}

/// Seen, held-out and post-hoc families for a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySet {
    pub seen: Vec<ToyGeneratorFamily>,
    pub unseen: Vec<ToyGeneratorFamily>,
    pub extra: ToyGeneratorFamily,
    /// Generic family along the shared axis used to pretrain `θ₀`.
    pub pretrain: ToyGeneratorFamily,
}

fn gram_schmidt(mut vs: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    for i in 0..vs.len() {
        for j in 0..i {
            let c = dot(&vs[i], &vs[j]);
            let (head, tail) = vs.split_at_mut(i);
            tail[0]
                .iter_mut()
                .zip(&head[j])
                .for_each(|(x, q)| *x -= c * q);
        }
        let n = norm(&vs[i]);
        if n < 1e-8 {
            return Err(Error::Degenerate(
                "cue directions are linearly dependent".into(),
            ));
        }
        vs[i].iter_mut().for_each(|x| *x /= n);
    }
    Ok(vs)
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let ToyShape {
            input,
            hidden,
            feature,
        } = self.shape;
        if input < 2 || hidden < 2 || feature < 2 {
            return Err(Error::InvalidArgument(
                "layer sizes must be at least 2".into(),
            ));
        }
        if self.n_seen == 0 {
            return Err(Error::InvalidArgument(
                "need at least one seen family".into(),
            ));
        }
        if self.n_seen + self.n_unseen + 2 > input {
            return Err(Error::InvalidArgument(format!(
                "{} families do not fit orthogonal cues in {input} dimensions",
                self.n_seen + self.n_unseen + 1
            )));
        }
        if self.seen.is_some() != self.unseen.is_some() {
            return Err(Error::InvalidArgument(
                "explicit seen and unseen families go together".into(),
            ));
        }
        for (name, v) in [
            ("shared_cue", self.shared_cue),
            ("unseen_mix", self.unseen_mix),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&self.strength_spread) || !(self.cue_strength >= 0.0) {
            return Err(Error::InvalidArgument(
                "strength_spread must lie in [0, 1), cue_strength >= 0".into(),
            ));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::InvalidArgument(
                "n_train and n_test must be positive".into(),
            ));
        }
        for m in &self.methods {
            m.validate()?;
        }
        Ok(())
    }

    /// Orthogonal seen cues; each held-out cue mixes the mean seen cue with
    /// a fresh orthogonal direction.
    /// Seen cues `ρ r + √(1−ρ²) q_i` around one shared forgery axis `r`
    /// with orthogonal family parts `q_i`; each held-out cue replaces `q_i`
    /// by a mix of the mean seen part and a fresh orthogonal direction.
    pub fn families(&self) -> Result<FamilySet> {
        self.validate()?;
        let p = self.shape.input;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0));
        let mut gauss =
            |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let real_mean: Vec<f64> = gauss(p).into_iter().map(|x| 0.5 * x).collect();
        let basis = gram_schmidt(
            (0..self.n_seen + self.n_unseen + 2)
                .map(|_| gauss(p))
                .collect(),
        )?;
        let (shared, parts) = basis.split_first().expect("nonempty basis");
        let rho = self.shared_cue;
        let rest = (1.0 - rho * rho).sqrt();
        let cue_from = |part: &[f64]| -> Vec<f64> {
            let c: Vec<f64> = shared
                .iter()
                .zip(part)
                .map(|(r, q)| rho * r + rest * q)
                .collect();
            let n = norm(&c);
            c.into_iter().map(|x| x / n).collect()
        };
        let family = |id: String, cue: Vec<f64>, strength: f64, k: u64| ToyGeneratorFamily {
            id,
            real_mean: real_mean.clone(),
            cue,
            cue_strength: strength,
            noise_scale: self.noise_scale,
            seed: derive_seed(self.seed, 1 + k),
        };
        let n = self.n_seen;
        let strength = |i: usize| {
            let t = if n > 1 {
                2.0 * i as f64 / (n - 1) as f64 - 1.0
            } else {
                0.0
            };
            self.cue_strength * (1.0 + self.strength_spread * t)
        };
        let seen = match &self.seen {
            Some(s) => s.clone(),
            None => (0..n)
                .map(|i| {
                    family(
                        format!("seen-{i:02}"),
                        cue_from(&parts[i]),
                        strength(i),
                        i as u64,
                    )
                })
                .collect(),
        };
        let unseen = match &self.unseen {
            Some(u) => u.clone(),
            None => {
                let mut mean_part = vec![0.0; p];
                for q in &parts[..n] {
                    mean_part.iter_mut().zip(q).for_each(|(m, x)| *m += x);
                }
                let mn = norm(&mean_part);
                let w = (1.0 - self.unseen_mix * self.unseen_mix).sqrt();
                (0..self.n_unseen)
                    .map(|k| {
                        let part: Vec<f64> = mean_part
                            .iter()
                            .zip(&parts[n + k])
                            .map(|(m, v)| self.unseen_mix * m / mn + w * v)
                            .collect();
                        family(
                            format!("unseen-{k:02}"),
                            cue_from(&part),
                            self.cue_strength,
                            100 + k as u64,
                        )
                    })
                    .collect()
            }
        };
        let extra_part = &parts[n + self.n_unseen];
        let extra = family(
            "seen-new".into(),
            cue_from(extra_part),
            self.cue_strength,
            200,
        );
        let pretrain = family("pretrain".into(), shared.clone(), self.cue_strength, 300);
        let all: Vec<&ToyGeneratorFamily> = seen.iter().chain(&unseen).chain([&extra]).collect();
        check_families(&all)?;
        if all.iter().any(|f| f.real_mean.len() != p) {
            return Err(Error::ShapeMismatch(
                "family dimension differs from model input".into(),
            ));
        }
        Ok(FamilySet {
            seen,
            unseen,
            extra,
            pretrain,
        })
    }

    pub fn base_seed(&self) -> u64 {
        derive_seed(self.seed, 999)
    }
}

/// Train/test splits per family.
#[derive(Debug, Clone)]
pub struct FamilyData {
    pub family: ToyGeneratorFamily,
    pub train: ToyDataset,
    pub test: ToyDataset,
}

fn family_data(cfg: &ProtocolConfig, fams: &[ToyGeneratorFamily]) -> Result<Vec<FamilyData>> {
    fams.iter()
        .map(|f| {
            let (train, test) = gen_splits(f, cfg.n_train, cfg.n_test)?;
            Ok(FamilyData {
                family: f.clone(),
                train,
                test,
            })
        })
        .collect()
}

fn test_auc(net: &ToyNet, data: &ToyDataset) -> Result<f64> {
    metrics::auc(&ScoreSet::from_labeled(
        &data.family_id,
        &net.scores(&data.inputs),
        &data.labels,
    )?)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn unseen_auc(net: &ToyNet, unseen: &[FamilyData]) -> Result<Option<f64>> {
    if unseen.is_empty() {
        return Ok(None);
    }
    let aucs: Vec<f64> = unseen
        .iter()
        .map(|f| test_auc(net, &f.test))
        .collect::<Result<_>>()?;
    Ok(Some(mean(&aucs)))
}

/// Similarity of one specialist to the reference (averaged) model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub specialist: String,
    pub real: Similarity,
    pub own_fake: Similarity,
    /// Absent when there is only one seen family.
    pub other_fake: Option<Similarity>,
}

impl SimilarityRow {
    pub fn get(&self, tag: ClassTag) -> Option<&Similarity> {
        match tag {
            ClassTag::Real => Some(&self.real),
            ClassTag::OwnFake => Some(&self.own_fake),
            ClassTag::OtherFake => self.other_fake.as_ref(),
        }
    }
}

/// Probe inputs for one specialist's family.
pub fn probe_inputs(seen: &[FamilyData], index: usize, tag: ClassTag) -> Vec<Vec<f64>> {
    match tag {
        ClassTag::Real => seen[index].test.class(0),
        ClassTag::OwnFake => seen[index].test.class(1),
        ClassTag::OtherFake => seen
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != index)
            .flat_map(|(_, f)| f.test.class(1))
            .collect(),
    }
}

/// Cosine similarity of archive features on one probe subset.
pub fn archive_similarity(
    a: &TensorArchive,
    b: &TensorArchive,
    seen: &[FamilyData],
    index: usize,
    tag: ClassTag,
) -> Result<Similarity> {
    let inputs = probe_inputs(seen, index, tag);
    metrics::feature_similarity(
        &ToyNet::from_archive(a)?,
        &ToyNet::from_archive(b)?,
        &inputs,
    )
}

fn similarity_rows(
    specialists: &[ToySpecialist],
    reference: &TensorArchive,
    seen: &[FamilyData],
) -> Result<Vec<SimilarityRow>> {
    let r = ToyNet::from_archive(reference)?;
    specialists
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let net = ToyNet::from_archive(&s.checkpoint)?;
            let sim = |tag| metrics::feature_similarity(&net, &r, &probe_inputs(seen, i, tag));
            Ok(SimilarityRow {
                specialist: s.family_id.clone(),
                real: sim(ClassTag::Real)?,
                own_fake: sim(ClassTag::OwnFake)?,
                other_fake: if seen.len() > 1 {
                    Some(sim(ClassTag::OtherFake)?)
                } else {
                    None
                },
            })
        })
        .collect()
}

pub fn render_similarity(rows: &[SimilarityRow]) -> String {
    let w = rows
        .iter()
        .map(|r| r.specialist.len())
        .max()
        .unwrap_or(0)
        .max("specialist".len());
    let mut out = format!(
        "{:<w$}  {:>8}  {:>8}  {:>10}\n",
        "specialist", "real", "own_fake", "other_fake"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<w$}  {:>8.4}  {:>8.4}  {:>10}\n",
            r.specialist,
            r.real.mean,
            r.own_fake.mean,
            r.other_fake
                .map_or("-".to_string(), |s| format!("{:.4}", s.mean))
        ));
    }
    out
}

/// Distinct labels for the configured merges: the method name, suffixed
/// with a counter when a method repeats.
pub fn method_labels(methods: &[MergeConfig]) -> Vec<String> {
    let mut seen: BTreeMap<Method, usize> = BTreeMap::new();
    methods
        .iter()
        .map(|m| {
            let c = seen.entry(m.method).or_insert(0);
            *c += 1;
            let repeats = methods.iter().filter(|o| o.method == m.method).count() > 1;
            if repeats {
                format!("{}-{}", m.method, c)
            } else {
                m.method.to_string()
            }
        })
        .collect()
}

/// Trains one specialist per family, in parallel, from a shared base.
pub fn train_all(
    base: &TensorArchive,
    data: &[FamilyData],
    opts: &TrainOptions,
) -> Result<Vec<ToySpecialist>> {
    data.par_iter()
        .map(|f| train_specialist(base, &f.train, opts))
        .collect()
}

#[derive(Debug, Clone)]
pub struct MergedModel {
    pub label: String,
    pub config: MergeConfig,
    pub archive: TensorArchive,
    pub report: EvalReport,
    pub notes: Vec<String>,
}

/// Specialist AUCs on their own test splits and on the held-out families.
struct Reference {
    seen: BTreeMap<String, f64>,
    unseen: Vec<f64>,
}

fn reference_aucs(
    specialists: &[ToySpecialist],
    seen: &[FamilyData],
    unseen: &[FamilyData],
) -> Result<Reference> {
    let mut seen_auc = BTreeMap::new();
    let mut unseen_aucs = Vec::new();
    for (s, fam) in specialists.iter().zip(seen) {
        let net = ToyNet::from_archive(&s.checkpoint)?;
        seen_auc.insert(fam.family.id.clone(), test_auc(&net, &fam.test)?);
        unseen_aucs.extend(unseen_auc(&net, unseen)?);
    }
    Ok(Reference {
        seen: seen_auc,
        unseen: unseen_aucs,
    })
}

fn report_for(
    archive: &TensorArchive,
    label: &str,
    config: serde_json::Value,
    seen: &[FamilyData],
    unseen: &[FamilyData],
    reference: &Reference,
) -> Result<EvalReport> {
    let net = ToyNet::from_archive(archive)?;
    let mut merged_auc = BTreeMap::new();
    for fam in seen {
        merged_auc.insert(fam.family.id.clone(), test_auc(&net, &fam.test)?);
    }
    let unseen_pair = unseen_auc(&net, unseen)?.map(|m| (m, reference.unseen.as_slice()));
    EvalReport::new(label, config, &merged_auc, &reference.seen, unseen_pair)
}

fn evaluate_merges(
    base: &TensorArchive,
    specialists: &[ToySpecialist],
    seen: &[FamilyData],
    unseen: &[FamilyData],
    methods: &[MergeConfig],
) -> Result<Vec<MergedModel>> {
    let reference = reference_aucs(specialists, seen, unseen)?;
    let archives: Vec<TensorArchive> = specialists.iter().map(|s| s.checkpoint.clone()).collect();
    methods
        .iter()
        .zip(method_labels(methods))
        .map(|(cfg, label)| {
            let out = merge_archives(base, &archives, cfg)?;
            let report = report_for(
                &out.archive,
                &label,
                serde_json::to_value(cfg)?,
                seen,
                unseen,
                &reference,
            )?;
            let mut archive = out.archive;
            archive.set_id(format!("merged-{label}"));
            Ok(MergedModel {
                label,
                config: cfg.clone(),
                archive,
                report,
                notes: out.notes,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct IncrementalOutcome {
    pub new_specialist: ToySpecialist,
    pub merged: Vec<MergedModel>,
    pub table: String,
}

#[derive(Debug, Clone)]
pub struct ProtocolResult {
    pub config: ProtocolConfig,
    pub families: FamilySet,
    pub base: TensorArchive,
    pub specialists: Vec<ToySpecialist>,
    pub merged: Vec<MergedModel>,
    pub table: String,
    pub similarity: Vec<SimilarityRow>,
    pub incremental: Option<IncrementalOutcome>,
}

impl ProtocolResult {
    pub fn reports(&self) -> Vec<&EvalReport> {
        self.merged.iter().map(|m| &m.report).collect()
    }

    pub fn report(&self, label: &str) -> Option<&EvalReport> {
        self.merged
            .iter()
            .find(|m| m.label == label)
            .map(|m| &m.report)
    }
}

pub fn base_archive(cfg: &ProtocolConfig) -> Result<TensorArchive> {
    let init = ToyNet::init(cfg.shape, cfg.base_seed()).to_archive("theta0")?;
    if cfg.pretrain_epochs == 0 {
        return Ok(init);
    }
    let fam = cfg.families()?.pretrain;
    let data = gen_toy_data(&fam, cfg.n_train, fam.seed)?;
    let opts = TrainOptions {
        epochs: cfg.pretrain_epochs,
        ..cfg.train
    };
    let mut base = train_specialist(&init, &data, &opts)?.checkpoint;
    base.set_id("theta0");
    Ok(base)
}

/// Specialists, the averaged model and the similarity probe only.
pub fn probe_similarity(cfg: &ProtocolConfig) -> Result<Vec<SimilarityRow>> {
    let fams = cfg.families()?;
    let seen = family_data(cfg, &fams.seen)?;
    let base = base_archive(cfg)?;
    let specialists = train_all(&base, &seen, &cfg.train)?;
    let archives: Vec<TensorArchive> = specialists.iter().map(|s| s.checkpoint.clone()).collect();
    let wa = merge_archives(&base, &archives, &MergeConfig::new(Method::Wa))?;
    similarity_rows(&specialists, &wa.archive, &seen)
}

pub fn run_protocol(cfg: &ProtocolConfig) -> Result<ProtocolResult> {
    let families = cfg.families()?;
    let seen = family_data(cfg, &families.seen)?;
    let unseen = family_data(cfg, &families.unseen)?;
    let base = base_archive(cfg)?;
    let specialists = train_all(&base, &seen, &cfg.train)?;
    let merged = evaluate_merges(&base, &specialists, &seen, &unseen, &cfg.methods)?;
    let reports: Vec<EvalReport> = merged.iter().map(|m| m.report.clone()).collect();
    let table = metrics::render_table(&reports);

    let archives: Vec<TensorArchive> = specialists.iter().map(|s| s.checkpoint.clone()).collect();
    let wa = merge_archives(&base, &archives, &MergeConfig::new(Method::Wa))?;
    let similarity = similarity_rows(&specialists, &wa.archive, &seen)?;

    let incremental = if cfg.incremental {
        let extra = family_data(cfg, std::slice::from_ref(&families.extra))?;
        let new_specialist = train_specialist(&base, &extra[0].train, &cfg.train)?;
        let mut all_specs = specialists.clone();
        all_specs.push(new_specialist.clone());
        let mut all_seen = seen.clone();
        all_seen.extend(extra);
        let merged = evaluate_merges(&base, &all_specs, &all_seen, &unseen, &cfg.methods)?;
        let reports: Vec<EvalReport> = merged.iter().map(|m| m.report.clone()).collect();
        Some(IncrementalOutcome {
            new_specialist,
            table: metrics::render_table(&reports),
            merged,
        })
    } else {
        None
    };

    Ok(ProtocolResult {
        config: cfg.clone(),
        families,
        base,
        specialists,
        merged,
        table,
        similarity,
        incremental,
    })
}

fn archive_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.{ARCHIVE_EXT}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes archives, per-method JSON reports, the comparison table and the
/// similarity table into `dir`. Returns the written paths.
pub fn write_protocol_outputs(result: &ProtocolResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let put_archive = |stem: &str, a: &TensorArchive, w: &mut Vec<PathBuf>| -> Result<()> {
        let p = archive_path(dir, stem);
        save_archive(a, &p)?;
        w.push(p);
        Ok(())
    };
    put_archive("base", &result.base, &mut written)?;
    for s in &result.specialists {
        put_archive(
            &format!("specialist-{}", s.family_id),
            &s.checkpoint,
            &mut written,
        )?;
    }
    for m in &result.merged {
        put_archive(&format!("merged-{}", m.label), &m.archive, &mut written)?;
    }
    let mut text = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        write_text(&p, &body)?;
        written.push(p);
        Ok(())
    };
    text(
        "protocol.json",
        serde_json::to_string_pretty(&result.config)?,
    )?;
    for m in &result.merged {
        text(&format!("report-{}.json", m.label), m.report.to_json()?)?;
    }
    text("table.txt", result.table.clone())?;
    text("similarity.txt", render_similarity(&result.similarity))?;
    if let Some(inc) = &result.incremental {
        written.extend(write_incremental(inc, dir)?);
    }
    Ok(written)
}

fn write_incremental(inc: &IncrementalOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    let n = inc
        .merged
        .first()
        .map_or(0, |m| m.report.auc_per_task.len());
    let mut written = Vec::new();
    let spec_path = archive_path(dir, &format!("specialist-{}", inc.new_specialist.family_id));
    if spec_path.exists() {
        return Err(Error::InvalidArgument(format!(
            "{} already exists; refusing to overwrite",
            spec_path.display()
        )));
    }
    save_archive(&inc.new_specialist.checkpoint, &spec_path)?;
    written.push(spec_path);
    for m in &inc.merged {
        let stem = format!("merged-{}-n{n}", m.label);
        let p = archive_path(dir, &stem);
        save_archive(&m.archive, &p)?;
        written.push(p);
        let r = dir.join(format!("report-{}-n{n}.json", m.label));
        write_text(&r, &m.report.to_json()?)?;
        written.push(r);
    }
    let t = dir.join(format!("table-n{n}.txt"));
    write_text(&t, &inc.table)?;
    written.push(t);
    Ok(written)
}

/// Config, base and seen specialists read back from a protocol directory.
pub struct StoredProtocol {
    pub config: ProtocolConfig,
    pub families: FamilySet,
    pub base: TensorArchive,
    pub specialists: Vec<ToySpecialist>,
}

impl StoredProtocol {
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("protocol.json");
        let cfg_text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: ProtocolConfig = serde_json::from_str(&cfg_text)?;
        let families = config.families()?;
        let base = load_archive(archive_path(dir, "base"))?;
        let specialists = families
            .seen
            .iter()
            .map(|f| {
                Ok(ToySpecialist {
                    family_id: f.id.clone(),
                    checkpoint: load_archive(archive_path(dir, &format!("specialist-{}", f.id)))?,
                    losses: Vec::new(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(StoredProtocol {
            config,
            families,
            base,
            specialists,
        })
    }
}

/// Scores any archive with the toy architecture against the families and
/// specialists stored in a protocol directory. The label is the archive id
/// and the config is its recorded merge config, if any.
pub fn evaluate_in_dir(dir: &Path, archive: &TensorArchive) -> Result<EvalReport> {
    let stored = StoredProtocol::load(dir)?;
    let seen = family_data(&stored.config, &stored.families.seen)?;
    let unseen = family_data(&stored.config, &stored.families.unseen)?;
    let reference = reference_aucs(&stored.specialists, &seen, &unseen)?;
    let config = match archive.meta().get("merge_config") {
        Some(text) => serde_json::from_str(text)?,
        None => serde_json::Value::Null,
    };
    let label = if archive.id().is_empty() {
        "model"
    } else {
        archive.id()
    };
    report_for(archive, label, config, &seen, &unseen, &reference)
}

/// Adds the post-hoc family to an existing protocol directory: reads the
/// stored config, base and specialists, trains the new specialist and
/// writes only new files.
pub fn incremental_remerge(dir: &Path) -> Result<(IncrementalOutcome, Vec<PathBuf>)> {
    let stored = StoredProtocol::load(dir)?;
    let (cfg, families, base, mut specialists) = (
        stored.config,
        stored.families,
        stored.base,
        stored.specialists,
    );
    let mut seen = family_data(&cfg, &families.seen)?;
    let unseen = family_data(&cfg, &families.unseen)?;
    let extra = family_data(&cfg, std::slice::from_ref(&families.extra))?;
    let new_specialist = train_specialist(&base, &extra[0].train, &cfg.train)?;
    specialists.push(new_specialist.clone());
    seen.extend(extra);
    let merged = evaluate_merges(&base, &specialists, &seen, &unseen, &cfg.methods)?;
    let reports: Vec<EvalReport> = merged.iter().map(|m| m.report.clone()).collect();
    let outcome = IncrementalOutcome {
        new_specialist,
        table: metrics::render_table(&reports),
        merged,
    };
    let written = write_incremental(&outcome, dir)?;
    Ok((outcome, written))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn family(strength: f64, noise: f64) -> ToyGeneratorFamily {
        let mut cue = vec![0.0; 4];
        cue[1] = 1.0;
        ToyGeneratorFamily {
            id: "f".into(),
            real_mean: vec![0.5, -1.0, 0.0, 2.0],
            cue,
            cue_strength: strength,
            noise_scale: noise,
            seed: 1,
        }
    }

    #[test]
    fn noiseless_fakes_sit_on_the_shift() {
        let f = family(1.5, 0.0);
        let ds = gen_toy_data(&f, 3, 9).unwrap();
        assert_eq!(ds.class(0), vec![f.real_mean.clone(); 3]);
        assert_eq!(ds.class(1), vec![vec![0.5, 0.5, 0.0, 2.0]; 3]);
        assert!(gen_toy_data(&f, 0, 9).is_err());
    }

    #[test]
    fn splits_are_disjoint() {
        let (train, test) = gen_splits(&family(1.0, 1.0), 5, 3).unwrap();
        assert_eq!((train.len(), test.len()), (10, 6));
        let a: std::collections::BTreeSet<usize> = train.indices.iter().copied().collect();
        let b: std::collections::BTreeSet<usize> = test.indices.iter().copied().collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), 16);
    }

    #[test]
    fn cue_separation_enforced() {
        let a = family(1.0, 1.0);
        let mut b = a.clone();
        b.id = "g".into();
        assert!(check_families(&[&a, &b]).is_err());
        b.cue = vec![1.0, 0.0, 0.0, 0.0];
        assert!(check_families(&[&a, &b]).is_ok());
    }

    #[test]
    fn archive_round_trip_and_gradient() {
        let shape = ToyShape {
            input: 4,
            hidden: 3,
            feature: 2,
        };
        let net = ToyNet::init(shape, 5);
        let back = ToyNet::from_archive(&net.to_archive("x").unwrap()).unwrap();
        assert_eq!(back, net);

        let ds = gen_toy_data(&family(1.0, 1.0), 4, 2).unwrap();
        let mut net = net;
        net.head_b = 0.1;
        net.b1 = vec![0.05, -0.1, 0.2];
        let (_, g) = net.loss_and_grad(&ds);
        let h = 1e-6;
        let check = |get: &dyn Fn(&mut ToyNet) -> &mut f64, analytic: f64| {
            let mut p = net.clone();
            *get(&mut p) += h;
            let mut m = net.clone();
            *get(&mut m) -= h;
            let fd = (p.loss_and_grad(&ds).0 - m.loss_and_grad(&ds).0) / (2.0 * h);
            assert!((fd - analytic).abs() < 1e-7, "{fd} vs {analytic}");
        };
        check(&|n| &mut n.w1[5], g.w1[5]);
        check(&|n| &mut n.b1[2], g.b1[2]);
        check(&|n| &mut n.w2[3], g.w2[3]);
        check(&|n| &mut n.b2[1], g.b2[1]);
        check(&|n| &mut n.head_w[0], g.head_w[0]);
        check(&|n| &mut n.head_b, g.head_b);
    }

    #[test]
    fn zero_epochs_keep_the_base() {
        let cfg = ProtocolConfig::default();
        let base = base_archive(&cfg).unwrap();
        let fams = cfg.families().unwrap();
        let (train, _) = gen_splits(&fams.seen[0], 10, 10).unwrap();
        let opts = TrainOptions {
            epochs: 0,
            ..Default::default()
        };
        let s = train_specialist(&base, &train, &opts).unwrap();
        let names: Vec<_> = base.iter().map(|(n, _)| n).collect();
        for n in names {
            assert_eq!(s.checkpoint.get(n), base.get(n));
        }
    }

    #[test]
    fn labels_distinguish_repeats() {
        let m = vec![
            MergeConfig::new(Method::Ta),
            MergeConfig::new(Method::Wa),
            MergeConfig::new(Method::Ta),
        ];
        assert_eq!(method_labels(&m), vec!["ta-1", "wa", "ta-2"]);
    }

    #[test]
    fn generated_families_respect_separation() {
        let fams = ProtocolConfig::default().families().unwrap();
        assert_eq!(fams.seen.len(), 4);
        assert_eq!(fams.unseen.len(), 2);
        for u in &fams.unseen {
            for s in &fams.seen {
                assert!(dot(&u.cue, &s.cue).abs() <= MAX_CUE_COSINE);
            }
        }
    }
}
