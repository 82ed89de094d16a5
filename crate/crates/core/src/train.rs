//! Deterministic toy-scale training: synthetic data, SGD with momentum,
//! softmax cross-entropy and evaluation.

use indexmap::IndexMap;

use crate::arch::{ArchSpec, Model};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Shape, Tensor};

pub const DEFAULT_NOISE: f64 = 0.3;

/// Labeled images, stored as one (N, C, H, W) tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s.c, s.h, s.w]
    }

    /// Gathers the given samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let s = self.images.shape();
        let per = s.sample();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let images = Tensor::from_vec(
            Shape {
                n: indices.len(),
                ..s
            },
            data,
        )
        .expect("sizes agree");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Class prototypes plus Gaussian noise of std 0.3. Samples cycle through the
/// classes so every prefix is close to balanced.
pub fn synth_dataset(
    classes: usize,
    per_class: usize,
    shape: [usize; 3],
    seed: u64,
) -> Result<Dataset> {
    synth_dataset_with_noise(classes, per_class, shape, seed, DEFAULT_NOISE)
}

pub fn synth_dataset_with_noise(
    classes: usize,
    per_class: usize,
    shape: [usize; 3],
    seed: u64,
    noise: f64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::config(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if shape.contains(&0) || noise < 0.0 {
        return Err(Error::config(
            "sample shape must be non-zero and noise >= 0",
        ));
    }
    let mut rng = SplitMix64::new(seed);
    let per = shape.iter().product::<usize>();
    let prototypes: Vec<f64> = (0..classes * per).map(|_| rng.gaussian()).collect();
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        data.extend(
            prototypes[k * per..(k + 1) * per]
                .iter()
                .map(|p| (p + noise * rng.gaussian()) as Scalar),
        );
    }
    Ok(Dataset {
        images: Tensor::from_vec(Shape::new(n, shape[0], shape[1], shape[2]), data)?,
        labels,
        classes,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            steps: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 || self.batch_size == 0 {
            return Err(Error::config(
                "weight decay must be >= 0 and batch size >= 1",
            ));
        }
        Ok(())
    }
}

/// Per-parameter velocity buffers.
pub type Momentum = IndexMap<String, Vec<Scalar>>;

/// v ← m·v + g + wd·w; w ← w − lr·v, for every trainable entry with a gradient.
/// Only `lr` is checked, so a zero rate leaves weights untouched.
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &Grads,
    velocity: &mut Momentum,
    cfg: &TrainConfig,
) -> Result<()> {
    let (lr, m, wd) = (
        cfg.lr as Scalar,
        cfg.momentum as Scalar,
        cfg.weight_decay as Scalar,
    );
    for (name, entry) in store.iter_mut() {
        if !entry.trainable {
            continue;
        }
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != entry.value.shape() {
            return Err(Error::Dimension {
                op: "sgd_step",
                axis: "len",
                expected: entry.value.len(),
                got: g.len(),
            });
        }
        let v = velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; g.len()]);
        for ((w, v), g) in entry
            .value
            .data_mut()
            .iter_mut()
            .zip(v.iter_mut())
            .zip(g.data())
        {
            *v = m * *v + g + wd * *w;
            *w -= lr * *v;
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    let k = s.sample();
    crate::error::check_dim("softmax_cross_entropy", "N", labels.len(), s.n)?;
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (n, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::config(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let z = &logits.data()[n * k..(n + 1) * k];
        let max = z.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
        let exp: Vec<f64> = z.iter().map(|&v| (v - max) as f64).map(f64::exp).collect();
        let sum: f64 = exp.iter().sum();
        loss += sum.ln() - (z[label] - max) as f64;
        for (j, e) in exp.iter().enumerate() {
            let p = e / sum - if j == label { 1.0 } else { 0.0 };
            grad[n * k + j] = (p / s.n as f64) as Scalar;
        }
    }
    Ok((loss / s.n as f64, Tensor::from_vec(s, grad)?))
}

fn argmax(row: &[Scalar]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, Scalar::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
}

fn check_head(arch: &ArchSpec, data: &Dataset) -> Result<()> {
    if arch.input_shape != data.sample_shape() {
        return Err(Error::config(format!(
            "arch input {:?} does not match dataset samples {:?}",
            arch.input_shape,
            data.sample_shape()
        )));
    }
    let out = arch.output_shape()?;
    if out.sample() != data.classes {
        return Err(Error::config(format!(
            "arch output width {} does not match {} classes",
            out.sample(),
            data.classes
        )));
    }
    Ok(())
}

/// Trains from a fresh seeded initialization. Minibatches walk a seeded
/// shuffle of the dataset, reshuffled every epoch.
pub fn train(arch: &ArchSpec, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_head(arch, data)?;
    if data.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    let mut model = Model::new(arch.clone(), cfg.seed)?;
    let mut order_rng = SplitMix64::new(cfg.seed ^ 0x0005_eed0_fba7_c4e5);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let batch = cfg.batch_size.min(data.len());
    let mut velocity = Momentum::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor + batch > order.len() {
            order_rng.shuffle(&mut order);
            cursor = 0;
        }
        let (x, labels) = data.batch(&order[cursor..cursor + batch]);
        cursor += batch;
        let trace = model.program.forward(&x, &model.store, true)?;
        let (loss, grad) = softmax_cross_entropy(trace.output(&model.program), &labels)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        losses.push(loss);
        let grads = model.program.backward(&trace, &model.store, &grad)?;
        model
            .program
            .update_running_stats(&trace, &mut model.store)?;
        sgd_step(&mut model.store, &grads.params, &mut velocity, cfg)?;
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_model(&model),
        losses,
    })
}

/// Inference-mode predictions, in batches of 64.
pub fn predict(model: &Model, data: &Dataset) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(64) {
        let (x, _) = data.batch(chunk);
        let trace = model.program.forward(&x, &model.store, false)?;
        let logits = trace.output(&model.program);
        let k = logits.shape().sample();
        out.extend(logits.data().chunks(k).map(argmax));
    }
    Ok(out)
}

/// Accuracy in [0, 1] of the checkpoint's stored arch and weights.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset) -> Result<f64> {
    let model = ckpt.to_model()?;
    check_head(&model.arch, data)?;
    let pred = predict(&model, data)?;
    let correct = pred
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / data.len().max(1) as f64)
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l:.17e}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_seeded_and_shaped() {
        let a = synth_dataset(10, 100, [3, 32, 32], 5).unwrap();
        assert_eq!(a.len(), 1000);
        assert_eq!(a.images.shape(), Shape::new(1000, 3, 32, 32));
        assert_eq!(a, synth_dataset(10, 100, [3, 32, 32], 5).unwrap());
        assert_ne!(a, synth_dataset(10, 100, [3, 32, 32], 6).unwrap());
        assert!(synth_dataset(1, 10, [1, 2, 2], 0).is_err());
    }

    fn store(w: Vec<Scalar>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(w), true);
        s
    }

    #[test]
    fn sgd_recurrence() {
        let g: Grads = [("w".to_string(), Tensor::vector(vec![1.0, -2.0]))]
            .into_iter()
            .collect();
        let cfg = TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut s = store(vec![0.0, 0.0]);
        let mut v = Momentum::new();
        sgd_step(&mut s, &g, &mut v, &cfg).unwrap();
        sgd_step(&mut s, &g, &mut v, &cfg).unwrap();
        let w = s.get("w").unwrap().data();
        assert!((w[0] + 0.1 * 2.9).abs() < 1e-12);
        assert!((w[1] - 0.2 * 2.9).abs() < 1e-12);

        let plain = TrainConfig {
            momentum: 0.0,
            ..cfg.clone()
        };
        let mut s = store(vec![1.0, 1.0]);
        sgd_step(&mut s, &g, &mut Momentum::new(), &plain).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.0 - 0.1, 1.0 + 0.1 * 2.0]);

        let frozen = TrainConfig { lr: 0.0, ..cfg };
        let mut s = store(vec![3.0, 4.0]);
        sgd_step(&mut s, &g, &mut Momentum::new(), &frozen).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let g: Grads = [("w".to_string(), Tensor::vector(vec![1.0]))]
            .into_iter()
            .collect();
        let mut s = store(vec![0.0, 0.0]);
        assert!(sgd_step(&mut s, &g, &mut Momentum::new(), &TrainConfig::default()).is_err());
    }

    #[test]
    fn cross_entropy_uniform() {
        let logits = Tensor::zeros(Shape::new(2, 4, 1, 1));
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((grad.data()[0] + 0.375).abs() < 1e-12);
        assert!(grad.sum().abs() < 1e-12);
    }
}
