//! Frozen-feature evaluation: weighted k-NN, linear probe, and collapse
//! diagnostics.

use std::fs::OpenOptions;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_view, Appearance, CropBox, ViewParams};
use crate::data::{Dataset, Image};
use crate::error::{ensure, HvpError, Result};
use crate::exec;
use crate::model::{image_batch, load_checkpoint, ModelState};
use crate::rng::{self, tag};
use crate::tensor::kernels::gemm;

/// Encoder features and labels of a dataset split.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    dim: usize,
    features: Vec<f32>,
    labels: Vec<u8>,
    num_classes: usize,
}

impl FeatureBank {
    pub fn new(dim: usize, features: Vec<f32>, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        ensure!(dim > 0, "feature dimension must be positive");
        ensure!(
            features.len() == dim * labels.len(),
            "{} feature values do not form {} rows of width {dim}",
            features.len(),
            labels.len()
        );
        ensure!(
            features.iter().all(|v| v.is_finite()),
            "feature bank contains non-finite values"
        );
        ensure!(
            labels.iter().all(|&l| (l as usize) < num_classes),
            "label outside 0..{num_classes}"
        );
        Ok(Self {
            dim,
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

const EXTRACT_CHUNK: usize = 256;

/// Deterministic evaluation view: the largest centred square, resized to
/// `size`. For square images already at `size` this is the identity.
pub fn center_view(image: &Image, size: usize) -> Result<Image> {
    let (h, w) = (image.height(), image.width());
    if h == size && w == size {
        return Ok(image.clone());
    }
    let s = h.min(w);
    let crop = CropBox::new(((w - s) / 2) as u32, ((h - s) / 2) as u32, s as u32, s as u32);
    let p = ViewParams::from_parts(h, w, crop, false, Appearance::identity(), false, 0.0);
    apply_view(image, &p, size)
}

/// Which network output a feature bank holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLayer {
    /// Encoder output `h`, the representation that is evaluated.
    Encoder,
    /// Projector output `z`, the space the loss acts on.
    Projector,
}

/// Encoder features of every image on centre-crop inputs.
pub fn extract_features(model: &ModelState, data: &Dataset, input_size: usize) -> Result<FeatureBank> {
    extract_layer(model, data, input_size, FeatureLayer::Encoder)
}

pub fn extract_layer(model: &ModelState, data: &Dataset, input_size: usize, layer: FeatureLayer) -> Result<FeatureBank> {
    ensure!(!data.is_empty(), "cannot extract features of an empty dataset");
    let dim = match layer {
        FeatureLayer::Encoder => model.widths().feature_dim(),
        FeatureLayer::Projector => model.widths().embed_dim,
    };
    let mut features = Vec::with_capacity(data.len() * dim);
    for chunk in data.images.chunks(EXTRACT_CHUNK) {
        let views = exec::map_slice(chunk, |im| center_view(im, input_size))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let x = image_batch(&views)?;
        let out = match layer {
            FeatureLayer::Encoder => model.features(x)?,
            FeatureLayer::Projector => model.embeddings(x)?,
        };
        features.extend_from_slice(out.data());
    }
    FeatureBank::new(dim, features, data.labels.clone(), data.num_classes)
}

pub fn extract_features_from_checkpoint(
    path: impl AsRef<Path>,
    data: &Dataset,
    input_size: usize,
) -> Result<FeatureBank> {
    let ck = load_checkpoint(path)?;
    extract_features(&ck.model, data, input_size)
}

fn normalized(bank: &FeatureBank) -> Vec<f32> {
    let mut out = bank.features.clone();
    for row in out.chunks_mut(bank.dim) {
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-8);
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

fn argmax_lowest(votes: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in votes.iter().enumerate().skip(1) {
        if v > votes[best] {
            best = c;
        }
    }
    best
}

pub const KNN_K: usize = 20;
pub const KNN_TEMPERATURE: f32 = 0.07;

/// Weighted k-NN on cosine similarity. Each of the `k` nearest training rows
/// votes for its class with weight `exp(sim / temperature)`.
pub fn knn_eval(train: &FeatureBank, test: &FeatureBank, k: usize, temperature: f32) -> Result<f64> {
    ensure!(!train.is_empty() && !test.is_empty(), "k-NN on an empty feature bank");
    ensure!(train.dim == test.dim, "feature widths differ: {} vs {}", train.dim, test.dim);
    ensure!(k >= 1 && k <= train.len(), "k = {k} outside 1..={}", train.len());
    ensure!(temperature > 0.0, "temperature must be positive");
    let (tr, te) = (normalized(train), normalized(test));
    let d = train.dim;
    let classes = train.num_classes.max(test.num_classes);
    let n_train = train.len();
    let block = 128;
    let blocks = test.len().div_ceil(block);
    let correct: Vec<usize> = exec::map_range(blocks, |b| {
        let start = b * block;
        let rows = block.min(test.len() - start);
        let mut sim = vec![0.0f32; rows * n_train];
        gemm(rows, d, n_train, &te[start * d..(start + rows) * d], false, &tr, true, 0.0, &mut sim);
        let mut hits = 0;
        let mut order: Vec<usize> = Vec::with_capacity(n_train);
        for r in 0..rows {
            let s = &sim[r * n_train..(r + 1) * n_train];
            order.clear();
            order.extend(0..n_train);
            let cmp = |a: &usize, b: &usize| s[*b].total_cmp(&s[*a]).then(a.cmp(b));
            if k < n_train {
                order.select_nth_unstable_by(k - 1, cmp);
            }
            let mut votes = vec![0.0f64; classes];
            for &j in &order[..k] {
                votes[train.labels[j] as usize] += ((s[j] / temperature) as f64).exp();
            }
            if argmax_lowest(&votes) == test.labels[start + r] as usize {
                hits += 1;
            }
        }
        hits
    });
    Ok(correct.iter().sum::<usize>() as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 0.1,
            momentum: 0.9,
            batch_size: 256,
            seed: 0,
        }
    }
}

/// Softmax regression on standardised frozen features; returns test accuracy.
pub fn linear_probe(train: &FeatureBank, test: &FeatureBank, cfg: &ProbeConfig) -> Result<f64> {
    ensure!(!train.is_empty() && !test.is_empty(), "linear probe on an empty feature bank");
    ensure!(train.dim == test.dim, "feature widths differ: {} vs {}", train.dim, test.dim);
    ensure!(cfg.epochs >= 1 && cfg.batch_size >= 1, "probe needs epochs and batch size >= 1");
    let d = train.dim;
    let c = train.num_classes.max(test.num_classes);
    let n = train.len();

    let mut mean = vec![0.0f64; d];
    let mut var = vec![0.0f64; d];
    for i in 0..n {
        for (j, &v) in train.row(i).iter().enumerate() {
            mean[j] += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for i in 0..n {
        for (j, &v) in train.row(i).iter().enumerate() {
            var[j] += (v as f64 - mean[j]).powi(2);
        }
    }
    let scale: Vec<f32> = var
        .iter()
        .map(|v| {
            let s = (v / n as f64).sqrt();
            if s > 1e-6 {
                (1.0 / s) as f32
            } else {
                0.0
            }
        })
        .collect();
    let standardize = |bank: &FeatureBank| -> Vec<f32> {
        let mut out = bank.features.clone();
        for row in out.chunks_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - mean[j] as f32) * scale[j];
            }
        }
        out
    };
    let (xtr, xte) = (standardize(train), standardize(test));

    let mut w = vec![0.0f32; d * c];
    let mut b = vec![0.0f32; c];
    let mut vw = vec![0.0f32; d * c];
    let mut vb = vec![0.0f32; c];
    let mut order: Vec<usize> = (0..n).collect();
    let mut logits = vec![0.0f32; c];
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &[tag::PROBE, epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            let mut gw = vec![0.0f32; d * c];
            let mut gb = vec![0.0f32; c];
            for &i in batch {
                let x = &xtr[i * d..(i + 1) * d];
                logits.copy_from_slice(&b);
                for (j, &xj) in x.iter().enumerate() {
                    for (k, l) in logits.iter_mut().enumerate() {
                        *l += xj * w[j * c + k];
                    }
                }
                let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let z: f32 = logits.iter().map(|l| (l - mx).exp()).sum();
                for k in 0..c {
                    let mut g = (logits[k] - mx).exp() / z;
                    if k == train.labels[i] as usize {
                        g -= 1.0;
                    }
                    gb[k] += g;
                    for (j, &xj) in x.iter().enumerate() {
                        gw[j * c + k] += g * xj;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for (p, (v, g)) in w.iter_mut().zip(vw.iter_mut().zip(&gw)) {
                *v = cfg.momentum * *v + g * inv;
                *p -= cfg.lr * *v;
            }
            for (p, (v, g)) in b.iter_mut().zip(vb.iter_mut().zip(&gb)) {
                *v = cfg.momentum * *v + g * inv;
                *p -= cfg.lr * *v;
            }
        }
    }

    let mut hits = 0;
    let mut scores = vec![0.0f64; c];
    for i in 0..test.len() {
        let x = &xte[i * d..(i + 1) * d];
        for k in 0..c {
            scores[k] = b[k] as f64 + x.iter().enumerate().map(|(j, &xj)| (xj * w[j * c + k]) as f64).sum::<f64>();
        }
        if argmax_lowest(&scores) == test.labels[i] as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseMetrics {
    /// Mean over dimensions of the std of L2-normalised rows.
    pub per_dim_std_mean: f64,
    /// `exp` of the entropy of the normalised singular-value spectrum.
    pub effective_rank: f64,
}

pub fn collapse_metrics(bank: &FeatureBank) -> Result<CollapseMetrics> {
    ensure!(bank.len() >= 2, "collapse metrics need at least two rows");
    let d = bank.dim;
    let n = bank.len();
    let rows: Vec<f64> = normalized(bank).into_iter().map(f64::from).collect();
    let mut mean = vec![0.0f64; d];
    for row in rows.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0f64; d];
    for row in rows.chunks(d) {
        for j in 0..d {
            var[j] += (row[j] - mean[j]).powi(2);
        }
    }
    let per_dim_std_mean = var.iter().map(|v| (v / n as f64).sqrt()).sum::<f64>() / d as f64;

    let x = DMatrix::from_row_slice(n, d, &rows);
    let gram = x.transpose() * &x;
    let sigma: Vec<f64> = SymmetricEigen::new(gram)
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .collect();
    let total: f64 = sigma.iter().sum();
    let effective_rank = if total <= 0.0 {
        1.0
    } else {
        let entropy: f64 = sigma
            .iter()
            .map(|s| s / total)
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum();
        entropy.exp()
    };
    Ok(CollapseMetrics {
        per_dim_std_mean,
        effective_rank,
    })
}

/// One row of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub objective: String,
    pub mode: String,
    #[serde(rename = "N")]
    pub n_views: usize,
    pub n_step: u64,
    pub seed: u64,
    pub knn_acc: Option<f64>,
    pub linear_acc: Option<f64>,
    pub per_dim_std_mean: f64,
    pub effective_rank: f64,
}

/// Append a row, writing the header first when the file is new or empty.
pub fn append_result(path: impl AsRef<Path>, row: &ResultRow) -> Result<()> {
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| HvpError::io(path, e))?;
    let mut wr = csv::WriterBuilder::new().has_headers(fresh).from_writer(f);
    wr.serialize(row)?;
    wr.flush().map_err(|e| HvpError::io(path, e))
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let mut rd = csv::Reader::from_path(path.as_ref())?;
    Ok(rd.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(dim: usize, rows: &[&[f32]], labels: &[u8], classes: usize) -> FeatureBank {
        FeatureBank::new(dim, rows.concat(), labels.to_vec(), classes).unwrap()
    }

    #[test]
    fn knn_self_neighbour() {
        let b = bank(2, &[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.2], &[0.3, -1.0]], &[0, 1, 2, 3], 4);
        assert_eq!(knn_eval(&b, &b, 1, 0.07).unwrap(), 1.0);
    }

    #[test]
    fn knn_hand_geometry() {
        // train: two class-0 points near +x, one class-1 point at +y, one
        // class-1 point near +x but further than the class-0 ones.
        let train = bank(
            2,
            &[&[1.0, 0.0], &[1.0, 0.1], &[0.0, 1.0], &[1.0, 0.5]],
            &[0, 0, 1, 1],
            2,
        );
        let test = bank(2, &[&[1.0, 0.45], &[0.2, 1.0]], &[1, 1], 2);
        // k=3 for (1,0.45): neighbours rows 3, 1, 0 → class 0 has two votes.
        let sims = |q: [f32; 2], r: [f32; 2]| {
            let n = |v: [f32; 2]| (v[0] * v[0] + v[1] * v[1]).sqrt();
            (q[0] * r[0] + q[1] * r[1]) / (n(q) * n(r))
        };
        let t = 0.5f32;
        let w = |s: f32| (s / t).exp();
        let c0 = w(sims([1.0, 0.45], [1.0, 0.0])) + w(sims([1.0, 0.45], [1.0, 0.1]));
        let c1 = w(sims([1.0, 0.45], [1.0, 0.5]));
        let first_correct = if c1 > c0 { 1.0 } else { 0.0 };
        let acc = knn_eval(&train, &test, 3, t).unwrap();
        assert_eq!(acc, (first_correct + 1.0) / 2.0);
    }

    #[test]
    fn knn_degenerate_features_use_lowest_class() {
        let rows: Vec<&[f32]> = vec![&[1.0, 1.0]; 6];
        let b = bank(2, &rows, &[0, 1, 2, 0, 1, 2], 3);
        assert!((knn_eval(&b, &b, 3, 0.07).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn knn_rejects_empty_and_oversized_k() {
        let b = bank(2, &[&[1.0, 0.0]], &[0], 1);
        let empty = FeatureBank::new(2, vec![], vec![], 1).unwrap();
        assert!(knn_eval(&empty, &b, 1, 0.1).is_err());
        assert!(knn_eval(&b, &b, 2, 0.1).is_err());
    }

    #[test]
    fn probe_separable_and_constant() {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let y = (i % 2) as u8;
            let s = if y == 0 { -1.0 } else { 1.0 };
            feats.extend_from_slice(&[s * (0.5 + (i % 7) as f32 * 0.1), (i % 5) as f32 * 0.3]);
            labels.push(y);
        }
        let b = FeatureBank::new(2, feats, labels, 2).unwrap();
        assert_eq!(linear_probe(&b, &b, &ProbeConfig::default()).unwrap(), 1.0);

        let labels: Vec<u8> = (0..100).map(|i| if i < 70 { 2 } else { (i % 2) as u8 }).collect();
        let zero = FeatureBank::new(4, vec![0.0; 400], labels, 3).unwrap();
        assert!((linear_probe(&zero, &zero, &ProbeConfig::default()).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn collapse_examples() {
        let same = bank(3, &[&[1.0f32, 2.0, 3.0][..]; 5], &[0; 5], 1);
        let m = collapse_metrics(&same).unwrap();
        assert!(m.per_dim_std_mean < 1e-7);
        assert!((m.effective_rank - 1.0).abs() < 1e-6);

        let d = 8;
        let mut eye = vec![0.0f32; d * d];
        (0..d).for_each(|i| eye[i * d + i] = 1.0);
        let b = FeatureBank::new(d, eye.clone(), vec![0; d], 1).unwrap();
        assert!((collapse_metrics(&b).unwrap().effective_rank - d as f64).abs() < 1e-6);

        let doubled = FeatureBank::new(d, [eye.clone(), eye].concat(), vec![0; 2 * d], 1).unwrap();
        assert!((collapse_metrics(&doubled).unwrap().effective_rank - d as f64).abs() < 1e-6);

        let zero = FeatureBank::new(4, vec![0.0; 12], vec![0; 3], 1).unwrap();
        assert_eq!(collapse_metrics(&zero).unwrap().effective_rank, 1.0);
    }

    #[test]
    fn results_csv_appends_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("results.csv");
        let row = ResultRow {
            run_id: "r".into(),
            objective: "simsiam".into(),
            mode: "adversarial".into(),
            n_views: 4,
            n_step: 1,
            seed: 0,
            knn_acc: Some(0.5),
            linear_acc: None,
            per_dim_std_mean: 0.1,
            effective_rank: 3.0,
        };
        append_result(&p, &row).unwrap();
        append_result(&p, &row).unwrap();
        let back = read_results(&p).unwrap();
        assert_eq!(back, vec![row.clone(), row]);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("run_id,objective,mode,N,n_step,seed,knn_acc,linear_acc"));
    }
}
