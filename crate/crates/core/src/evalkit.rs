//! Retrieval metrics, probes, geo-aware fusion and similarity heatmaps.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Real, Tensor};
use crate::datagen::{make_batch, Augment, TripleRecord};
use crate::error::{Error, Result};
use crate::geo::{GeoFootprint, GeoPoint};
use crate::init;
use crate::model::Model;
use crate::objectives::NORM_CONTRACT_TOL;
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, Domain};
use crate::training::{AdamW, AdamWConfig};

/// Rows per inference graph when embedding a split.
pub const EMBED_CHUNK: usize = 64;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

fn check_unit_rows(name: &str, t: &Tensor<f64>) -> Result<()> {
    for i in 0..t.rows() {
        let n = dot(t.row(i), t.row(i)).sqrt();
        if (n - 1.0).abs() > NORM_CONTRACT_TOL {
            return Err(Error::Contract(format!("{name} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalMetrics {
    /// `(k, recall@k)` in the order requested.
    pub recall: Vec<(usize, f64)>,
    pub median_rank: f64,
    /// 1-based rank of the true candidate for each query.
    pub ranks: Vec<usize>,
}

impl RetrievalMetrics {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

/// Ranks candidates by cosine similarity; ties go to the lower candidate index.
pub fn retrieval_metrics(
    queries: &Tensor<f64>,
    candidates: &Tensor<f64>,
    truth: &[usize],
    ks: &[usize],
) -> Result<RetrievalMetrics> {
    if candidates.ndim() != 2 || queries.ndim() != 2 {
        return Err(Error::Contract("retrieval expects [n, D] matrices".into()));
    }
    let m = candidates.rows();
    if queries.shape()[1] != candidates.shape()[1] {
        return Err(Error::Shape {
            op: "retrieval_metrics",
            lhs: queries.shape().to_vec(),
            rhs: candidates.shape().to_vec(),
        });
    }
    if truth.len() != queries.rows() || truth.is_empty() {
        return Err(Error::Contract(format!(
            "{} truth indices for {} queries",
            truth.len(),
            queries.rows()
        )));
    }
    if let Some(&bad) = truth.iter().find(|&&t| t >= m) {
        return Err(Error::Index { index: bad, len: m });
    }
    check_unit_rows("query", queries)?;
    check_unit_rows("candidate", candidates)?;
    let ranks: Vec<usize> = truth
        .par_iter()
        .enumerate()
        .map(|(i, &t)| {
            let q = queries.row(i);
            let st = dot(q, candidates.row(t));
            1 + (0..m)
                .filter(|&j| {
                    let s = dot(q, candidates.row(j));
                    s > st || (s == st && j < t)
                })
                .count()
        })
        .collect();
    let n = ranks.len() as f64;
    let recall = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    let median_rank = if sorted.len() % 2 == 1 {
        sorted[mid] as f64
    } else {
        (sorted[mid - 1] + sorted[mid]) as f64 / 2.0
    };
    Ok(RetrievalMetrics {
        recall,
        median_rank,
        ranks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Linear,
    Nonlinear,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Class { labels: Vec<usize>, classes: usize },
    Value(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Class { labels, .. } => labels.len(),
            Labels::Value(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn outputs(&self) -> usize {
        match self {
            Labels::Class { classes, .. } => *classes,
            Labels::Value(_) => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub hidden: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-2,
            hidden: 64,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// A trained head. Weights are `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub enum ProbeHead {
    Linear { w: Tensor<f64>, b: Tensor<f64> },
    Nonlinear {
        w1: Tensor<f64>,
        b1: Tensor<f64>,
        w2: Tensor<f64>,
        b2: Tensor<f64>,
    },
}

fn affine(w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    (0..w.shape()[0]).map(|o| dot(w.row(o), x) + b.data()[o]).collect()
}

impl ProbeHead {
    pub fn input_dim(&self) -> usize {
        match self {
            ProbeHead::Linear { w, .. } | ProbeHead::Nonlinear { w1: w, .. } => w.shape()[1],
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                op: "probe_head",
                lhs: vec![x.len()],
                rhs: vec![self.input_dim()],
            });
        }
        Ok(match self {
            ProbeHead::Linear { w, b } => affine(w, b, x),
            ProbeHead::Nonlinear { w1, b1, w2, b2 } => {
                let h: Vec<f64> = affine(w1, b1, x)
                    .into_iter()
                    .map(|v| 1.0 / (1.0 + (-v).exp()))
                    .collect();
                affine(w2, b2, &h)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub head: ProbeHead,
    /// `"accuracy"` or `"rmse"`.
    pub metric: &'static str,
    pub value: f64,
    pub final_loss: f64,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains a head on frozen embeddings with full-batch AdamW and scores it on
/// the test split.
pub fn fit_probe(
    train_x: &Tensor<f64>,
    train_y: &Labels,
    test_x: &Tensor<f64>,
    test_y: &Labels,
    kind: ProbeKind,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train_x.ndim() != 2 || test_x.ndim() != 2 || train_x.shape()[1] != test_x.shape()[1] {
        return Err(Error::Shape {
            op: "fit_probe",
            lhs: train_x.shape().to_vec(),
            rhs: test_x.shape().to_vec(),
        });
    }
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() {
        return Err(Error::Contract(format!(
            "label count mismatch: {} embeddings vs {} labels, {} vs {}",
            train_x.rows(),
            train_y.len(),
            test_x.rows(),
            test_y.len()
        )));
    }
    if train_y.is_empty() || test_y.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (n, d) = (train_x.rows(), train_x.shape()[1]);
    let k = train_y.outputs();
    let mut rng = rng::stream(cfg.seed, Domain::Probe, 0);
    let mut store = ParamStore::<f64>::new();
    let mut affine_param = |store: &mut ParamStore<f64>, name: &str, fan_in: usize, fan_out: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.weight"), init::uniform(&mut rng, &[fan_out, fan_in], bound), true);
        let b = store.add(format!("{name}.bias"), init::uniform(&mut rng, &[fan_out], bound), true);
        (w, b)
    };
    let layers: Vec<(ParamId, ParamId)> = match kind {
        ProbeKind::Linear => vec![affine_param(&mut store, "probe.fc", d, k)],
        ProbeKind::Nonlinear => vec![
            affine_param(&mut store, "probe.fc1", d, cfg.hidden),
            affine_param(&mut store, "probe.fc2", cfg.hidden, k),
        ],
    };
    let target = match train_y {
        Labels::Class { labels, classes } => {
            if let Some(&bad) = labels.iter().find(|&&c| c >= *classes) {
                return Err(Error::Index { index: bad, len: *classes });
            }
            Tensor::from_fn(&[n, k], |i| (labels[i / k] == i % k) as u8 as f64)
        }
        Labels::Value(v) => Tensor::new(vec![n, 1], v.clone())?,
    };
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &store,
    );
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let x = g.constant(train_x.clone());
        let mut h = x;
        for (li, &(w, b)) in layers.iter().enumerate() {
            let wv = g.param(&store, w);
            let bv = g.param(&store, b);
            h = g.linear(h, wv, Some(bv))?;
            if li + 1 < layers.len() {
                h = g.sigmoid(h);
            }
        }
        let t = g.constant(target.clone());
        let loss = match train_y {
            Labels::Class { .. } => {
                let lp = g.log_softmax_rows(h)?;
                let picked = g.mul(lp, t)?;
                let s = g.sum_all(picked);
                g.scale(s, -1.0 / n as f64)
            }
            Labels::Value(_) => {
                let diff = g.sub(h, t)?;
                let sq = g.mul(diff, diff)?;
                g.mean_all(sq)
            }
        };
        final_loss = g.value(loss).item();
        if !final_loss.is_finite() {
            return Err(Error::Numeric(format!("probe loss became {final_loss}")));
        }
        g.backward(loss)?;
        let mut grads: Vec<Option<Tensor<f64>>> = vec![None; store.len()];
        for (id, v) in g.bound_params() {
            grads[id.index()] = g.grad(v).cloned();
        }
        opt.step(&mut store, &grads, cfg.lr)?;
    }
    let head = match layers.as_slice() {
        [(w, b)] => ProbeHead::Linear {
            w: store.value(*w).clone(),
            b: store.value(*b).clone(),
        },
        [(w1, b1), (w2, b2)] => ProbeHead::Nonlinear {
            w1: store.value(*w1).clone(),
            b1: store.value(*b1).clone(),
            w2: store.value(*w2).clone(),
            b2: store.value(*b2).clone(),
        },
        _ => unreachable!("one or two layers"),
    };
    let preds: Vec<Vec<f64>> = (0..test_x.rows())
        .map(|i| head.predict(test_x.row(i)))
        .collect::<Result<_>>()?;
    let (metric, value) = match test_y {
        Labels::Class { labels, .. } => {
            let hits = preds.iter().zip(labels).filter(|(p, &c)| argmax(p) == c).count();
            ("accuracy", hits as f64 / labels.len() as f64)
        }
        Labels::Value(v) => {
            let mse = preds.iter().zip(v).map(|(p, y)| (p[0] - y).powi(2)).sum::<f64>() / v.len() as f64;
            ("rmse", mse.sqrt())
        }
    };
    Ok(ProbeResult {
        head,
        metric,
        value,
        final_loss,
    })
}

/// SHA-256 over every parameter's name and value bytes.
pub fn param_fingerprint<R: Real>(store: &ParamStore<R>) -> [u8; 32] {
    let mut h = Sha256::new();
    for (_, p) in store.iter() {
        h.update(p.name.as_bytes());
        for x in p.value.data() {
            h.update(x.as_f64().to_le_bytes());
        }
    }
    h.finalize().into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeoAwarePrediction {
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub argmax: usize,
}

/// Fuses an image-branch and a location-branch log-probability vector.
pub fn geo_aware_predict(log_p_image: &[f64], log_p_loc: &[f64]) -> Result<GeoAwarePrediction> {
    if log_p_image.len() != log_p_loc.len() || log_p_image.is_empty() {
        return Err(Error::Shape {
            op: "geo_aware_predict",
            lhs: vec![log_p_image.len()],
            rhs: vec![log_p_loc.len()],
        });
    }
    if !log_p_image.iter().chain(log_p_loc).all(|x| x.is_finite()) {
        return Err(Error::Domain {
            op: "geo_aware_predict",
            detail: "log-probabilities must be finite".into(),
        });
    }
    let scores: Vec<f64> = log_p_image.iter().zip(log_p_loc).map(|(a, b)| a + b).collect();
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
    let probabilities = scores.iter().map(|s| (s - m).exp() / z).collect();
    Ok(GeoAwarePrediction {
        argmax: argmax(&scores),
        scores,
        probabilities,
    })
}

/// Regression from concatenated image and location embeddings.
pub fn geo_regression(image_emb: &[f64], loc_emb: &[f64], head: &ProbeHead) -> Result<f64> {
    let x: Vec<f64> = image_emb.iter().chain(loc_emb).copied().collect();
    let out = head.predict(&x)?;
    if out.len() != 1 {
        return Err(Error::Contract(format!("regression head has {} outputs", out.len())));
    }
    Ok(out[0])
}

/// Row-wise concatenation of two `[n, *]` matrices.
pub fn concat_features(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
    if a.rows() != b.rows() {
        return Err(Error::Shape {
            op: "concat_features",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (da, db) = (a.shape()[1], b.shape()[1]);
    let mut out = Vec::with_capacity(a.rows() * (da + db));
    for i in 0..a.rows() {
        out.extend_from_slice(a.row(i));
        out.extend_from_slice(b.row(i));
    }
    Tensor::new(vec![a.rows(), da + db], out)
}

/// Square mesh of `(2 * half + 1)^2` cells centered on a point; row 0 is north.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub center: GeoPoint,
    pub resolution_deg: f64,
    pub half: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeatmapGrid {
    /// Center of the north-west cell, degrees.
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub resolution_deg: f64,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl HeatmapGrid {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    /// Highest cell, ties to the lowest raster index.
    pub fn argmax(&self) -> (usize, usize) {
        let k = argmax(&self.values);
        (k / self.cols, k % self.cols)
    }

    pub fn cell_point(&self, i: usize, j: usize) -> Result<GeoPoint> {
        GeoPoint::from_degrees(
            self.origin_lon + j as f64 * self.resolution_deg,
            self.origin_lat - i as f64 * self.resolution_deg,
        )
    }

    /// Cell containing a point (nearest center), if any.
    pub fn cell_of(&self, p: GeoPoint) -> Option<(usize, usize)> {
        let j = ((p.lon_deg() - self.origin_lon) / self.resolution_deg).round();
        let i = ((self.origin_lat - p.lat_deg()) / self.resolution_deg).round();
        (i >= 0.0 && j >= 0.0 && (i as usize) < self.rows && (j as usize) < self.cols)
            .then_some((i as usize, j as usize))
    }

    fn points(&self) -> Result<Vec<GeoPoint>> {
        (0..self.rows * self.cols)
            .map(|k| self.cell_point(k / self.cols, k % self.cols))
            .collect()
    }
}

fn check_resolution(res: f64) -> Result<()> {
    if !(res > 0.0 && res.is_finite()) {
        return Err(Error::Domain {
            op: "heatmap",
            detail: format!("resolution must be positive, got {res}"),
        });
    }
    Ok(())
}

/// Cosine similarity between a street-view embedding and location embeddings
/// over a mesh.
pub fn heatmap_loc<R: Real>(model: &Model, store: &ParamStore<R>, sv_emb: &[f64], spec: &GridSpec) -> Result<HeatmapGrid> {
    check_resolution(spec.resolution_deg)?;
    let n = 2 * spec.half + 1;
    let mut grid = HeatmapGrid {
        origin_lon: spec.center.lon_deg() - spec.half as f64 * spec.resolution_deg,
        origin_lat: spec.center.lat_deg() + spec.half as f64 * spec.resolution_deg,
        resolution_deg: spec.resolution_deg,
        rows: n,
        cols: n,
        values: Vec::new(),
    };
    let points = grid.points()?;
    grid.values = points
        .par_chunks(256)
        .map(|chunk| -> Result<Vec<f64>> {
            let mut g = Graph::inference();
            let e = model.loc_embed(&mut g, store, chunk)?;
            let e = g.value(e).cast::<f64>();
            Ok((0..chunk.len()).map(|i| cosine(sv_emb, e.row(i))).collect())
        })
        .collect::<Result<Vec<_>>>()?
        .concat();
    Ok(grid)
}

/// Cosine similarity between a street-view embedding and implicit lookups
/// into one remote-sensing image over its footprint. Cells are spaced by the
/// resolution and centered on the footprint.
pub fn heatmap_inr<R: Real>(
    model: &Model,
    store: &ParamStore<R>,
    rs: &Tensor<R>,
    footprint: &GeoFootprint,
    sv_emb: &[f64],
    resolution_deg: f64,
) -> Result<HeatmapGrid> {
    check_resolution(resolution_deg)?;
    let (lo0, lo1, la0, la1) = (
        footprint.lon_min.to_degrees(),
        footprint.lon_max.to_degrees(),
        footprint.lat_min.to_degrees(),
        footprint.lat_max.to_degrees(),
    );
    // Tolerate round-off so a 0.02 deg span at 0.01 deg gives two cells, not one.
    let cells = |span: f64| ((span / resolution_deg + 1e-6).floor() as usize).max(1);
    let (cols, rows) = (cells(lo1 - lo0), cells(la1 - la0));
    let mut grid = HeatmapGrid {
        origin_lon: 0.5 * (lo0 + lo1) - (cols - 1) as f64 * 0.5 * resolution_deg,
        origin_lat: 0.5 * (la0 + la1) + (rows - 1) as f64 * 0.5 * resolution_deg,
        resolution_deg,
        rows,
        cols,
        values: Vec::new(),
    };
    let queries = grid
        .points()?
        .into_iter()
        .map(|p| Ok((0, footprint.to_local(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::inference();
    let um = model.rs_unfolded(&mut g, store, rs)?;
    let z = crate::inr::inr_lookup(&mut g, store, &model.ftheta, um, &queries, crate::inr::Lookup::Ensemble, true)?;
    let z = g.value(z).cast::<f64>();
    grid.values = (0..queries.len()).map(|i| cosine(sv_emb, z.row(i))).collect();
    Ok(grid)
}

/// Affine map of `[-1, 1]` onto `0..=255`.
pub fn pgm_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn write_pgm(path: &Path, grid: &HeatmapGrid) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", grid.cols, grid.rows).into_bytes();
    buf.extend(grid.values.iter().map(|&v| pgm_byte(v)));
    crate::datagen::write_file(path, &buf)
}

pub fn write_csv(path: &Path, grid: &HeatmapGrid) -> Result<()> {
    let mut buf = Vec::new();
    for i in 0..grid.rows {
        let line: Vec<String> = (0..grid.cols).map(|j| format!("{}", grid.get(i, j))).collect();
        writeln!(buf, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    crate::datagen::write_file(path, &buf)
}

/// Held-out embeddings: street view `s`, lookup at the true location `z` and
/// location `e`, all `[n, D]`. Uses temporal variant 0 and no flip.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitEmbeddings {
    pub s: Tensor<f64>,
    pub z: Tensor<f64>,
    pub e: Tensor<f64>,
}

pub fn embed_split<R: Real>(
    model: &Model,
    store: &ParamStore<R>,
    records: &[TripleRecord],
    indices: &[usize],
) -> Result<SplitEmbeddings> {
    if indices.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let d = model.cfg.embed_dim;
    let parts = indices
        .par_chunks(EMBED_CHUNK)
        .map(|chunk| -> Result<[Vec<f64>; 3]> {
            let mut rng = rng::stream(0, Domain::Eval, 0);
            let batch = make_batch::<R>(records, chunk, &mut rng, Augment::NONE)?;
            let mut g = Graph::inference();
            let emb = model.embed_batch(&mut g, store, &batch)?;
            let grab = |v| g.value(v).cast::<f64>().into_data();
            Ok([grab(emb.s), grab(emb.z), grab(emb.e)])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for p in parts {
        for (o, v) in out.iter_mut().zip(p) {
            o.extend(v);
        }
    }
    let n = indices.len();
    let [s, z, e] = out;
    Ok(SplitEmbeddings {
        s: Tensor::new(vec![n, d], s)?,
        z: Tensor::new(vec![n, d], z)?,
        e: Tensor::new(vec![n, d], e)?,
    })
}

/// One line of a metrics report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub task: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub config: serde_json::Value,
    pub config_hash: String,
    pub metrics: Vec<MetricRecord>,
}

impl Report {
    pub fn new(config: &crate::config::RunConfig) -> Self {
        Self {
            config: serde_json::to_value(config).expect("config serializes"),
            config_hash: config.hash_hex(),
            metrics: Vec::new(),
        }
    }

    pub fn push(&mut self, task: &str, split: &str, metric: &str, value: f64) {
        self.metrics.push(MetricRecord {
            task: task.into(),
            split: split.into(),
            metric: metric.into(),
            value,
            config_hash: self.config_hash.clone(),
        });
    }

    pub fn get(&self, task: &str, metric: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.task == task && m.metric == metric)
            .map(|m| m.value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
