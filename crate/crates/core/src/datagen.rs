//! Synthetic geo-paired triples with a planted cross-modal signal, their
//! binary persistence, and batch assembly with augmentation.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::geo::{GeoFootprint, GeoPoint, LocalCoord};
use crate::rng::{self, Domain};

pub const BLOB_MAGIC: &[u8; 8] = b"GARBLOB1";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "records.bin";
const BLOB_HEADER: u64 = 8 + 4 + 8;
const BALANCE_RANGE: (f64, f64) = (0.35, 0.65);
const MAX_WORLD_ATTEMPTS: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub count: usize,
    /// `[lon_min, lon_max, lat_min, lat_max]` in degrees.
    pub region_deg: [f64; 4],
    pub footprint_deg: f64,
    pub rs_size: usize,
    pub rs_channels: usize,
    pub sv_size: usize,
    pub temporal: usize,
    /// Feature-grid size used to keep locations inside the lookup hull.
    pub grid: usize,
    pub modes: usize,
    /// Mode frequency magnitudes are drawn from `U[freq_min, freq_max]`, cycles per degree.
    pub freq_min: f64,
    pub freq_max: f64,
    pub sigma_rs: f64,
    pub sigma_sv: f64,
    pub sigma_temporal: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            count: 2000,
            region_deg: [-0.5, 0.5, 51.0, 52.0],
            footprint_deg: 0.02,
            rs_size: 32,
            rs_channels: 3,
            sv_size: 16,
            temporal: 4,
            grid: 8,
            modes: 12,
            freq_min: 3.0,
            freq_max: 8.0,
            sigma_rs: 0.1,
            sigma_sv: 0.2,
            sigma_temporal: 0.05,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo0, lo1, la0, la1] = self.region_deg;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.count == 0 {
            return bad("count must be positive");
        }
        if !(lo1 - lo0 > self.footprint_deg) || !(la1 - la0 > self.footprint_deg) {
            return bad("region must be larger than the footprint");
        }
        if !(self.footprint_deg > 0.0) {
            return bad("footprint must be positive");
        }
        if self.rs_channels < 2 {
            return bad("remote-sensing images need at least 2 channels");
        }
        if self.rs_size == 0 || self.sv_size == 0 || self.temporal == 0 {
            return bad("image sizes and temporal variant count must be positive");
        }
        if self.grid < 2 {
            return bad("grid must be at least 2");
        }
        if !(self.freq_min >= 0.0 && self.freq_max >= self.freq_min) {
            return bad("need 0 <= freq_min <= freq_max");
        }
        if [self.sigma_rs, self.sigma_sv, self.sigma_temporal]
            .iter()
            .any(|s| !(*s >= 0.0))
        {
            return bad("noise levels must be nonnegative");
        }
        GeoFootprint::from_degrees(lo0, lo1, la0, la1)?;
        Ok(())
    }

    pub fn rs_shape(&self) -> [usize; 4] {
        [self.temporal, self.rs_channels, self.rs_size, self.rs_size]
    }

    pub fn sv_shape(&self) -> [usize; 3] {
        [1, self.sv_size, self.sv_size]
    }

    pub fn record_bytes(&self) -> u64 {
        let rs: usize = self.rs_shape().iter().product();
        let sv: usize = self.sv_shape().iter().product();
        (4 * (rs + sv) + 8 * 2 + 8 * 4 + 4 + 8) as u64
    }
}

/// One Fourier mode `a sin(2 pi f . (lon, lat) + phase)`, coordinates in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub amplitude: f64,
    pub freq: [f64; 2],
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    pub config: WorldConfig,
    pub modes: Vec<Mode>,
}

impl WorldModel {
    /// Draws modes from the seed; redraws until the sign of the field is balanced.
    pub fn generate(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        for attempt in 0..MAX_WORLD_ATTEMPTS {
            let mut rng = rng::stream(config.seed, Domain::World, attempt);
            let k = config.modes;
            let amp_std = if k > 0 { (2.0 / k as f64).sqrt() } else { 0.0 };
            let modes = (0..k)
                .map(|_| {
                    let amplitude = amp_std * rng.sample::<f64, _>(StandardNormal);
                    let mag = config.freq_min + (config.freq_max - config.freq_min) * rng.random::<f64>();
                    let ang = 2.0 * PI * rng.random::<f64>();
                    let phase = 2.0 * PI * rng.random::<f64>();
                    Mode {
                        amplitude,
                        freq: [mag * ang.cos(), mag * ang.sin()],
                        phase,
                    }
                })
                .collect();
            let world = Self::from_modes(config.clone(), modes)?;
            let frac = world.positive_fraction(64);
            if (BALANCE_RANGE.0..=BALANCE_RANGE.1).contains(&frac) {
                return Ok(world);
            }
        }
        Err(Error::Config("could not draw a sign-balanced field".into()))
    }

    pub fn from_modes(config: WorldConfig, modes: Vec<Mode>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, modes })
    }

    pub fn region(&self) -> GeoFootprint {
        let [a, b, c, d] = self.config.region_deg;
        GeoFootprint::from_degrees(a, b, c, d).expect("validated region")
    }

    /// Field value at a point given in degrees, without a region check.
    pub fn field_deg(&self, lon: f64, lat: f64) -> f64 {
        self.modes
            .iter()
            .map(|m| m.amplitude * (2.0 * PI * (m.freq[0] * lon + m.freq[1] * lat) + m.phase).sin())
            .sum()
    }

    /// Gradient of the field per degree, `(d/dlon, d/dlat)`.
    pub fn gradient_deg(&self, lon: f64, lat: f64) -> [f64; 2] {
        self.modes.iter().fold([0.0, 0.0], |acc, m| {
            let c = m.amplitude * 2.0 * PI * (2.0 * PI * (m.freq[0] * lon + m.freq[1] * lat) + m.phase).cos();
            [acc[0] + c * m.freq[0], acc[1] + c * m.freq[1]]
        })
    }

    pub fn sample_field(&self, p: GeoPoint) -> Result<f64> {
        if !self.region().contains(p) {
            return Err(Error::OutOfFootprint {
                lon: p.lon(),
                lat: p.lat(),
            });
        }
        Ok(self.field_deg(p.lon_deg(), p.lat_deg()))
    }

    /// Fraction of a regular `n x n` grid over the region where the field is positive.
    pub fn positive_fraction(&self, n: usize) -> f64 {
        let [lo0, lo1, la0, la1] = self.config.region_deg;
        let mut pos = 0;
        for i in 0..n {
            for j in 0..n {
                let lon = lo0 + (j as f64 + 0.5) / n as f64 * (lo1 - lo0);
                let lat = la0 + (i as f64 + 0.5) / n as f64 * (la1 - la0);
                pos += (self.field_deg(lon, lat) > 0.0) as usize;
            }
        }
        pos as f64 / (n * n) as f64
    }

    /// Typical gradient magnitude, used to scale street-view contrast.
    pub fn gradient_scale(&self) -> f64 {
        let k = self.modes.len();
        if k == 0 {
            return 0.0;
        }
        let mean_abs = self.modes.iter().map(|m| m.amplitude.abs()).sum::<f64>() / k as f64;
        2.0 * PI * 0.5 * (self.config.freq_min + self.config.freq_max) * (k as f64 / 2.0).sqrt() * mean_abs
    }

    /// Noise-free street-view pattern for a field value and gradient: a
    /// separable product of cosines whose overall frequency encodes `F`, whose
    /// horizontal and vertical frequencies split it by the gradient angle and
    /// whose contrast encodes the gradient magnitude. The pattern is symmetric
    /// under a horizontal flip, so flipped views still show the same place.
    /// Row 0 is the top.
    pub fn render_sv(&self, f: f64, grad: [f64; 2]) -> Vec<f64> {
        let n = self.config.sv_size;
        let omega = PI * (1.5 + f.tanh());
        let theta = grad[1].atan2(grad[0]);
        let scale = self.gradient_scale();
        let mag = grad[0].hypot(grad[1]);
        let contrast = if scale > 0.0 { 0.3 + 0.7 * (mag / scale).tanh() } else { 0.3 };
        let (ct, st) = (theta.cos(), theta.sin());
        let coord = |k: usize| (k as f64 + 0.5) / n as f64 * 2.0 - 1.0;
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            let y = -coord(i);
            for j in 0..n {
                let x = coord(j);
                out.push(contrast * (omega * x * ct).cos() * (omega * y * st).cos());
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripleRecord {
    /// `[T, C, H, W]`, row 0 north.
    pub rs: Tensor<f32>,
    /// `[1, H_sv, W_sv]`.
    pub sv: Tensor<f32>,
    pub loc: GeoPoint,
    pub footprint: GeoFootprint,
    pub label_class: u32,
    pub label_reg: f64,
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates record `index`; depends only on the world and the index.
pub fn gen_triple(world: &WorldModel, index: u64) -> Result<TripleRecord> {
    let cfg = &world.config;
    let mut rng = rng::stream(cfg.seed, Domain::Record, index);
    let [lo0, lo1, la0, la1] = cfg.region_deg;
    let fp = cfg.footprint_deg;
    let flon = lo0 + rng.random::<f64>() * (lo1 - lo0 - fp);
    let flat = la0 + rng.random::<f64>() * (la1 - la0 - fp);
    let footprint = GeoFootprint::from_degrees(flon, flon + fp, flat, flat + fp)?;

    let h = cfg.rs_size;
    let c = cfg.rs_channels;
    let mut base = vec![0.0f64; c * h * h];
    for i in 0..h {
        let lat = flat + fp - (i as f64 + 0.5) / h as f64 * fp;
        for j in 0..h {
            let lon = flon + (j as f64 + 0.5) / h as f64 * fp;
            let f = world.field_deg(lon, lat);
            base[i * h + j] = f + cfg.sigma_rs * normal(&mut rng);
            base[(h + i) * h + j] = f.tanh().powi(2) + cfg.sigma_rs * normal(&mut rng);
        }
    }
    for v in base[2 * h * h..].iter_mut() {
        *v = normal(&mut rng);
    }
    let mut rs = Vec::with_capacity(cfg.temporal * base.len());
    for _ in 0..cfg.temporal {
        rs.extend(base.iter().map(|&b| (b + cfg.sigma_temporal * normal(&mut rng)) as f32));
    }

    let margin = 1.0 - 1.0 / cfg.grid as f64;
    let u = margin * (2.0 * rng.random::<f64>() - 1.0);
    let v = margin * (2.0 * rng.random::<f64>() - 1.0);
    let lon = flon + (u + 1.0) * 0.5 * fp;
    let lat = flat + (v + 1.0) * 0.5 * fp;
    let loc = GeoPoint::from_degrees(lon, lat)?;
    let (lon, lat) = (loc.lon_deg(), loc.lat_deg());
    let f = world.field_deg(lon, lat);
    let grad = world.gradient_deg(lon, lat);
    let sv: Vec<f32> = world
        .render_sv(f, grad)
        .into_iter()
        .map(|x| (x + cfg.sigma_sv * normal(&mut rng)) as f32)
        .collect();

    Ok(TripleRecord {
        rs: Tensor::new(cfg.rs_shape().to_vec(), rs)?,
        sv: Tensor::new(cfg.sv_shape().to_vec(), sv)?,
        loc,
        footprint,
        label_class: (f > 0.0) as u32,
        label_reg: f,
    })
}

/// Records `0..count`, generated in parallel over independent streams.
pub fn gen_dataset(world: &WorldModel) -> Result<Vec<TripleRecord>> {
    (0..world.config.count as u64)
        .into_par_iter()
        .map(|i| gen_triple(world, i))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shapes {
    pub rs: Vec<usize>,
    pub sv: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub count: usize,
    pub blob: String,
    pub magic: String,
    pub record_bytes: u64,
    pub record_layout: String,
    pub shapes: Shapes,
    pub offsets: Vec<u64>,
    pub rng: String,
    pub world: WorldModel,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<TripleRecord>,
}

const RECORD_LAYOUT: &str = "rs f32[T*C*H*W], sv f32[1*Hsv*Wsv], lon f64, lat f64 (radians), \
footprint f64[lon_min, lon_max, lat_min, lat_max] (radians), label_class u32, label_reg f64; \
all little-endian; blob header = magic[8], version u32, count u64";

fn check_record_shapes(world: &WorldModel, r: &TripleRecord) -> Result<()> {
    let cfg = &world.config;
    if r.rs.shape() != cfg.rs_shape() || r.sv.shape() != cfg.sv_shape() {
        return Err(Error::Shape {
            op: "write_dataset",
            lhs: r.rs.shape().to_vec(),
            rhs: cfg.rs_shape().to_vec(),
        });
    }
    Ok(())
}

/// Writes `manifest.json` and `records.bin` into `dir`; returns the manifest path.
pub fn write_dataset(world: &WorldModel, records: &[TripleRecord], dir: &Path) -> Result<PathBuf> {
    if records.is_empty() {
        return Err(Error::EmptyBatch);
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let record_bytes = world.config.record_bytes();
    let mut blob = Vec::with_capacity((BLOB_HEADER + record_bytes * records.len() as u64) as usize);
    blob.extend_from_slice(BLOB_MAGIC);
    blob.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    blob.extend_from_slice(&(records.len() as u64).to_le_bytes());
    let mut offsets = Vec::with_capacity(records.len());
    for r in records {
        check_record_shapes(world, r)?;
        offsets.push(blob.len() as u64);
        for x in r.rs.data().iter().chain(r.sv.data()) {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        let fp = r.footprint;
        for x in [r.loc.lon(), r.loc.lat(), fp.lon_min, fp.lon_max, fp.lat_min, fp.lat_max] {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        blob.extend_from_slice(&r.label_class.to_le_bytes());
        blob.extend_from_slice(&r.label_reg.to_le_bytes());
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        count: records.len(),
        blob: BLOB_FILE.to_string(),
        magic: String::from_utf8_lossy(BLOB_MAGIC).into_owned(),
        record_bytes,
        record_layout: RECORD_LAYOUT.to_string(),
        shapes: Shapes {
            rs: world.config.rs_shape().to_vec(),
            sv: world.config.sv_shape().to_vec(),
        },
        offsets,
        rng: rng::ALGORITHM.to_string(),
        world: world.clone(),
    };
    let blob_path = dir.join(BLOB_FILE);
    write_file(&blob_path, &blob)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_file(&manifest_path, &json)?;
    Ok(manifest_path)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

/// Little-endian cursor that reports the byte offset of any short read.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, have {}", self.remaining()),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.bytes(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Reads a dataset from its manifest path or its directory.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&text)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.version,
            expected: FORMAT_VERSION,
        });
    }
    manifest.world.config.validate()?;
    let cfg = &manifest.world.config;
    if manifest.record_bytes != cfg.record_bytes()
        || manifest.shapes.rs != cfg.rs_shape()
        || manifest.shapes.sv != cfg.sv_shape()
        || manifest.offsets.len() != manifest.count
    {
        return Err(Error::Format {
            offset: 0,
            detail: "manifest shapes, sizes or offsets disagree with its configuration".into(),
        });
    }
    let blob_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let records = decode_blob(&manifest, &blob)?;
    Ok(Dataset { manifest, records })
}

fn decode_blob(manifest: &DatasetManifest, blob: &[u8]) -> Result<Vec<TripleRecord>> {
    let cfg = &manifest.world.config;
    let mut r = Reader::new(blob);
    let magic = r.bytes(8, "magic")?;
    if magic != BLOB_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count_at = r.offset();
    let count = r.u64("record count")?;
    if count != manifest.count as u64 {
        return Err(Error::format(
            count_at,
            format!("blob holds {count} records, manifest declares {}", manifest.count),
        ));
    }
    let rs_n: usize = cfg.rs_shape().iter().product();
    let sv_n: usize = cfg.sv_shape().iter().product();
    let mut records = Vec::with_capacity(manifest.count);
    for (i, &expected) in manifest.offsets.iter().enumerate() {
        if r.offset() != expected {
            return Err(Error::format(
                r.offset(),
                format!("record {i} starts at {} but the manifest says {expected}", r.offset()),
            ));
        }
        let rs = r.f32s(rs_n, "rs tensor")?;
        let sv = r.f32s(sv_n, "sv tensor")?;
        let at = r.offset();
        let lon = r.f64("lon")?;
        let lat = r.f64("lat")?;
        let fp = [r.f64("footprint")?, r.f64("footprint")?, r.f64("footprint")?, r.f64("footprint")?];
        let label_class = r.u32("label_class")?;
        let label_reg = r.f64("label_reg")?;
        let bad = |e: Error| Error::format(at, format!("record {i}: {e}"));
        let loc = GeoPoint::new(lon, lat).map_err(bad)?;
        let footprint = GeoFootprint::new(fp[0], fp[1], fp[2], fp[3]).map_err(bad)?;
        if !footprint.contains(loc) {
            return Err(Error::format(at, format!("record {i}: location outside its footprint")));
        }
        records.push(TripleRecord {
            rs: Tensor::new(cfg.rs_shape().to_vec(), rs)?,
            sv: Tensor::new(cfg.sv_shape().to_vec(), sv)?,
            loc,
            footprint,
            label_class,
            label_reg,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::format(
            r.offset(),
            format!("{} trailing bytes after the last record", r.remaining()),
        ));
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub temporal: bool,
    pub flip: bool,
}

impl Augment {
    pub const NONE: Augment = Augment {
        temporal: false,
        flip: false,
    };
    pub const TRAIN: Augment = Augment {
        temporal: true,
        flip: true,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripleBatch<R> {
    /// `[B, C, H, W]`
    pub rs: Tensor<R>,
    /// `[B, 1, H_sv, W_sv]`
    pub sv: Tensor<R>,
    pub locs: Vec<GeoPoint>,
    /// Query coordinates inside each (possibly flipped) image.
    pub local: Vec<LocalCoord>,
    pub indices: Vec<usize>,
    pub flipped: Vec<bool>,
    pub variants: Vec<usize>,
}

impl<R> TripleBatch<R> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Reverses the last axis of a `[..., H, W]` buffer.
pub fn flip_horizontal<T: Copy>(data: &[T], width: usize) -> Vec<T> {
    data.chunks(width)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

/// Stacks records into a batch. Per sample, in order: one draw choosing the
/// temporal variant, one coin deciding a joint horizontal flip of both images.
pub fn make_batch<R: Real>(
    records: &[TripleRecord],
    indices: &[usize],
    rng: &mut impl Rng,
    augment: Augment,
) -> Result<TripleBatch<R>> {
    if indices.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let first = records
        .get(indices[0])
        .ok_or(Error::Index {
            index: indices[0],
            len: records.len(),
        })?;
    let [t, c, h, w] = <[usize; 4]>::try_from(first.rs.shape()).expect("rank 4");
    let sv_shape = first.sv.shape().to_vec();
    let sv_w = sv_shape[2];
    let n = indices.len();
    let chw = c * h * w;
    let mut rs = Vec::with_capacity(n * chw);
    let mut sv = Vec::with_capacity(n * first.sv.numel());
    let mut locs = Vec::with_capacity(n);
    let mut local = Vec::with_capacity(n);
    let mut flipped = Vec::with_capacity(n);
    let mut variants = Vec::with_capacity(n);
    for &i in indices {
        let r = records.get(i).ok_or(Error::Index {
            index: i,
            len: records.len(),
        })?;
        if r.rs.shape() != [t, c, h, w] || r.sv.shape() != sv_shape.as_slice() {
            return Err(Error::Shape {
                op: "make_batch",
                lhs: r.rs.shape().to_vec(),
                rhs: vec![t, c, h, w],
            });
        }
        let variant = if augment.temporal { rng.random_range(0..t) } else { 0 };
        let flip = augment.flip && rng.random_bool(0.5);
        let img = &r.rs.data()[variant * chw..(variant + 1) * chw];
        let q = r.footprint.to_local(r.loc)?;
        if flip {
            rs.extend(flip_horizontal(img, w).into_iter().map(|x| R::lit(x as f64)));
            sv.extend(flip_horizontal(r.sv.data(), sv_w).into_iter().map(|x| R::lit(x as f64)));
            local.push(q.flipped());
        } else {
            rs.extend(img.iter().map(|&x| R::lit(x as f64)));
            sv.extend(r.sv.data().iter().map(|&x| R::lit(x as f64)));
            local.push(q);
        }
        locs.push(r.loc);
        flipped.push(flip);
        variants.push(variant);
    }
    Ok(TripleBatch {
        rs: Tensor::new(vec![n, c, h, w], rs)?,
        sv: Tensor::new(vec![n, sv_shape[0], sv_shape[1], sv_shape[2]], sv)?,
        locs,
        local,
        indices: indices.to_vec(),
        flipped,
        variants,
    })
}
