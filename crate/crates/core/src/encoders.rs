//! Remote-sensing, street-view and location encoders.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::geo::{equal_earth_unit, GeoPoint};
use crate::init;
use crate::params::{ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;
pub const NORM_EPS: f64 = 1e-12;

/// Affine layer with weight stored as `[out, in]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            init::uniform(rng, &[fan_out, fan_in], bound),
            true,
        );
        let bias = store.add(format!("{name}.bias"), init::uniform(rng, &[fan_out], bound), true);
        Self {
            weight,
            bias: Some(bias),
        }
    }

    pub fn without_bias<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            init::uniform(rng, &[fan_out, fan_in], bound),
            true,
        );
        Self { weight, bias: None }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

/// Layer normalization over the last axis with learned scale and offset.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[width], R::one()), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width]), true),
        }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, R::lit(LN_EPS));
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let scaled = g.mul(n, gamma)?;
        g.add(scaled, beta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub channels: usize,
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub out_dim: usize,
}

impl VitConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if [self.channels, self.width, self.ff_width, self.out_dim].contains(&0) {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Pre-norm vision transformer over non-overlapping patches.
#[derive(Clone, Debug)]
pub struct Vit {
    pub cfg: VitConfig,
    embed: Linear,
    pub pos: ParamId,
    blocks: Vec<Block>,
    ln: LayerNorm,
    pub proj: Linear,
}

/// Rearranges `[B, C, H, W]` images into `[B * P * P, C * p * p]` patch rows.
/// Patches are in row-major grid order; each row is ordered (channel, y, x).
pub fn patchify<R: Real>(images: &Tensor<R>, patch: usize) -> Result<Tensor<R>> {
    let s = images.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::Config(format!(
            "expected square [B, C, H, W] images, got {s:?}"
        )));
    }
    let (b, c, h) = (s[0], s[1], s[2]);
    if patch == 0 || h % patch != 0 {
        return Err(Error::Config(format!(
            "image size {h} is not divisible by patch size {patch}"
        )));
    }
    let p = h / patch;
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for pr in 0..p {
            for pc in 0..p {
                for ci in 0..c {
                    for y in 0..patch {
                        let row = ((bi * c + ci) * h + pr * patch + y) * h + pc * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b * p * p, c * patch * patch], out)
}

impl Vit {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        cfg: VitConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let embed = Linear::new(store, &format!("{name}.patch_embed"), cfg.patch_dim(), w, rng);
        let pos = store.add(
            format!("{name}.pos_embed"),
            init::normal(rng, &[cfg.tokens(), w], 0.02),
            true,
        );
        let blocks = (0..cfg.depth)
            .map(|i| {
                let p = format!("{name}.block{i}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), w),
                    q: Linear::new(store, &format!("{p}.attn.q"), w, w, rng),
                    // A key bias only shifts each score row, which softmax ignores.
                    k: Linear::without_bias(store, &format!("{p}.attn.k"), w, w, rng),
                    v: Linear::new(store, &format!("{p}.attn.v"), w, w, rng),
                    o: Linear::new(store, &format!("{p}.attn.o"), w, w, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), w),
                    ff1: Linear::new(store, &format!("{p}.ff1"), w, cfg.ff_width, rng),
                    ff2: Linear::new(store, &format!("{p}.ff2"), cfg.ff_width, w, rng),
                }
            })
            .collect();
        let ln = LayerNorm::new(store, &format!("{name}.ln_final"), w);
        let proj = Linear::new(store, &format!("{name}.proj"), w, cfg.out_dim, rng);
        Ok(Self {
            cfg,
            embed,
            pos,
            blocks,
            ln,
            proj,
        })
    }

    fn attention<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        blk: &Block,
        x: Var,
        batch: usize,
    ) -> Result<Var> {
        let (t, w, h) = (self.cfg.tokens(), self.cfg.width, self.cfg.heads);
        let dh = w / h;
        let heads = |lin: &Linear, g: &mut Graph<R>| -> Result<Var> {
            let y = lin.forward(g, store, x)?;
            let y = g.reshape(y, &[batch, t, h, dh])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            g.reshape(y, &[batch * h, t, dh])
        };
        let q = heads(&blk.q, g)?;
        let k = heads(&blk.k, g)?;
        let v = heads(&blk.v, g)?;
        let scores = g.matmul_t(q, k, false, true)?;
        let scores = g.scale(scores, R::lit(1.0 / (dh as f64).sqrt()));
        let att = g.softmax_rows(scores)?;
        let ctx = g.matmul(att, v)?;
        let ctx = g.reshape(ctx, &[batch, h, t, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch * t, w])?;
        blk.o.forward(g, store, ctx)
    }

    /// Final normalized token features, `[B * T, width]`.
    pub fn tokens<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, images: &Tensor<R>) -> Result<Var> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.cfg.channels || s[2] != self.cfg.image_size || s[3] != self.cfg.image_size {
            return Err(Error::Shape {
                op: "vit_input",
                lhs: s.to_vec(),
                rhs: vec![self.cfg.channels, self.cfg.image_size, self.cfg.image_size],
            });
        }
        let batch = s[0];
        let (t, w) = (self.cfg.tokens(), self.cfg.width);
        let patches = g.constant(patchify(images, self.cfg.patch)?);
        let x = self.embed.forward(g, store, patches)?;
        let x = g.reshape(x, &[batch, t, w])?;
        let pos = g.param(store, self.pos);
        let x = g.add(x, pos)?;
        let mut x = g.reshape(x, &[batch * t, w])?;
        for blk in &self.blocks {
            let h = blk.ln1.forward(g, store, x)?;
            let a = self.attention(g, store, blk, h, batch)?;
            x = g.add(x, a)?;
            let h = blk.ln2.forward(g, store, x)?;
            let h = blk.ff1.forward(g, store, h)?;
            let h = g.gelu(h);
            let h = blk.ff2.forward(g, store, h)?;
            x = g.add(x, h)?;
        }
        self.ln.forward(g, store, x)
    }

    /// Geo-referenced feature grid `[B, P, P, D]`, row 0 northernmost. Not normalized.
    pub fn encode_map<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, images: &Tensor<R>) -> Result<Var> {
        let batch = images.shape()[0];
        let x = self.tokens(g, store, images)?;
        let y = self.proj.forward(g, store, x)?;
        let p = self.cfg.grid();
        g.reshape(y, &[batch, p, p, self.cfg.out_dim])
    }

    /// Mean-pooled, projected and L2-normalized embedding `[B, D]`.
    pub fn encode_pooled<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, images: &Tensor<R>) -> Result<Var> {
        let batch = images.shape()[0];
        let x = self.tokens(g, store, images)?;
        let x = g.reshape(x, &[batch, self.cfg.tokens(), self.cfg.width])?;
        let pooled = g.mean_axis(x, 1)?;
        let y = self.proj.forward(g, store, pooled)?;
        Ok(g.l2_normalize_rows(y, R::lit(NORM_EPS)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocConfig {
    /// Number of Fourier frequencies `m`; features have width `2m`.
    pub frequencies: usize,
    pub sigma: f64,
    pub hidden: usize,
    pub out_dim: usize,
}

/// Random Fourier features of the rescaled Equal Earth coordinates.
/// `b` is `[m, 2]`; returns `[cos(2 pi B q); sin(2 pi B q)]`.
pub fn rff_features(b: &[f64], p: GeoPoint) -> Vec<f64> {
    let q = equal_earth_unit(p);
    let m = b.len() / 2;
    let angles: Vec<f64> = (0..m)
        .map(|i| 2.0 * std::f64::consts::PI * (b[2 * i] * q[0] + b[2 * i + 1] * q[1]))
        .collect();
    angles.iter().map(|a| a.cos()).chain(angles.iter().map(|a| a.sin())).collect()
}

/// Fourier features followed by a GELU MLP and L2 normalization. `B` is frozen.
#[derive(Clone, Debug)]
pub struct LocEncoder {
    pub cfg: LocConfig,
    pub fourier: ParamId,
    pub layers: [Linear; 3],
}

impl LocEncoder {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        cfg: LocConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.frequencies == 0 || cfg.hidden == 0 || cfg.out_dim == 0 || !(cfg.sigma >= 0.0) {
            return Err(Error::Config(format!("invalid location encoder config {cfg:?}")));
        }
        let fourier = store.add(
            format!("{name}.fourier_b"),
            init::normal(rng, &[cfg.frequencies, 2], cfg.sigma),
            false,
        );
        let m2 = 2 * cfg.frequencies;
        let layers = [
            Linear::new(store, &format!("{name}.mlp0"), m2, cfg.hidden, rng),
            Linear::new(store, &format!("{name}.mlp1"), cfg.hidden, cfg.hidden, rng),
            Linear::new(store, &format!("{name}.mlp2"), cfg.hidden, cfg.out_dim, rng),
        ];
        Ok(Self {
            cfg,
            fourier,
            layers,
        })
    }

    pub fn features<R: Real>(&self, store: &ParamStore<R>, points: &[GeoPoint]) -> Result<Tensor<R>> {
        if points.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let b: Vec<f64> = store.value(self.fourier).data().iter().map(|x| x.as_f64()).collect();
        let data = points
            .iter()
            .flat_map(|&p| rff_features(&b, p))
            .map(R::lit)
            .collect();
        Tensor::new(vec![points.len(), 2 * self.cfg.frequencies], data)
    }

    /// MLP over precomputed features `[N, 2m]`, returning unit rows `[N, D]`.
    pub fn encode_features<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, features: Var) -> Result<Var> {
        let h = self.layers[0].forward(g, store, features)?;
        let h = g.gelu(h);
        let h = self.layers[1].forward(g, store, h)?;
        let h = g.gelu(h);
        let y = self.layers[2].forward(g, store, h)?;
        Ok(g.l2_normalize_rows(y, R::lit(NORM_EPS)))
    }

    pub fn encode<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, points: &[GeoPoint]) -> Result<Var> {
        let feats = g.constant(self.features(store, points)?);
        self.encode_features(g, store, feats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Domain};
    use rand_chacha::ChaCha8Rng;

    fn cfg(image_size: usize, patch: usize) -> VitConfig {
        VitConfig {
            channels: 2,
            image_size,
            patch,
            width: 16,
            depth: 2,
            heads: 4,
            ff_width: 24,
            out_dim: 8,
        }
    }

    fn rng() -> ChaCha8Rng {
        rng::stream(11, Domain::Init, 0)
    }

    fn zero_all<R: Real>(store: &mut ParamStore<R>) {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(&shape);
        }
    }

    fn random_images(n: usize, c: usize, h: usize, seed: u64) -> Tensor<f64> {
        init::normal(&mut rng::stream(seed, Domain::Eval, 1), &[n, c, h, h], 1.0)
    }

    #[test]
    fn zero_weights_give_projection_bias_everywhere() {
        let mut store = ParamStore::<f64>::new();
        let vit = Vit::new(&mut store, "rs", cfg(16, 4), &mut rng()).unwrap();
        zero_all(&mut store);
        let c: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        store.get_mut(vit.proj.bias.unwrap()).value = Tensor::new(vec![8], c.clone()).unwrap();
        let mut g = Graph::new();
        let fm = vit.encode_map(&mut g, &store, &Tensor::zeros(&[1, 2, 16, 16])).unwrap();
        assert_eq!(g.shape(fm), &[1, 4, 4, 8]);
        for cell in g.value(fm).data().chunks(8) {
            assert_eq!(cell, c.as_slice());
        }
    }

    #[test]
    fn feature_map_shape_contract() {
        for h in [16, 32, 64] {
            for p in [4, 8] {
                let mut store = ParamStore::<f32>::new();
                let vit = Vit::new(&mut store, "rs", cfg(h, p), &mut rng()).unwrap();
                let mut g = Graph::inference();
                let fm = vit.encode_map(&mut g, &store, &Tensor::zeros(&[2, 2, h, h])).unwrap();
                assert_eq!(g.shape(fm), &[2, h / p, h / p, 8]);
            }
        }
    }

    #[test]
    fn indivisible_patch_is_a_config_error() {
        let mut store = ParamStore::<f64>::new();
        assert!(matches!(Vit::new(&mut store, "rs", cfg(18, 4), &mut rng()), Err(Error::Config(_))));
    }

    fn rotate180(img: &Tensor<f64>) -> Tensor<f64> {
        let s = img.shape().to_vec();
        let (h, w) = (s[2], s[3]);
        let mut out = img.clone();
        for plane in 0..s[0] * s[1] {
            for i in 0..h {
                for j in 0..w {
                    out.data_mut()[(plane * h + i) * w + j] = img.data()[(plane * h + h - 1 - i) * w + w - 1 - j];
                }
            }
        }
        out
    }

    #[test]
    fn rotation_equivariance_with_permuted_weights() {
        let c = cfg(16, 4);
        let mut store = ParamStore::<f64>::new();
        let vit = Vit::new(&mut store, "rs", c, &mut rng()).unwrap();
        let mut rotated = store.clone();
        // Reverse the token order of the positional table.
        let pos = store.value(vit.pos).clone();
        let (t, w) = (c.tokens(), c.width);
        rotated.get_mut(vit.pos).value = Tensor::from_fn(&[t, w], |k| pos.data()[(t - 1 - k / w) * w + k % w]);
        // Rotate each patch filter so it sees the rotated patch the same way.
        let pw = store.value(vit.embed.weight).clone();
        let (pd, pp) = (c.patch_dim(), c.patch);
        rotated.get_mut(vit.embed.weight).value = Tensor::from_fn(&[w, pd], |k| {
            let (o, col) = (k / pd, k % pd);
            let (ch, y, x) = (col / (pp * pp), col / pp % pp, col % pp);
            pw.data()[o * pd + ch * pp * pp + (pp - 1 - y) * pp + (pp - 1 - x)]
        });
        let img = random_images(2, 2, 16, 3);
        let mut ga = Graph::new();
        let a = vit.encode_map(&mut ga, &store, &img).unwrap();
        let mut gb = Graph::new();
        let b = vit.encode_map(&mut gb, &rotated, &rotate180(&img)).unwrap();
        let (a, b) = (ga.value(a), gb.value(b));
        let p = c.grid();
        for n in 0..2 {
            for i in 0..p {
                for j in 0..p {
                    for d in 0..8 {
                        let x = a.data()[((n * p + i) * p + j) * 8 + d];
                        let y = b.data()[((n * p + p - 1 - i) * p + p - 1 - j) * 8 + d];
                        assert!((x - y).abs() < 1e-5, "{x} vs {y}");
                    }
                }
            }
        }
    }

    #[test]
    fn pooled_zero_weights_give_normalized_bias() {
        let mut store = ParamStore::<f64>::new();
        let vit = Vit::new(&mut store, "sv", cfg(8, 4), &mut rng()).unwrap();
        zero_all(&mut store);
        let b = vec![3.0, 0.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        store.get_mut(vit.proj.bias.unwrap()).value = Tensor::new(vec![8], b).unwrap();
        let mut g = Graph::new();
        let e = vit.encode_pooled(&mut g, &store, &Tensor::zeros(&[1, 2, 8, 8])).unwrap();
        let got = g.value(e).data();
        assert!((got[0] - 0.6).abs() < 1e-12 && (got[2] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn pooled_output_has_unit_norm() {
        let mut store = ParamStore::<f64>::new();
        let vit = Vit::new(&mut store, "sv", cfg(16, 4), &mut rng()).unwrap();
        let mut g = Graph::new();
        let e = vit.encode_pooled(&mut g, &store, &random_images(5, 2, 16, 9)).unwrap();
        for r in 0..5 {
            let n: f64 = g.value(e).row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn rff_examples() {
        let p = GeoPoint::from_degrees(12.5, -33.0).unwrap();
        let f = rff_features(&[0.0; 8], p);
        assert_eq!(f, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let b: Vec<f64> = init::normal(&mut rng(), &[64, 2], 5.0).into_data();
        assert!(rff_features(&b, p).iter().all(|v| (-1.0..=1.0).contains(v)));
        let q = GeoPoint::new(p.lon() + 2.0 * std::f64::consts::PI, p.lat()).unwrap();
        let (fp, fq) = (rff_features(&b, p), rff_features(&b, q));
        assert!(fp.iter().zip(&fq).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    fn loc_cfg() -> LocConfig {
        LocConfig {
            frequencies: 16,
            sigma: 1.0,
            hidden: 32,
            out_dim: 8,
        }
    }

    #[test]
    fn location_encoder_is_deterministic_and_unit_norm() {
        let points: Vec<GeoPoint> = (0..6)
            .map(|i| GeoPoint::from_degrees(-170.0 + 60.0 * i as f64, 80.0 - 30.0 * i as f64).unwrap())
            .collect();
        let run = || {
            let mut store = ParamStore::<f32>::new();
            let enc = LocEncoder::new(&mut store, "loc", loc_cfg(), &mut rng()).unwrap();
            let mut g = Graph::inference();
            let e = enc.encode(&mut g, &store, &points).unwrap();
            g.value(e).clone()
        };
        let a = run();
        assert_eq!(a, run());
        for r in 0..points.len() {
            let n: f32 = a.row(r).iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn fourier_matrix_is_frozen_in_the_store() {
        let mut store = ParamStore::<f64>::new();
        let enc = LocEncoder::new(&mut store, "loc", loc_cfg(), &mut rng()).unwrap();
        assert!(!store.get(enc.fourier).trainable);
        let mut g = Graph::new();
        let e = enc.encode(&mut g, &store, &[GeoPoint::from_degrees(1.0, 2.0).unwrap()]).unwrap();
        let s = g.sum_all(e);
        g.backward(s).unwrap();
        let b = g.param(&store, enc.fourier);
        assert!(g.grad(b).is_none());
    }
}
