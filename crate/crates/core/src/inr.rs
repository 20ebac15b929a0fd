//! Continuous lookup into a feature grid: 3x3 unfolding, a latent decoder and
//! local-ensemble (bilinear) blending of the four surrounding cells.

use rand::Rng;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::encoders::{Linear, NORM_EPS};
use crate::error::{Error, Result};
use crate::geo::LocalCoord;
use crate::params::ParamStore;

/// Neighbor offsets `(row, col)` in raster order NW, N, NE, W, C, E, SW, S, SE.
pub const NEIGHBORS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Geometry of one local-ensemble lookup. Corner `k = 2 i + j` sits at grid
/// cell `(a0 + i, b0 + j)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnsembleCell {
    pub corners: [(usize, usize); 4],
    pub weights: [f64; 4],
    /// Query minus corner center, in cell units, as `(east, north)`.
    pub deltas: [[f64; 2]; 4],
    pub clamped: bool,
}

/// Bilinear weights `[w00, w01, w10, w11]` for fractional row/column offsets.
pub fn bilinear_weights(fr: f64, fc: f64) -> [f64; 4] {
    [(1.0 - fr) * (1.0 - fc), (1.0 - fr) * fc, fr * (1.0 - fc), fr * fc]
}

/// Each corner is weighted by the area of the rectangle spanned by the query
/// and the diagonally opposite corner. Queries in the outer half-cell margin are
/// clamped onto the hull of patch centers.
pub fn ensemble_weights(q: LocalCoord, p: usize) -> Result<EnsembleCell> {
    if p < 2 {
        return Err(Error::Config(format!("ensemble lookup needs P >= 2, got {p}")));
    }
    if !q.u.is_finite() || !q.v.is_finite() || q.u.abs() > 1.0 || q.v.abs() > 1.0 {
        return Err(Error::OutOfLocalRange { u: q.u, v: q.v });
    }
    let pf = p as f64;
    let hi = (p - 1) as f64;
    let c_raw = (q.u + 1.0) * 0.5 * pf - 0.5;
    let r_raw = (1.0 - q.v) * 0.5 * pf - 0.5;
    let c = c_raw.clamp(0.0, hi);
    let r = r_raw.clamp(0.0, hi);
    let clamped = c != c_raw || r != r_raw;
    let a0 = (r.floor() as usize).min(p - 2);
    let b0 = (c.floor() as usize).min(p - 2);
    let (fr, fc) = (r - a0 as f64, c - b0 as f64);
    let weights = bilinear_weights(fr, fc);
    let mut corners = [(0, 0); 4];
    let mut deltas = [[0.0; 2]; 4];
    for i in 0..2 {
        for j in 0..2 {
            let k = 2 * i + j;
            corners[k] = (a0 + i, b0 + j);
            deltas[k] = [c - (b0 + j) as f64, (a0 + i) as f64 - r];
        }
    }
    Ok(EnsembleCell {
        corners,
        weights,
        deltas,
        clamped,
    })
}

/// Row indices into a flattened `[B * P * P, D]` map that build the unfolded
/// `[B * P * P * 9, D]` rows; `None` marks zero padding.
pub fn unfold_index(batch: usize, p: usize) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(batch * p * p * 9);
    for b in 0..batch {
        for a in 0..p {
            for c in 0..p {
                for (dr, dc) in NEIGHBORS {
                    let (rr, cc) = (a as isize + dr, c as isize + dc);
                    let inside = (0..p as isize).contains(&rr) && (0..p as isize).contains(&cc);
                    idx.push(inside.then(|| (b * p + rr as usize) * p + cc as usize));
                }
            }
        }
    }
    idx
}

/// `[B, P, P, D]` to `[B, P, P, 9D]` by concatenating each 3x3 neighborhood.
pub fn unfold3x3<R: Real>(g: &mut Graph<R>, fm: Var) -> Result<Var> {
    let s = g.shape(fm).to_vec();
    if s.len() != 4 || s[1] != s[2] {
        return Err(Error::Contract(format!("feature map must be [B, P, P, D], got {s:?}")));
    }
    let (b, p, d) = (s[0], s[1], s[3]);
    let flat = g.reshape(fm, &[b * p * p, d])?;
    let rows = g.gather_rows(flat, &unfold_index(b, p))?;
    g.reshape(rows, &[b, p, p, 9 * d])
}

/// The latent decoder `W [z; delta] + b`, with `W` of shape `[D, 9D + 2]`.
#[derive(Clone, Copy, Debug)]
pub struct FTheta {
    pub layer: Linear,
    pub dim: usize,
}

impl FTheta {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            layer: Linear::new(store, name, 9 * dim + 2, dim, rng),
            dim,
        }
    }

    /// `z` is `[n, 9D]`, `delta` is `[n, 2]`.
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, z: Var, delta: Var) -> Result<Var> {
        let x = g.concat(&[z, delta], 1)?;
        self.layer.forward(g, store, x)
    }

    /// Overwrites the decoder with the pass-through configuration that returns
    /// the center block of the unfolded latent.
    pub fn set_pass_through<R: Real>(&self, store: &mut ParamStore<R>) {
        let d = self.dim;
        let w = Tensor::from_fn(&[d, 9 * d + 2], |i| {
            let (row, col) = (i / (9 * d + 2), i % (9 * d + 2));
            if col == 4 * d + row {
                R::one()
            } else {
                R::zero()
            }
        });
        store.get_mut(self.layer.weight).value = w;
        store.get_mut(self.layer.bias.expect("f_theta has a bias")).value = Tensor::zeros(&[d]);
    }
}

/// Which blending rule a batch lookup uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lookup {
    Ensemble,
    /// Decoder applied to the single nearest cell only. Discontinuous at cell
    /// boundaries; kept as a negative control.
    NearestCell,
}

/// Batched lookup of one query per map: `unfolded` is `[B, P, P, 9D]`,
/// returns `[B, D]`. Rows are L2-normalized when `normalize` is set.
pub fn inr_query_batch<R: Real>(
    g: &mut Graph<R>,
    store: &ParamStore<R>,
    ftheta: &FTheta,
    unfolded: Var,
    queries: &[LocalCoord],
    lookup: Lookup,
    normalize: bool,
) -> Result<Var> {
    let pairs: Vec<(usize, LocalCoord)> = queries.iter().copied().enumerate().collect();
    let b = g.shape(unfolded).first().copied().unwrap_or(0);
    if queries.len() != b {
        return Err(Error::Contract(format!("{} queries for {b} maps", queries.len())));
    }
    inr_lookup(g, store, ftheta, unfolded, &pairs, lookup, normalize)
}

/// Lookup of arbitrary `(map index, query)` pairs into `[B, P, P, 9D]`,
/// returning one row per pair.
pub fn inr_lookup<R: Real>(
    g: &mut Graph<R>,
    store: &ParamStore<R>,
    ftheta: &FTheta,
    unfolded: Var,
    queries: &[(usize, LocalCoord)],
    lookup: Lookup,
    normalize: bool,
) -> Result<Var> {
    let s = g.shape(unfolded).to_vec();
    if s.len() != 4 || s[1] != s[2] || s[3] != 9 * ftheta.dim {
        return Err(Error::Contract(format!(
            "unfolded map must be [B, P, P, {}], got {s:?}",
            9 * ftheta.dim
        )));
    }
    if queries.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (b, p, d9) = (s[0], s[1], s[3]);
    let n = queries.len();
    let per = match lookup {
        Lookup::Ensemble => 4,
        Lookup::NearestCell => 1,
    };
    let mut index = Vec::with_capacity(n * per);
    let mut deltas = Vec::with_capacity(n * 2);
    let mut mix = Vec::with_capacity(n * per);
    for &(m, q) in queries {
        if m >= b {
            return Err(Error::Index { index: m, len: b });
        }
        let cell = ensemble_weights(q, p)?;
        let ks: Vec<usize> = match lookup {
            Lookup::Ensemble => (0..4).collect(),
            Lookup::NearestCell => {
                let best = (0..4)
                    .max_by(|&x, &y| cell.weights[x].total_cmp(&cell.weights[y]).then(y.cmp(&x)))
                    .expect("four corners");
                vec![best]
            }
        };
        let mut delta = [0.0; 2];
        for &k in &ks {
            let (a, c) = cell.corners[k];
            index.push(Some((m * p + a) * p + c));
            let w = match lookup {
                Lookup::Ensemble => cell.weights[k],
                Lookup::NearestCell => 1.0,
            };
            mix.push(w);
            delta[0] += w * cell.deltas[k][0];
            delta[1] += w * cell.deltas[k][1];
        }
        deltas.extend_from_slice(&delta);
    }
    // f_theta is affine and the weights sum to one, so the weighted sum of its
    // outputs equals f_theta applied to the weighted sum of its inputs.
    let flat = g.reshape(unfolded, &[b * p * p, d9])?;
    let z = g.gather_rows(flat, &index)?;
    let z = g.reshape(z, &[n, per, d9])?;
    let mix = g.constant(Tensor::from_f64(vec![n, 1, per], &mix)?);
    let z = g.matmul(mix, z)?;
    let z = g.reshape(z, &[n, d9])?;
    let delta = g.constant(Tensor::from_f64(vec![n, 2], &deltas)?);
    let out = ftheta.forward(g, store, z, delta)?;
    Ok(if normalize {
        g.l2_normalize_rows(out, R::lit(NORM_EPS))
    } else {
        out
    })
}

/// Single-map convenience wrapper around [`inr_query_batch`]; `unfolded` is `[P, P, 9D]`.
pub fn inr_query<R: Real>(
    g: &mut Graph<R>,
    store: &ParamStore<R>,
    ftheta: &FTheta,
    unfolded: Var,
    query: LocalCoord,
) -> Result<Var> {
    let s = g.shape(unfolded).to_vec();
    if s.len() != 3 {
        return Err(Error::Contract(format!("unfolded map must be [P, P, 9D], got {s:?}")));
    }
    let batched = g.reshape(unfolded, &[1, s[0], s[1], s[2]])?;
    inr_query_batch(g, store, ftheta, batched, &[query], Lookup::Ensemble, true)
}
