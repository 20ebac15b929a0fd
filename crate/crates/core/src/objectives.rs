//! Cosine-similarity logits, symmetric InfoNCE, the location memory bank and
//! the bank-augmented location loss.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Rows farther than this from unit norm are rejected by [`sim_matrix`].
pub const NORM_CONTRACT_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_secl: f64,
    pub bank_capacity: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda_secl: 1.0,
            bank_capacity: 1024,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, batch_size: usize) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda_secl >= 0.0) || !self.lambda_secl.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda_secl)));
        }
        if self.bank_capacity < batch_size {
            return Err(Error::Config(format!(
                "bank capacity {} is smaller than the batch size {batch_size}",
                self.bank_capacity
            )));
        }
        Ok(())
    }
}

fn check_unit_rows<R: Real>(g: &Graph<R>, x: Var, what: &str) -> Result<()> {
    let t = g.value(x);
    if t.ndim() != 2 {
        return Err(Error::Contract(format!("{what} must be a matrix, got {:?}", t.shape())));
    }
    for i in 0..t.rows() {
        let n = t.row(i).iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if (n - 1.0).abs() > NORM_CONTRACT_TOL {
            return Err(Error::Contract(format!("{what} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// Pairwise dot products of unit rows, `[n, m]`.
pub fn sim_matrix<R: Real>(g: &mut Graph<R>, a: Var, b: Var) -> Result<Var> {
    check_unit_rows(g, a, "lhs")?;
    check_unit_rows(g, b, "rhs")?;
    g.matmul_t(a, b, false, true)
}

/// Sum of `logp[i, i]` for a `[n, m]` log-probability matrix, `m >= n`.
fn diagonal_sum<R: Real>(g: &mut Graph<R>, logp: Var) -> Result<Var> {
    let s = g.shape(logp).to_vec();
    let (n, m) = (s[0], s[1]);
    let mask = Tensor::from_fn(&[n, m], |k| if k / m == k % m { R::one() } else { R::zero() });
    let mask = g.constant(mask);
    let picked = g.mul(logp, mask)?;
    Ok(g.sum_all(picked))
}

fn batch_rows<R: Real>(g: &Graph<R>, x: Var) -> Result<usize> {
    let s = g.shape(x);
    if s.len() != 2 {
        return Err(Error::Contract(format!("expected [N, D], got {s:?}")));
    }
    Ok(s[0])
}

/// Symmetric InfoNCE between matched rows of `z` and `s`.
pub fn incl_loss<R: Real>(g: &mut Graph<R>, z: Var, s: Var, tau: f64) -> Result<Var> {
    let n = batch_rows(g, z)?;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if g.shape(z) != g.shape(s) {
        return Err(Error::Shape {
            op: "incl_loss",
            lhs: g.shape(z).to_vec(),
            rhs: g.shape(s).to_vec(),
        });
    }
    let sim = sim_matrix(g, z, s)?;
    let logits = g.scale(sim, R::lit(1.0 / tau));
    let lp_zs = g.log_softmax_rows(logits)?;
    let d1 = diagonal_sum(g, lp_zs)?;
    let logits_t = g.transpose(logits)?;
    let lp_sz = g.log_softmax_rows(logits_t)?;
    let d2 = diagonal_sum(g, lp_sz)?;
    let total = g.add(d1, d2)?;
    Ok(g.scale(total, R::lit(-1.0 / (2.0 * n as f64))))
}

/// FIFO store of detached unit-norm location embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<R> {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<R>>,
}

impl<R: Real> MemoryBank<R> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config("memory bank capacity and dim must be positive".into()));
        }
        Ok(Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries from oldest to newest.
    pub fn entries(&self) -> impl Iterator<Item = &[R]> {
        self.entries.iter().map(|v| v.as_slice())
    }

    /// Appends the rows of `batch` (`[N, dim]`), evicting the oldest beyond capacity.
    pub fn push(&mut self, batch: &Tensor<R>) -> Result<()> {
        let s = batch.shape();
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::Shape {
                op: "bank_push",
                lhs: s.to_vec(),
                rhs: vec![self.dim],
            });
        }
        if s[0] > self.capacity {
            return Err(Error::Config(format!(
                "cannot push {} entries into a bank of capacity {}",
                s[0], self.capacity
            )));
        }
        for i in 0..s[0] {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(batch.row(i).to_vec());
        }
        Ok(())
    }

    /// Snapshot as a `[len, dim]` tensor, or `None` when empty.
    pub fn to_tensor(&self) -> Option<Tensor<R>> {
        if self.entries.is_empty() {
            return None;
        }
        let data = self.entries.iter().flatten().copied().collect();
        Some(Tensor::new(vec![self.entries.len(), self.dim], data).expect("consistent rows"))
    }

    pub(crate) fn from_parts(capacity: usize, dim: usize, rows: Vec<Vec<R>>) -> Result<Self> {
        let mut bank = Self::new(capacity, dim)?;
        if rows.len() > capacity || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Contract("memory bank snapshot inconsistent with its capacity".into()));
        }
        bank.entries.extend(rows);
        Ok(bank)
    }
}

/// Location-anchored loss: each `z_i` and `s_i` must pick `e_i` among the
/// current batch's location embeddings followed by the (detached) bank.
pub fn secl_loss<R: Real>(
    g: &mut Graph<R>,
    e: Var,
    z: Var,
    s: Var,
    bank: &MemoryBank<R>,
    tau: f64,
) -> Result<Var> {
    let n = batch_rows(g, e)?;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    for other in [z, s] {
        if g.shape(other) != g.shape(e) {
            return Err(Error::Shape {
                op: "secl_loss",
                lhs: g.shape(e).to_vec(),
                rhs: g.shape(other).to_vec(),
            });
        }
    }
    let candidates = match bank.to_tensor() {
        Some(t) => {
            if t.shape()[1] != g.shape(e)[1] {
                return Err(Error::Shape {
                    op: "secl_bank",
                    lhs: g.shape(e).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            let b = g.constant(t);
            g.concat(&[e, b], 0)?
        }
        None => e,
    };
    let mut total = None;
    for anchor in [z, s] {
        let sim = sim_matrix(g, anchor, candidates)?;
        let logits = g.scale(sim, R::lit(1.0 / tau));
        let lp = g.log_softmax_rows(logits)?;
        let d = diagonal_sum(g, lp)?;
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
    }
    let total = total.expect("two terms");
    Ok(g.scale(total, R::lit(-1.0 / (2.0 * n as f64))))
}

/// `incl + lambda * secl`.
pub fn combined_loss<R: Real>(g: &mut Graph<R>, incl: Var, secl: Var, lambda: f64) -> Result<Var> {
    let weighted = g.scale(secl, R::lit(lambda));
    g.add(incl, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};
    use crate::rng::{self, Domain};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn rng(k: u64) -> ChaCha8Rng {
        rng::stream(11, Domain::Eval, k)
    }

    fn unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    }

    fn eye_rows(n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
    }

    fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// `-log( exp(s_ii / tau) / sum_j exp(s_ij / tau) )` averaged over rows.
    fn nce_oracle(anchors: &[Vec<f64>], cands: &[Vec<f64>], tau: f64) -> f64 {
        let mut total = 0.0;
        for (i, a) in anchors.iter().enumerate() {
            let denom: f64 = cands.iter().map(|c| (dot(a, c) / tau).exp()).sum();
            total += -((dot(a, &cands[i]) / tau).exp() / denom).ln();
        }
        total / anchors.len() as f64
    }

    fn incl(z: &[Vec<f64>], s: &[Vec<f64>], tau: f64) -> f64 {
        let mut g = Graph::new();
        let (zv, sv) = (g.constant(tensor(z)), g.constant(tensor(s)));
        let l = incl_loss(&mut g, zv, sv, tau).unwrap();
        g.value(l).item()
    }

    fn secl(e: &[Vec<f64>], z: &[Vec<f64>], s: &[Vec<f64>], bank: &MemoryBank<f64>, tau: f64) -> f64 {
        let mut g = Graph::new();
        let (ev, zv, sv) = (g.constant(tensor(e)), g.constant(tensor(z)), g.constant(tensor(s)));
        let l = secl_loss(&mut g, ev, zv, sv, bank, tau).unwrap();
        g.value(l).item()
    }

    fn orthonormal_closed_form(n: usize, tau: f64) -> f64 {
        (1.0 + (n as f64 - 1.0) * (-1.0 / tau).exp()).ln()
    }

    #[test]
    fn sim_matrix_examples() {
        let mut g = Graph::new();
        let a = g.constant(tensor(&eye_rows(3, 3)));
        let s = sim_matrix(&mut g, a, a).unwrap();
        assert_eq!(g.value(s), &tensor(&eye_rows(3, 3)));

        let mut r = rng(0);
        let (x, y) = (unit_rows(&mut r, 5, 7), unit_rows(&mut r, 4, 7));
        let mut g = Graph::new();
        let (a, b) = (g.constant(tensor(&x)), g.constant(tensor(&y)));
        let s = sim_matrix(&mut g, a, b).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let v = g.value(s).data()[i * 4 + j];
                assert!((v - dot(&x[i], &y[j])).abs() < 1e-12);
                assert!(v.abs() <= 1.0 + 1e-5);
            }
        }
        let c = g.constant(Tensor::from_f64(vec![1, 2], &[1.0, 0.1]).unwrap());
        assert!(matches!(sim_matrix(&mut g, c, c), Err(Error::Contract(_))));
    }

    #[test]
    fn incl_closed_forms() {
        let mut r = rng(1);
        let single = unit_rows(&mut r, 1, 6);
        assert!(incl(&single, &unit_rows(&mut r, 1, 6), 0.07).abs() < 1e-12);
        for n in [2, 4, 8] {
            let same = vec![single[0].clone(); n];
            assert!((incl(&same, &same, 0.07) - (n as f64).ln()).abs() < 1e-9);
        }
        for tau in [0.07, 0.5, 1.0] {
            for n in [2, 4, 8] {
                let e = eye_rows(n, 8);
                assert!((incl(&e, &e, tau) - orthonormal_closed_form(n, tau)).abs() < 1e-6);
            }
        }
        let e = eye_rows(2, 2);
        assert!((incl(&e, &e, 1.0) - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn incl_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(tensor(&eye_rows(2, 3)));
        let b = g.constant(tensor(&eye_rows(3, 3)));
        assert!(matches!(incl_loss(&mut g, a, b, 0.1), Err(Error::Shape { .. })));
        let v = g.constant(Tensor::from_f64(vec![3], &[1.0, 0.0, 0.0]).unwrap());
        assert!(incl_loss(&mut g, v, v, 0.1).is_err());
    }

    #[test]
    fn incl_matches_oracle() {
        let mut r = rng(2);
        for n in [1, 3, 9] {
            let (z, s) = (unit_rows(&mut r, n, 5), unit_rows(&mut r, n, 5));
            let want = 0.5 * (nce_oracle(&z, &s, 0.2) + nce_oracle(&s, &z, 0.2));
            assert!((incl(&z, &s, 0.2) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn incl_is_monotone_in_tau_for_orthonormal_pairs() {
        let e = eye_rows(4, 4);
        let losses: Vec<f64> = [0.05, 0.1, 0.5, 1.0].iter().map(|&t| incl(&e, &e, t)).collect();
        assert!(losses.windows(2).all(|w| w[0] < w[1]), "{losses:?}");
    }

    #[test]
    fn incl_is_scale_free_after_normalization() {
        let mut r = rng(3);
        let raw = Tensor::from_fn(&[4, 6], |_| r.random_range(-1.0..1.0));
        let other = tensor(&unit_rows(&mut r, 4, 6));
        let loss_of = |c: f64| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_fn(&[4, 6], |i| c * raw.data()[i]));
            let x = g.l2_normalize_rows(x, 1e-12);
            let y = g.constant(other.clone());
            let l = incl_loss(&mut g, x, y, 0.1).unwrap();
            g.value(l).item()
        };
        let base = loss_of(1.0);
        for c in [1e-3, 0.5, 7.0, 1e3] {
            assert!((loss_of(c) - base).abs() < 1e-6);
        }
    }

    #[test]
    fn memory_bank_fifo_examples() {
        let rows = eye_rows(5, 5);
        let mut bank = MemoryBank::<f64>::new(4, 5).unwrap();
        bank.push(&tensor(&rows[..3])).unwrap();
        bank.push(&tensor(&rows[3..])).unwrap();
        let got: Vec<Vec<f64>> = bank.entries().map(|e| e.to_vec()).collect();
        assert_eq!(got, rows[1..].to_vec());

        let mut full = MemoryBank::<f64>::new(4, 5).unwrap();
        full.push(&tensor(&rows[..4])).unwrap();
        assert_eq!(full.len(), 4);
        assert!(matches!(full.push(&tensor(&rows)), Err(Error::Config(_))));
        assert!(MemoryBank::<f64>::new(0, 5).is_err());
    }

    #[test]
    fn memory_bank_matches_list_reference() {
        let mut r = rng(4);
        for _ in 0..1000 {
            let cap = r.random_range(1..12);
            let mut bank = MemoryBank::<f64>::new(cap, 2).unwrap();
            let mut reference: Vec<[f64; 2]> = Vec::new();
            let mut next = 0.0;
            for _ in 0..r.random_range(0..10) {
                let n = r.random_range(1..=cap);
                let rows: Vec<Vec<f64>> = (0..n)
                    .map(|_| {
                        next += 1.0;
                        vec![next, -next]
                    })
                    .collect();
                bank.push(&tensor(&rows)).unwrap();
                reference.extend(rows.iter().map(|v| [v[0], v[1]]));
                let keep = reference.len().saturating_sub(cap);
                reference.drain(..keep);
            }
            let got: Vec<[f64; 2]> = bank.entries().map(|e| [e[0], e[1]]).collect();
            assert_eq!(got, reference);
        }
    }

    #[test]
    fn secl_orthonormal_and_single() {
        let empty = MemoryBank::<f64>::new(8, 4).unwrap();
        let e = eye_rows(2, 4);
        assert!((secl(&e, &e, &e, &empty, 1.0) - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-6);
        let one = eye_rows(1, 4);
        assert_eq!(secl(&one, &one, &one, &empty, 1.0), 0.0);
    }

    #[test]
    fn secl_matches_oracle_for_bank_sizes() {
        let mut r = rng(5);
        let (n, d, tau) = (6, 8, 0.3);
        for k in [0usize, 8, 64] {
            let (e, z, s) = (unit_rows(&mut r, n, d), unit_rows(&mut r, n, d), unit_rows(&mut r, n, d));
            let past = unit_rows(&mut r, k.max(1), d);
            let mut bank = MemoryBank::<f64>::new(64, d).unwrap();
            if k > 0 {
                bank.push(&tensor(&past)).unwrap();
            }
            let mut cands = e.clone();
            if k > 0 {
                cands.extend(past);
            }
            let want = 0.5 * (nce_oracle(&z, &cands, tau) + nce_oracle(&s, &cands, tau));
            let got = secl(&e, &z, &s, &bank, tau);
            assert!((got - want).abs() < 1e-6, "bank {k}: {got} vs {want}");
        }
    }

    #[test]
    fn secl_with_orthogonal_bank_copies() {
        let (n, k) = (3, 5);
        let e = eye_rows(n, n + 1);
        let mut bank = MemoryBank::<f64>::new(k, n + 1).unwrap();
        let mut far = vec![0.0; n + 1];
        far[n] = 1.0;
        bank.push(&tensor(&vec![far.clone(); k])).unwrap();
        let mut cands = e.clone();
        cands.extend(vec![far; k]);
        let oracle = nce_oracle(&e, &cands, 1.0);
        let closed = (1.0 + (n - 1 + k) as f64 * (-1.0f64).exp()).ln();
        let got = secl(&e, &e, &e, &bank, 1.0);
        assert!((got - oracle).abs() < 1e-6);
        assert!((got - closed).abs() < 1e-6);
    }

    #[test]
    fn secl_leaves_bank_without_gradient() {
        let mut r = rng(6);
        let (n, d) = (4, 5);
        let past = tensor(&unit_rows(&mut r, 7, d));
        let mut bank = MemoryBank::<f64>::new(16, d).unwrap();
        bank.push(&past).unwrap();
        let snapshot = bank.clone();
        let mut g = Graph::new();
        let vars: Vec<Var> = (0..3).map(|_| g.leaf(tensor(&unit_rows(&mut r, n, d)), true)).collect();
        let l = secl_loss(&mut g, vars[0], vars[1], vars[2], &bank, 0.1).unwrap();
        g.backward(l).unwrap();
        assert!(vars.iter().all(|&v| g.grad(v).is_some()));
        let bank_nodes: Vec<Var> = g.vars().filter(|&v| g.value(v) == &past).collect();
        assert_eq!(bank_nodes.len(), 1);
        assert!(g.grad(bank_nodes[0]).is_none());
        assert!(!g.requires_grad(bank_nodes[0]));
        assert_eq!(bank, snapshot);
    }

    #[test]
    fn secl_gradcheck_with_bank() {
        let mut r = rng(7);
        let d = 4;
        let mut bank = MemoryBank::<f64>::new(8, d).unwrap();
        bank.push(&tensor(&unit_rows(&mut r, 8, d))).unwrap();
        let inputs: Vec<Tensor<f64>> = (0..3).map(|_| tensor(&unit_rows(&mut r, 3, d))).collect();
        let report = grad_check(
            "secl",
            &inputs,
            |g, v| {
                let n: Vec<Var> = v.iter().map(|&x| g.l2_normalize_rows(x, 1e-12)).collect();
                secl_loss(g, n[0], n[1], n[2], &bank, 0.5)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn combined_examples_and_linearity() {
        let mut g = Graph::<f64>::new();
        let (a, b) = (g.constant(Tensor::scalar(0.3)), g.constant(Tensor::scalar(0.5)));
        let c = combined_loss(&mut g, a, b, 1.0).unwrap();
        assert!((g.value(c).item() - 0.8).abs() < 1e-15);
        let c0 = combined_loss(&mut g, a, b, 0.0).unwrap();
        assert_eq!(g.value(c0).item(), 0.3);

        // Gradient of the combination equals the weighted sum of per-loss gradients.
        let mut r = rng(8);
        let (n, d, lambda) = (3, 4, 0.7);
        let raw: Vec<Tensor<f64>> = (0..3).map(|_| tensor(&unit_rows(&mut r, n, d))).collect();
        let mut bank = MemoryBank::<f64>::new(4, d).unwrap();
        bank.push(&tensor(&unit_rows(&mut r, 4, d))).unwrap();
        let grads = |which: u8| -> Vec<Tensor<f64>> {
            let mut g = Graph::new();
            let v: Vec<Var> = raw.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let n: Vec<Var> = v.iter().map(|&x| g.l2_normalize_rows(x, 1e-12)).collect();
            let i = incl_loss(&mut g, n[1], n[2], 0.2).unwrap();
            let s = secl_loss(&mut g, n[0], n[1], n[2], &bank, 0.2).unwrap();
            let root = match which {
                0 => combined_loss(&mut g, i, s, lambda).unwrap(),
                1 => i,
                _ => g.scale(s, lambda),
            };
            g.backward(root).unwrap();
            v.iter()
                .map(|&x| g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(&[n.len(), d])))
                .collect()
        };
        let (all, gi, gs) = (grads(0), grads(1), grads(2));
        for k in 0..3 {
            for j in 0..all[k].numel() {
                let want = gi[k].data()[j] + gs[k].data()[j];
                assert!((all[k].data()[j] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate(256).is_ok());
        assert!(LossConfig { tau: 0.0, ..Default::default() }.validate(8).is_err());
        assert!(LossConfig { lambda_secl: -1.0, ..Default::default() }.validate(8).is_err());
        assert!(LossConfig { bank_capacity: 4, ..Default::default() }.validate(8).is_err());
    }

    proptest! {
        #[test]
        fn incl_is_symmetric(seed in 0u64..1000, n in 1usize..6) {
            let mut r = rng(1000 + seed);
            let (z, s) = (unit_rows(&mut r, n, 4), unit_rows(&mut r, n, 4));
            prop_assert_eq!(incl(&z, &s, 0.1), incl(&s, &z, 0.1));
        }

        #[test]
        fn incl_nonnegative_when_diagonal_dominates(seed in 0u64..1000, n in 1usize..6) {
            // Perturbed identity: each row is closest to its own partner.
            let mut r = rng(2000 + seed);
            let noisy = |r: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                eye_rows(n, n)
                    .into_iter()
                    .map(|mut v| {
                        v.iter_mut().for_each(|x| *x += r.random_range(-0.1..0.1));
                        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        v.into_iter().map(|x| x / norm).collect()
                    })
                    .collect()
            };
            let (z, s) = (noisy(&mut r), noisy(&mut r));
            prop_assert!(incl(&z, &s, 0.1) >= 0.0);
        }
    }
}
