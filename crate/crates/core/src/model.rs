//! The three encoders plus the lookup decoder, and the per-batch forward pass.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::datagen::TripleBatch;
use crate::encoders::{LocConfig, LocEncoder, Vit, VitConfig};
use crate::error::{Error, Result};
use crate::geo::{GeoPoint, LocalCoord};
use crate::inr::{inr_lookup, unfold3x3, FTheta, Lookup};
use crate::objectives::{combined_loss, incl_loss, secl_loss, LossConfig, MemoryBank};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, Domain};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub rs: VitConfig,
    pub sv: VitConfig,
    pub loc: LocConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let vit = |channels, image_size| VitConfig {
            channels,
            image_size,
            patch: 4,
            width: 64,
            depth: 2,
            heads: 4,
            ff_width: 128,
            out_dim: 64,
        };
        Self {
            embed_dim: 64,
            rs: vit(3, 32),
            sv: vit(1, 16),
            loc: LocConfig {
                frequencies: 128,
                sigma: 1024.0,
                hidden: 256,
                out_dim: 64,
            },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.rs.validate()?;
        self.sv.validate()?;
        let d = self.embed_dim;
        if self.rs.out_dim != d || self.sv.out_dim != d || self.loc.out_dim != d {
            return Err(Error::Config(format!(
                "all encoders must output the shared dimension {d}"
            )));
        }
        if self.rs.grid() < 2 {
            return Err(Error::Config("remote-sensing grid must be at least 2x2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub rs: Vit,
    pub sv: Vit,
    pub loc: LocEncoder,
    pub ftheta: FTheta,
}

/// Normalized embeddings of one batch, all `[B, D]`.
#[derive(Clone, Copy, Debug)]
pub struct BatchEmbeddings {
    pub z: Var,
    pub s: Var,
    pub e: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub incl: Var,
    pub secl: Var,
    pub total: Var,
    pub embeddings: BatchEmbeddings,
}

impl Model {
    /// Registers all parameters in `store`. Initialization draws from a single
    /// stream, in registration order.
    pub fn build<R: Real>(cfg: ModelConfig, store: &mut ParamStore<R>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, Domain::Init, 0);
        let rs = Vit::new(store, "rs", cfg.rs, &mut rng)?;
        let sv = Vit::new(store, "sv", cfg.sv, &mut rng)?;
        let loc = LocEncoder::new(store, "loc", cfg.loc, &mut rng)?;
        let ftheta = FTheta::new(store, "ftheta", cfg.embed_dim, &mut rng);
        Ok(Self {
            cfg,
            rs,
            sv,
            loc,
            ftheta,
        })
    }

    pub fn init<R: Real>(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore<R>)> {
        let mut store = ParamStore::new();
        let model = Self::build(cfg, &mut store, seed)?;
        Ok((model, store))
    }

    pub fn grid(&self) -> usize {
        self.cfg.rs.grid()
    }

    /// Parameters of the location MLP (excluding the frozen Fourier matrix).
    pub fn loc_mlp_params(&self) -> Vec<ParamId> {
        self.loc
            .layers
            .iter()
            .flat_map(|l| std::iter::once(l.weight).chain(l.bias))
            .collect()
    }

    /// Unfolded feature maps `[B, P, P, 9D]` of `[B, C, H, W]` images.
    pub fn rs_unfolded<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, images: &Tensor<R>) -> Result<Var> {
        let fm = self.rs.encode_map(g, store, images)?;
        unfold3x3(g, fm)
    }

    /// One normalized lookup per image.
    pub fn rs_embed<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        images: &Tensor<R>,
        local: &[LocalCoord],
    ) -> Result<Var> {
        let um = self.rs_unfolded(g, store, images)?;
        let pairs: Vec<(usize, LocalCoord)> = local.iter().copied().enumerate().collect();
        inr_lookup(g, store, &self.ftheta, um, &pairs, Lookup::Ensemble, true)
    }

    pub fn sv_embed<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, images: &Tensor<R>) -> Result<Var> {
        self.sv.encode_pooled(g, store, images)
    }

    pub fn loc_embed<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, points: &[GeoPoint]) -> Result<Var> {
        self.loc.encode(g, store, points)
    }

    pub fn embed_batch<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        batch: &TripleBatch<R>,
    ) -> Result<BatchEmbeddings> {
        Ok(BatchEmbeddings {
            z: self.rs_embed(g, store, &batch.rs, &batch.local)?,
            s: self.sv_embed(g, store, &batch.sv)?,
            e: self.loc_embed(g, store, &batch.locs)?,
        })
    }

    /// Full objective for a batch; the bank must hold only past batches.
    pub fn losses<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        batch: &TripleBatch<R>,
        bank: &MemoryBank<R>,
        loss: &LossConfig,
    ) -> Result<LossVars> {
        let emb = self.embed_batch(g, store, batch)?;
        let incl = incl_loss(g, emb.z, emb.s, loss.tau)?;
        let secl = secl_loss(g, emb.e, emb.z, emb.s, bank, loss.tau)?;
        let total = combined_loss(g, incl, secl, loss.lambda_secl)?;
        Ok(LossVars {
            incl,
            secl,
            total,
            embeddings: emb,
        })
    }
}
