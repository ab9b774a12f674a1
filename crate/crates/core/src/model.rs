//! The full generator and the generator/discriminator pair.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsgl_tensor::{ParamStore, Scalar, Tensor, Var};

use crate::balance::BalanceModule;
use crate::config::{Config, ModelConfig};
use crate::data::Batch;
use crate::decoder::{AuxDecoder, Decoder};
use crate::discriminator::Discriminator;
use crate::error::Result;
use crate::recon::{ReconstructedSet, Reconstructor};
use crate::structure::{Level, StructureEncoder};
use crate::texture::TextureEncoder;

/// Masked image, masked smoothed image and the mask.
pub const TEXTURE_CHANNELS: usize = 7;

#[derive(Debug, Clone)]
pub struct GeneratorOutput<T: Scalar> {
    /// Final image, composited when the decoder is configured to.
    pub output: Var<T>,
    pub raw: Var<T>,
    pub aux: Var<T>,
    pub structure: Vec<Level<T>>,
    pub recon: ReconstructedSet<T>,
    pub balanced: Vec<Var<T>>,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub structure: StructureEncoder,
    pub texture: TextureEncoder,
    pub recon: Reconstructor,
    pub balance: BalanceModule,
    pub decoder: Decoder,
    pub aux: AuxDecoder,
}

impl Generator {
    pub fn new<T: Scalar, R: Rng>(ps: &mut ParamStore<T>, cfg: &ModelConfig, structure_in: usize, rng: &mut R) -> Result<Self> {
        Ok(Generator {
            structure: StructureEncoder::new(ps, structure_in, &cfg.structure, rng)?,
            texture: TextureEncoder::new(ps, TEXTURE_CHANNELS, &cfg.texture, rng)?,
            recon: Reconstructor::new(ps, cfg, rng)?,
            balance: BalanceModule::new(ps, cfg, rng)?,
            decoder: Decoder::new(ps, cfg, rng)?,
            aux: AuxDecoder::new(ps, cfg, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, batch: &Batch<T>) -> Result<GeneratorOutput<T>> {
        let structure = self.structure.forward(ps, &Var::constant(batch.structure.clone()), &batch.mask)?;
        let recon = self.recon.reconstruction_pass(ps, &self.texture, &Var::constant(batch.texture.clone()), &batch.mask, &structure)?;
        let balanced = self.balance.forward(ps, &recon)?;
        let raw = self.decoder.decode(ps, &balanced, &recon)?;
        let output = if self.decoder.composite { crate::decoder::composite(&raw, &batch.image, &batch.mask)? } else { raw.clone() };
        let aux = self.aux.forward(ps, &structure.last().unwrap().features)?;
        Ok(GeneratorOutput { output, raw, aux, structure, recon, balanced })
    }
}

/// Generator and discriminator with their own parameter stores.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub gen_params: ParamStore<T>,
    pub generator: Generator,
    pub disc_params: ParamStore<T>,
    pub discriminator: Discriminator,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialisation from `config.seed`.
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut gen_params = ParamStore::new();
        let generator = Generator::new(&mut gen_params, &config.model, config.data.prior.channels() + 1, &mut rng)?;
        let mut disc_params = ParamStore::new();
        let discriminator = Discriminator::new(&mut disc_params, &config.model.discriminator, &mut rng)?;
        Ok(Model { config: config.model.clone(), gen_params, generator, disc_params, discriminator })
    }

    pub fn generate(&self, batch: &Batch<T>) -> Result<GeneratorOutput<T>> {
        self.generator.forward(&self.gen_params, batch)
    }

    /// Inference without building a graph.
    pub fn inpaint(&self, batch: &Batch<T>) -> Result<Tensor<T>> {
        let was = self.gen_params.is_trainable();
        self.gen_params.set_trainable(false);
        let out = self.generate(batch).map(|o| o.output.value().clone());
        self.gen_params.set_trainable(was);
        out
    }

    pub fn num_params(&self) -> usize {
        self.gen_params.num_scalars() + self.disc_params.num_scalars()
    }
}
