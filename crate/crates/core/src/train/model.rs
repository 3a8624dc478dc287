//! The trainable model: both encoders, the logit scale and the tag-loss bias.

use clim_tensor::{Real, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::encoders::{TextEncoder, VisionEncoder, VisionPaths};
use crate::error::Result;
use crate::image::Image;
use crate::losses::Temperature;
use crate::params::{ParamId, ParamStore};
use crate::synth::Vocabulary;

/// Generator stream reserved for parameter initialization.
const INIT_STREAM: u64 = 1;

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub store: ParamStore<T>,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub temperature: Temperature,
    pub bce_bias: ParamId,
}

impl<T: Real> Model<T> {
    /// Initializes from `config.seed`. Parameters are drawn in `f64` and then
    /// rounded, so both precisions start from the same values.
    pub fn new(config: &RunConfig, vocab_size: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(INIT_STREAM);
        let mut store = ParamStore::<f64>::new();
        let vision = VisionEncoder::new(config.vision_config(), &mut store, &mut rng)?;
        let text = TextEncoder::new(config.text_config(vocab_size), &mut store, &mut rng)?;
        let temperature = Temperature::new(&mut store, config.temperature_init);
        let bce_bias = store.add("bce_bias", Tensor::scalar(config.bce_bias_init), false);
        Ok(Self {
            store: store.cast(),
            vision,
            text,
            temperature,
            bce_bias,
        })
    }

    pub fn logit_scale(&self) -> f64 {
        self.temperature.value(&self.store)
    }

    /// Unit-norm caption embeddings `[n, embed_dim]` with frozen parameters.
    pub fn embed_texts(&self, seqs: &[Vec<usize>]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        Ok(self.text.forward(&p, seqs, Vocabulary::END)?.pooled.to_tensor())
    }

    /// Unit-norm global image embeddings `[n, embed_dim]` with frozen parameters.
    pub fn embed_images(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let out = self.vision.forward(&p, images, VisionPaths::Global)?;
        Ok(out.global.expect("global path requested").to_tensor())
    }
}
