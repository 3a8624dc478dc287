//! Batch assembly, optimization, checkpoints and the training loop.

mod batch;
mod checkpoint;
mod metrics;
mod model;
mod objective;
mod optim;

pub use batch::{
    assemble_batch, assemble_from_indices, draw_indices, group_by_similarity, Batch, BatchComposed, BatchRegion,
};
pub use checkpoint::{peek_precision, Checkpoint, MAGIC, VERSION};
pub use metrics::{read_metrics, MetricsRow, MetricsWriter};
pub use model::Model;
pub use objective::{batch_objective, cells_in_box, Objective};
pub use optim::{adamw_step, clip_grad_norm, learning_rate, AdamState};

use clim_tensor::{Real, Tape, Tensor};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, SamplingMode};
use crate::error::{Error, Result};
use crate::eval::{eval_zero_shot_region, ZeroShotReport};
use crate::image::Image;
use crate::losses::LossKind;
use crate::mosaic::{plan_grid, GridSpec};
use crate::synth::{class_prompts, Concept, SynthDataset, Vocabulary};

/// Outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Number of updates applied so far, this one included.
    pub step: u64,
    pub loss: f64,
    pub components: Vec<(LossKind, f64)>,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Owns the model, the optimizer state and the batch generator.
pub struct Trainer<T: Real> {
    pub config: RunConfig,
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    tag_prompts: Vec<Vec<usize>>,
    prompt_of: Vec<Option<usize>>,
}

impl<T: Real> Trainer<T> {
    /// Fresh run. Parameters come from `config.seed`; batches from stream 0
    /// of a generator with the same seed.
    pub fn new(config: RunConfig, vocab: &Vocabulary) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config, vocab.len())?;
        let adam = AdamState::new(&model.store);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let base = Concept::base();
        let mut prompt_of = vec![None; Concept::COUNT];
        for (i, c) in base.iter().enumerate() {
            prompt_of[c.id()] = Some(i);
        }
        Ok(Self {
            tag_prompts: class_prompts(vocab, &base)?,
            prompt_of,
            config,
            model,
            adam,
            rng,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint<T>, vocab: &Vocabulary) -> Result<Self> {
        let mut trainer = Self::new(ck.config, vocab)?;
        let fresh = trainer.model.store.entries();
        let loaded = ck.params.entries();
        let same = fresh.len() == loaded.len()
            && fresh
                .iter()
                .zip(loaded)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape() && a.decay == b.decay);
        if !same {
            return Err(Error::Config(
                "checkpoint parameters do not match its model configuration".into(),
            ));
        }
        trainer.model.store = ck.params;
        trainer.adam = ck.adam;
        trainer.rng = ck.rng;
        trainer.step = ck.step;
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            params: self.model.store.clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
        }
    }

    /// Draws the next training batch according to the sampling mode.
    pub fn next_batch(&mut self, data: &SynthDataset) -> Result<Batch> {
        let (_, n_mosaic) = self.config.batch_mix();
        if self.config.sampling == SamplingMode::Random || n_mosaic == 0 {
            return assemble_batch(&data.train, &self.config, &mut self.rng);
        }
        self.similarity_grouped_batch(data)
    }

    /// Mosaic cells grouped by cosine similarity of the current model's
    /// caption (or global image) embeddings within a random candidate pool.
    pub fn similarity_grouped_batch(&mut self, data: &SynthDataset) -> Result<Batch> {
        let (n_plain, n_mosaic) = self.config.batch_mix();
        let grids = (0..n_mosaic)
            .map(|_| plan_grid(&mut self.rng, &self.config.grid))
            .collect::<Result<Vec<GridSpec>>>()?;
        let plain = draw_indices(&mut self.rng, data.train.len(), n_plain)?;
        let pool_size = self.config.similarity_pool.min(data.train.len());
        let pool = draw_indices(&mut self.rng, data.train.len(), pool_size)?;
        let embs = match self.config.sampling {
            SamplingMode::TextSimilarity => {
                let seqs: Vec<Vec<usize>> = pool.iter().map(|&i| data.train[i].tokens.clone()).collect();
                self.model.embed_texts(&seqs)?
            }
            _ => {
                let size = self.config.canvas_size;
                let images: Vec<Image> = pool.iter().map(|&i| data.train[i].image.resize(size, size)).collect();
                self.model.embed_images(&images.iter().collect::<Vec<_>>())?
            }
        };
        let e = embs.shape()[1];
        let rows: Vec<Vec<f64>> = embs.to_f64_vec().chunks_exact(e).map(<[f64]>::to_vec).collect();
        let sizes: Vec<usize> = grids.iter().map(GridSpec::cells).collect();
        let groups = group_by_similarity(&rows, &sizes, &mut self.rng)?;
        let groups: Vec<(GridSpec, Vec<usize>)> = grids
            .into_iter()
            .zip(groups)
            .map(|(g, members)| (g, members.into_iter().map(|i| pool[i]).collect()))
            .collect();
        assemble_from_indices(&data.train, &plain, &groups, &self.config, &mut self.rng)
    }

    /// One optimizer step on `batch`.
    pub fn step_on(&mut self, batch: &Batch) -> Result<StepReport> {
        let lr = learning_rate(&self.config.optim, self.step, self.config.steps);
        let tape = Tape::new();
        let p = self.model.store.bind(&tape);
        let obj = batch_objective(&self.model, &p, batch, &self.config, &self.tag_prompts, &self.prompt_of)?;
        let loss = obj.total.item()?.to_f64().unwrap_or(f64::NAN);
        let mut grads = tape.backward(obj.total)?;
        let mut slots: Vec<Option<Tensor<T>>> = p.vars().iter().map(|&v| grads.take(v)).collect();
        let finite = loss.is_finite() && slots.iter().flatten().all(Tensor::all_finite);
        if !finite {
            return Err(self.non_finite(loss, &obj.components, &slots));
        }
        let grad_norm = if self.config.optim.grad_clip > 0.0 {
            clip_grad_norm(&mut slots, self.config.optim.grad_clip)
        } else {
            global_norm(&slots)
        };
        adamw_step(&mut self.model.store, &slots, &mut self.adam, &self.config.optim, lr);
        self.model.temperature.clamp(&mut self.model.store);
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            loss,
            components: obj.components,
            lr,
            grad_norm,
        })
    }

    fn non_finite(&self, loss: f64, components: &[(LossKind, f64)], grads: &[Option<Tensor<T>>]) -> Error {
        let mut norms: Vec<(f64, &str)> = grads
            .iter()
            .zip(self.model.store.entries())
            .filter_map(|(g, e)| {
                g.as_ref()
                    .map(|g| (g.norm().to_f64().unwrap_or(f64::NAN), e.name.as_str()))
            })
            .collect();
        norms.sort_by(|a, b| b.0.total_cmp(&a.0));
        let parts: Vec<String> = components.iter().map(|(k, v)| format!("{}={v}", k.name())).collect();
        let top: Vec<String> = norms
            .iter()
            .take(8)
            .map(|(n, name)| format!("{name}={n:.3e}"))
            .collect();
        Error::NonFinite {
            step: self.step + 1,
            detail: format!(
                "loss={loss} [{}]; largest grad norms: {}",
                parts.join(", "),
                top.join(", ")
            ),
        }
    }

    pub fn train_step(&mut self, data: &SynthDataset) -> Result<StepReport> {
        let batch = self.next_batch(data)?;
        self.step_on(&batch)
    }

    /// Zero-shot region accuracy on the first `eval_limit` evaluation
    /// samples (all when 0).
    pub fn evaluate(&self, data: &SynthDataset) -> Result<ZeroShotReport> {
        let n = match self.config.eval_limit {
            0 => data.eval.len(),
            k => k.min(data.eval.len()),
        };
        eval_zero_shot_region(
            &self.model,
            &data.eval[..n],
            &data.vocab,
            self.config.canvas_size,
            self.config.roi_sampling,
        )
    }

    fn eval_due(&self, step: u64) -> bool {
        let every = self.config.eval_every;
        step == self.config.steps || (every > 0 && step % every == 0)
    }

    fn log_due(&self, step: u64) -> bool {
        let every = self.config.log_every;
        self.eval_due(step) || (every > 0 && step % every == 0)
    }

    /// Trains until `until` updates have been applied, handing a metrics
    /// row to `on_row` at every logging or evaluation step. Which steps log
    /// depends only on the configuration, so a run split by a checkpoint
    /// produces the same rows as an uninterrupted one.
    pub fn fit(
        &mut self,
        data: &SynthDataset,
        until: u64,
        mut on_row: impl FnMut(&MetricsRow) -> Result<()>,
    ) -> Result<Option<StepReport>> {
        let mut last = None;
        while self.step < until {
            let report = self.train_step(data)?;
            if self.log_due(report.step) {
                let mut row = MetricsRow::new(
                    report.step,
                    report.loss,
                    &report.components,
                    self.model.logit_scale(),
                    report.lr,
                );
                if self.eval_due(report.step) {
                    let eval = self.evaluate(data)?;
                    info!(
                        "step {}: loss {:.4}, top1 base {:.3} novel {:.3}",
                        report.step, report.loss, eval.base.top1, eval.novel.top1
                    );
                    row = row.with_eval(&eval);
                }
                on_row(&row)?;
            }
            last = Some(report);
        }
        Ok(last)
    }
}

fn global_norm<T: Real>(grads: &[Option<Tensor<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        .sqrt()
}
