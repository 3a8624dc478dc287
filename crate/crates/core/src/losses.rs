//! Region-text alignment objectives.
//!
//! All losses operate on cosine similarities between unit-norm region and
//! text embeddings, scaled by a learnable logit scale ([`Temperature`]).

use clim_tensor::{lit, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

/// Learnable logit scale `s`, stored as `ln s` and clamped to `[min, max]`
/// after every optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct Temperature {
    pub log_scale: ParamId,
    pub min: f64,
    pub max: f64,
}

impl Temperature {
    pub const DEFAULT_INIT: f64 = 1.0 / 0.07;

    pub fn new<T: Real>(store: &mut ParamStore<T>, init: f64) -> Self {
        let log_scale = store.add("logit_scale", Tensor::scalar(T::from_f64_lossy(init.ln())), false);
        Self {
            log_scale,
            min: 1.0,
            max: 100.0,
        }
    }

    pub fn scale<'t, T: Real>(&self, p: &Bound<'t, T>) -> Var<'t, T> {
        p[self.log_scale].exp()
    }

    pub fn value<T: Real>(&self, store: &ParamStore<T>) -> f64 {
        store.get(self.log_scale).data()[0].to_f64().unwrap_or(f64::NAN).exp()
    }

    pub fn clamp<T: Real>(&self, store: &mut ParamStore<T>) {
        let (lo, hi) = (T::from_f64_lossy(self.min.ln()), T::from_f64_lossy(self.max.ln()));
        for v in store.get_mut(self.log_scale).data_mut() {
            *v = v.max(lo).min(hi);
        }
    }
}

/// Region and text embeddings with, for each region, the texts it matches.
pub struct EmbeddingBatch<'t, T: Real> {
    /// `[N, d]` unit rows.
    pub regions: Var<'t, T>,
    /// `[M, d]` unit rows.
    pub texts: Var<'t, T>,
    pub matches: Vec<Vec<usize>>,
}

impl<'t, T: Real> EmbeddingBatch<'t, T> {
    pub fn new(regions: Var<'t, T>, texts: Var<'t, T>, matches: Vec<Vec<usize>>) -> Result<Self> {
        let batch = Self {
            regions,
            texts,
            matches,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.regions.value().dims2()?;
        let (m, dt) = self.texts.value().dims2()?;
        if d != dt {
            return Err(Error::Loss(format!("region width {d} != text width {dt}")));
        }
        if self.matches.len() != n {
            return Err(Error::Loss(format!(
                "{} match lists for {n} regions",
                self.matches.len()
            )));
        }
        for (i, m_i) in self.matches.iter().enumerate() {
            if m_i.is_empty() {
                return Err(Error::Loss(format!("region {i} matches no text")));
            }
            if let Some(&j) = m_i.iter().find(|&&j| j >= m) {
                return Err(Error::Loss(format!("region {i} matches text {j} of {m}")));
            }
        }
        for (name, v) in [("region", self.regions), ("text", self.texts)] {
            let t = v.value();
            let width = t.shape()[1];
            for (i, row) in t.data().chunks_exact(width).enumerate() {
                let norm = row
                    .iter()
                    .map(|&x| x * x)
                    .sum::<T>()
                    .sqrt()
                    .to_f64()
                    .unwrap_or(f64::NAN);
                if (norm - 1.0).abs() > 1e-4 {
                    return Err(Error::Loss(format!("{name} row {i} has norm {norm}")));
                }
            }
        }
        Ok(())
    }

    /// Scaled cosine logits `s · f_v f_tᵀ`, `[N, M]`.
    pub fn logits(&self, scale: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.regions.matmul_t(self.texts)?.mul_scalar(scale)?)
    }

    /// The text index of every region when the matching is one-to-one.
    pub fn bijection(&self) -> Option<Vec<usize>> {
        bijection(&self.matches, self.texts.shape()[0])
    }
}

fn bijection(matches: &[Vec<usize>], texts: usize) -> Option<Vec<usize>> {
    if matches.len() != texts {
        return None;
    }
    let mut seen = vec![false; texts];
    let mut out = Vec::with_capacity(texts);
    for m in matches {
        match m.as_slice() {
            &[j] if j < texts && !seen[j] => {
                seen[j] = true;
                out.push(j);
            }
            _ => return None,
        }
    }
    Some(out)
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &j) in perm.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Symmetric cross-entropy of a square logit matrix whose row `i` matches
/// column `targets[i]`.
fn symmetric_ce<'t, T: Real>(logits: Var<'t, T>, targets: &[usize]) -> Result<Var<'t, T>> {
    let rows = logits.cross_entropy(targets)?;
    let cols = logits.transpose()?.cross_entropy(&inverse(targets))?;
    Ok(rows.add(cols)?.scale(lit(0.5)))
}

/// CLIP's symmetric InfoNCE over `s · f_v f_tᵀ`.
pub fn info_nce<'t, T: Real>(batch: &EmbeddingBatch<'t, T>, scale: Var<'t, T>) -> Result<Var<'t, T>> {
    let targets = batch.bijection().ok_or_else(|| {
        Error::Loss("info_nce needs a one-to-one matching; use soft_target_ce for shared or multiple texts".into())
    })?;
    symmetric_ce(batch.logits(scale)?, &targets)
}

/// Row-stochastic target matrix spreading each row uniformly over its matches.
pub fn uniform_targets<T: Real>(matches: &[Vec<usize>], cols: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); matches.len() * cols];
    for (i, m) in matches.iter().enumerate() {
        let mut uniq = m.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.is_empty() || uniq.iter().any(|&j| j >= cols) {
            return Err(Error::Loss(format!("row {i} has invalid matches {m:?}")));
        }
        let w = T::one() / lit(uniq.len() as f64);
        for j in uniq {
            data[i * cols + j] = w;
        }
    }
    Ok(Tensor::new([matches.len(), cols], data)?)
}

/// Mean over rows of `-Σ_j t_ij log softmax(logits)_ij`.
pub fn soft_target_ce<'t, T: Real>(logits: Var<'t, T>, targets: &Tensor<T>) -> Result<Var<'t, T>> {
    let m = *targets.shape().last().unwrap_or(&0);
    if m == 0 {
        return Err(Error::Loss("soft_target_ce with no classes".into()));
    }
    for (i, row) in targets.data().chunks_exact(m).enumerate() {
        let sum: f64 = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < T::zero()) {
            return Err(Error::Loss(format!("target row {i} is not a distribution (sum {sum})")));
        }
    }
    Ok(logits.soft_cross_entropy(targets)?)
}

/// Symmetric contrastive loss that tolerates texts shared by several regions:
/// region→text and text→region soft-target cross-entropy with uniform
/// targets, averaged. Equals [`info_nce`] when the matching is one-to-one.
pub fn shared_text_contrastive<'t, T: Real>(batch: &EmbeddingBatch<'t, T>, scale: Var<'t, T>) -> Result<Var<'t, T>> {
    contrastive_logits(batch.logits(scale)?, &batch.matches)
}

/// The symmetric objective of [`shared_text_contrastive`] on precomputed
/// `[N, M]` logits.
pub fn contrastive_logits<'t, T: Real>(logits: Var<'t, T>, matches: &[Vec<usize>]) -> Result<Var<'t, T>> {
    let (n, m) = logits.value().dims2()?;
    if matches.len() != n {
        return Err(Error::Loss(format!("{} match lists for {n} rows", matches.len())));
    }
    if let Some(targets) = bijection(matches, m) {
        return symmetric_ce(logits, &targets);
    }
    let forward = soft_target_ce(logits, &uniform_targets(matches, m)?)?;
    let mut by_text = vec![Vec::new(); m];
    for (i, ms) in matches.iter().enumerate() {
        for &j in ms {
            by_text[j].push(i);
        }
    }
    if let Some(j) = by_text.iter().position(Vec::is_empty) {
        return Err(Error::Loss(format!("text {j} matches no region")));
    }
    let backward = soft_target_ce(logits.transpose()?, &uniform_targets(&by_text, n)?)?;
    Ok(forward.add(backward)?.scale(lit(0.5)))
}

/// Logits `s · cos + b` broadcast from a one-element bias.
fn biased_logits<'t, T: Real>(cos: Var<'t, T>, scale: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
    let (n, m) = cos.value().dims2()?;
    let tape = cos.tape();
    let b = tape
        .constant(Tensor::ones([n, 1]))
        .matmul(bias.reshape([1, 1])?.matmul(tape.constant(Tensor::ones([1, m])))?)?;
    Ok(cos.mul_scalar(scale)?.add(b)?)
}

/// Multi-label binary cross-entropy: for each region, the sum over texts of
/// BCE on `s · cos + b`; averaged over regions. `targets` is `[N, M]` of 0/1.
pub fn bce_multilabel<'t, T: Real>(
    regions: Var<'t, T>,
    texts: Var<'t, T>,
    targets: &Tensor<T>,
    scale: Var<'t, T>,
    bias: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let cos = regions.matmul_t(texts)?;
    if cos.value().shape() != targets.shape() {
        return Err(Error::Loss(format!(
            "targets {:?} for a {:?} similarity matrix",
            targets.shape(),
            cos.shape()
        )));
    }
    let n = targets.shape()[0];
    let logits = biased_logits(cos, scale, bias)?;
    Ok(logits.bce_with_logits(targets)?.scale(T::one() / lit(n as f64)))
}

/// Mean of all grid-word cosine similarities; rows must be unit-norm.
pub fn grounding_score<'t, T: Real>(grid: Var<'t, T>, words: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(grid.matmul_t(words)?.mean())
}

/// Grounding scores of every region grid against every caption, `[N, M]`.
///
/// Uses `mean_{a,b} g_a·w_b = (mean_a g_a)·(mean_b w_b)`, so each region and
/// caption is reduced to one mean vector before a single product.
pub fn grounding_scores<'t, T: Real>(grids: &[Var<'t, T>], words: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    if grids.is_empty() || words.is_empty() {
        return Err(Error::Loss(
            "grounding scores need at least one region and one caption".into(),
        ));
    }
    let means = |vs: &[Var<'t, T>]| -> Result<Var<'t, T>> {
        let rows: Vec<_> = vs
            .iter()
            .map(|v| v.mean_axis(0))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Var::concat(&rows, 0)?)
    };
    Ok(means(grids)?.matmul_t(means(words)?)?)
}

/// Symmetric cross-entropy over `s · scores`; captions shared by several
/// regions get uniform soft targets as in [`shared_text_contrastive`].
pub fn grounding_loss<'t, T: Real>(
    scores: Var<'t, T>,
    matches: &[Vec<usize>],
    scale: Var<'t, T>,
) -> Result<Var<'t, T>> {
    contrastive_logits(scores.mul_scalar(scale)?, matches)
}

/// Which objectives a run optimizes and their weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub info_nce: f64,
    pub bce_tag: f64,
    pub soft_target_ce: f64,
    pub grounding: f64,
    /// Relative weight of composed regions within their objective.
    pub composed: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            info_nce: 1.0,
            bce_tag: 0.0,
            soft_target_ce: 0.0,
            grounding: 0.0,
            composed: 1.0,
        }
    }
}

impl LossWeights {
    pub fn only(kind: LossKind) -> Self {
        let mut w = Self {
            info_nce: 0.0,
            ..Self::default()
        };
        *w.weight_mut(kind) = 1.0;
        w
    }

    pub fn weight(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::InfoNce => self.info_nce,
            LossKind::BceTag => self.bce_tag,
            LossKind::SoftTargetCe => self.soft_target_ce,
            LossKind::Grounding => self.grounding,
        }
    }

    fn weight_mut(&mut self, kind: LossKind) -> &mut f64 {
        match kind {
            LossKind::InfoNce => &mut self.info_nce,
            LossKind::BceTag => &mut self.bce_tag,
            LossKind::SoftTargetCe => &mut self.soft_target_ce,
            LossKind::Grounding => &mut self.grounding,
        }
    }

    pub fn enabled(&self) -> Vec<LossKind> {
        LossKind::ALL.into_iter().filter(|&k| self.weight(k) != 0.0).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.info_nce,
            self.bce_tag,
            self.soft_target_ce,
            self.grounding,
            self.composed,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if self.enabled().is_empty() {
            return Err(Error::Config("no loss is enabled".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    InfoNce,
    BceTag,
    SoftTargetCe,
    Grounding,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::InfoNce,
        LossKind::BceTag,
        LossKind::SoftTargetCe,
        LossKind::Grounding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::InfoNce => "info_nce",
            LossKind::BceTag => "bce_tag",
            LossKind::SoftTargetCe => "soft_target_ce",
            LossKind::Grounding => "grounding",
        }
    }
}
