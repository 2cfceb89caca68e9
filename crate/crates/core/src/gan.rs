//! The measure-function GAN family and its local training steps.
//!
//! A [`MeasureFunction`] φ turns discriminator probabilities into values; the
//! batch value of a generator/discriminator pair is
//! `mean φ(D(x)) + mean φ(1 − D(G(z)))`. The discriminator ascends that value
//! and the generator descends the non-saturating objective
//! `−mean φ(D(G(z)))` plus any extra penalties.

use std::fmt;

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    Activation, Architecture, Conditioning, LayerSpec, Network, NnError, Optimizer, OptimizerKind,
    Shape,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GanError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("measure function input is NaN")]
    NanInput,
    #[error("clamp epsilon {0} outside (0, 1e-3]")]
    ClampEpsilon(f64),
    #[error("custom measure `{0}` is not monotone nondecreasing")]
    NotMonotone(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("conditional value requires labels on {0}")]
    MissingLabels(&'static str),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("non-finite gradient in {0} step")]
    NonFinite(&'static str),
    #[error("invalid architecture: {0}")]
    Architecture(String),
}

/// A user-supplied measure with its derivative.
#[derive(Clone, Copy)]
pub struct CustomMeasure {
    pub name: &'static str,
    pub value: fn(f64) -> f64,
    pub derivative: fn(f64) -> f64,
}

impl fmt::Debug for CustomMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomMeasure")
            .field("name", &self.name)
            .finish()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum MeasureKind {
    Log,
    Custom(CustomMeasure),
}

/// φ: [0,1] → ℝ, applied after clamping to `[ε, 1 − ε]`.
#[derive(Clone, Copy, Debug)]
pub struct MeasureFunction {
    kind: MeasureKind,
    clamp_epsilon: f64,
}

pub const DEFAULT_CLAMP_EPSILON: f64 = 1e-7;

impl Default for MeasureFunction {
    fn default() -> Self {
        Self::log()
    }
}

impl MeasureFunction {
    pub fn log() -> Self {
        Self {
            kind: MeasureKind::Log,
            clamp_epsilon: DEFAULT_CLAMP_EPSILON,
        }
    }

    pub fn with_clamp(kind: MeasureKind, clamp_epsilon: f64) -> Result<Self, GanError> {
        if !(clamp_epsilon > 0.0 && clamp_epsilon <= 1e-3) {
            return Err(GanError::ClampEpsilon(clamp_epsilon));
        }
        if let MeasureKind::Custom(c) = kind {
            // Grid check over the clamped domain.
            let n = 1000;
            let mut prev = (c.value)(clamp_epsilon);
            for i in 1..=n {
                let p = clamp_epsilon + (1.0 - 2.0 * clamp_epsilon) * i as f64 / n as f64;
                let v = (c.value)(p);
                if !v.is_finite() || v < prev {
                    return Err(GanError::NotMonotone(c.name));
                }
                prev = v;
            }
        }
        Ok(Self {
            kind,
            clamp_epsilon,
        })
    }

    pub fn kind(&self) -> MeasureKind {
        self.kind
    }

    pub fn clamp_epsilon(&self) -> f64 {
        self.clamp_epsilon
    }

    fn clamp(&self, p: f64) -> f64 {
        p.clamp(self.clamp_epsilon, 1.0 - self.clamp_epsilon)
    }

    pub fn apply(&self, p: f64) -> Result<f64, GanError> {
        if p.is_nan() {
            return Err(GanError::NanInput);
        }
        Ok(self.value(p))
    }

    /// φ(clamp(p)) for a non-NaN `p`.
    pub fn value(&self, p: f64) -> f64 {
        let p = self.clamp(p);
        match self.kind {
            MeasureKind::Log => p.ln(),
            MeasureKind::Custom(c) => (c.value)(p),
        }
    }

    /// d/dp φ(clamp(p)); zero where the clamp is active.
    pub fn derivative(&self, p: f64) -> f64 {
        if p < self.clamp_epsilon || p > 1.0 - self.clamp_epsilon {
            return 0.0;
        }
        match self.kind {
            MeasureKind::Log => 1.0 / p,
            MeasureKind::Custom(c) => (c.derivative)(p),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LatentDistribution {
    #[default]
    StandardNormal,
    UniformMinus1To1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentPrior {
    pub dimension: usize,
    #[serde(default)]
    pub distribution: LatentDistribution,
}

impl Default for LatentPrior {
    fn default() -> Self {
        Self {
            dimension: 100,
            distribution: LatentDistribution::StandardNormal,
        }
    }
}

impl LatentPrior {
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        match self.distribution {
            LatentDistribution::StandardNormal => {
                Array2::from_shape_simple_fn((n, self.dimension), || rng.sample(StandardNormal))
            }
            LatentDistribution::UniformMinus1To1 => {
                Array2::from_shape_simple_fn((n, self.dimension), || rng.random_range(-1.0..=1.0))
            }
        }
    }
}

/// Generator descriptor: latent input, layer list, tanh-bounded image output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub latent: LatentPrior,
    pub output: Shape,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub n_classes: Option<usize>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
}

/// Discriminator descriptor: image input, layer list, sigmoid scalar output.
/// Conditioning is concatenated at the first dense layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub n_classes: Option<usize>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
}

fn default_embed_dim() -> usize {
    10
}

impl GeneratorSpec {
    /// Dense → LeakyReLU stack ending in a tanh image head.
    pub fn mlp(
        latent: LatentPrior,
        hidden: &[usize],
        output: Shape,
        n_classes: Option<usize>,
    ) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(LayerSpec::dense(h));
            layers.push(LayerSpec::act(Activation::LeakyRelu));
        }
        layers.push(LayerSpec::dense(output.len()));
        layers.push(LayerSpec::act(Activation::Tanh));
        Self {
            latent,
            output,
            layers,
            n_classes,
            embed_dim: default_embed_dim(),
        }
    }

    pub fn is_conditional(&self) -> bool {
        self.n_classes.is_some()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input: Shape::flat(self.latent.dimension),
            layers: self.layers.clone(),
            conditioning: self.n_classes.map(|n_classes| Conditioning {
                n_classes,
                embed_dim: self.embed_dim,
                at_layer: 0,
            }),
        }
    }

    pub fn validate(&self) -> Result<(), GanError> {
        let arch = self.architecture();
        let out = arch.output_shape()?;
        if out.len() != self.output.len() {
            return Err(GanError::Architecture(format!(
                "generator produces {} values, declared output has {}",
                out.len(),
                self.output.len()
            )));
        }
        if arch.last_activation() != Some(Activation::Tanh) {
            return Err(GanError::Architecture(
                "generator must end in a tanh activation".into(),
            ));
        }
        Ok(())
    }
}

impl DiscriminatorSpec {
    /// Dense → LeakyReLU stack ending in a sigmoid probability.
    pub fn mlp(input: Shape, hidden: &[usize], n_classes: Option<usize>) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(LayerSpec::dense(h));
            layers.push(LayerSpec::act(Activation::LeakyRelu));
        }
        layers.push(LayerSpec::dense(1));
        layers.push(LayerSpec::act(Activation::Sigmoid));
        Self {
            input,
            layers,
            n_classes,
            embed_dim: default_embed_dim(),
        }
    }

    pub fn is_conditional(&self) -> bool {
        self.n_classes.is_some()
    }

    fn first_dense(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Dense { .. }))
            .unwrap_or(0)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input: self.input,
            layers: self.layers.clone(),
            conditioning: self.n_classes.map(|n_classes| Conditioning {
                n_classes,
                embed_dim: self.embed_dim,
                at_layer: self.first_dense(),
            }),
        }
    }

    /// Same layers with the final dense widened to `n_outputs`, the output
    /// activation dropped (logits), and conditioning removed.
    pub fn with_logit_head(&self, n_outputs: usize) -> Result<Architecture, GanError> {
        let mut layers = self.layers.clone();
        if matches!(layers.last(), Some(LayerSpec::Activation { .. })) {
            layers.pop();
        }
        match layers.last_mut() {
            Some(LayerSpec::Dense { units }) => *units = n_outputs,
            _ => {
                return Err(GanError::Architecture(
                    "discriminator must end in a dense layer".into(),
                ))
            }
        }
        Ok(Architecture {
            input: self.input,
            layers,
            conditioning: None,
        })
    }

    pub fn validate(&self) -> Result<(), GanError> {
        let arch = self.architecture();
        if arch.output_shape()?.len() != 1 {
            return Err(GanError::Architecture(
                "discriminator must output one probability".into(),
            ));
        }
        if arch.last_activation() != Some(Activation::Sigmoid) {
            return Err(GanError::Architecture(
                "discriminator must end in a sigmoid activation".into(),
            ));
        }
        Ok(())
    }
}

/// Images (one per row, values in [−1, 1]) with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    samples: Array2<f64>,
    shape: Shape,
    labels: Option<Vec<usize>>,
}

impl LabeledBatch {
    pub fn new(
        samples: Array2<f64>,
        shape: Shape,
        labels: Option<Vec<usize>>,
    ) -> Result<Self, GanError> {
        if samples.ncols() != shape.len() {
            return Err(GanError::Shape(format!(
                "rows have {} values, shape needs {}",
                samples.ncols(),
                shape.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != samples.nrows() {
                return Err(GanError::Shape(format!(
                    "{} labels for {} samples",
                    l.len(),
                    samples.nrows()
                )));
            }
        }
        if samples.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(GanError::Shape("pixel values must lie in [-1, 1]".into()));
        }
        Ok(Self {
            samples,
            shape,
            labels,
        })
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            samples: self.samples.select(ndarray::Axis(0), idx),
            shape: self.shape,
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn into_parts(self) -> (Array2<f64>, Shape, Option<Vec<usize>>) {
        (self.samples, self.shape, self.labels)
    }
}

/// Latent codes with the labels a conditional generator is asked for.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    pub z: Array2<f64>,
    pub labels: Option<Vec<usize>>,
}

impl LatentBatch {
    pub fn new(z: Array2<f64>, labels: Option<Vec<usize>>) -> Self {
        Self { z, labels }
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }
}

/// A site's generator/discriminator pair with optimizer state.
#[derive(Clone, Debug)]
pub struct GanPair {
    pub generator: Network,
    pub discriminator: Network,
    pub latent: LatentPrior,
    gen_opt: Optimizer,
    disc_opt: Optimizer,
}

impl GanPair {
    /// Initializes the generator then the discriminator from `rng`.
    pub fn new<R: Rng + ?Sized>(
        gen: &GeneratorSpec,
        disc: &DiscriminatorSpec,
        optimizer: OptimizerKind,
        rng: &mut R,
    ) -> Result<Self, GanError> {
        gen.validate()?;
        disc.validate()?;
        if gen.output != disc.input {
            return Err(GanError::Architecture(
                "generator output shape differs from discriminator input".into(),
            ));
        }
        if gen.n_classes != disc.n_classes {
            return Err(GanError::Architecture(
                "generator and discriminator disagree on conditioning".into(),
            ));
        }
        let generator = Network::new(gen.architecture(), rng)?;
        let discriminator = Network::new(disc.architecture(), rng)?;
        Ok(Self::from_networks(
            generator,
            discriminator,
            gen.latent,
            optimizer,
        ))
    }

    pub fn from_networks(
        generator: Network,
        discriminator: Network,
        latent: LatentPrior,
        optimizer: OptimizerKind,
    ) -> Self {
        let gen_opt = Optimizer::new(optimizer, generator.n_params());
        let disc_opt = Optimizer::new(optimizer, discriminator.n_params());
        Self {
            generator,
            discriminator,
            latent,
            gen_opt,
            disc_opt,
        }
    }

    pub fn is_conditional(&self) -> bool {
        self.generator.is_conditional()
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.generator.n_classes()
    }
}

/// Differentiable scalar penalty on a batch of generated samples.
pub trait GeneratorPenalty: Sync {
    /// Penalty value and its gradient with respect to `generated`.
    fn evaluate(
        &self,
        generated: &Array2<f64>,
        labels: Option<&[usize]>,
    ) -> Result<(f64, Array2<f64>), GanError>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Objective on the batch before the update.
    pub value: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorObjective {
    /// Base objective plus penalties.
    pub loss: f64,
    pub base_loss: f64,
    pub penalties: Vec<f64>,
    pub grads: Vec<f64>,
}

fn conditioning_labels<'a>(
    net: &Network,
    labels: Option<&'a [usize]>,
    what: &'static str,
) -> Result<Option<&'a [usize]>, GanError> {
    match net.n_classes() {
        None => Ok(None),
        Some(n_classes) => {
            let labels = labels.ok_or(GanError::MissingLabels(what))?;
            if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
                return Err(GanError::LabelOutOfRange { label, n_classes });
            }
            Ok(Some(labels))
        }
    }
}

fn check_batches(
    disc: &Network,
    real: &LabeledBatch,
    latent: &LatentBatch,
) -> Result<(), GanError> {
    if real.is_empty() || latent.is_empty() {
        return Err(GanError::EmptyBatch);
    }
    if real.shape() != disc.input_shape() {
        return Err(GanError::Shape(format!(
            "real batch {:?} vs discriminator {:?}",
            real.shape(),
            disc.input_shape()
        )));
    }
    Ok(())
}

/// Batch estimate of `E φ(D(x)) + E φ(1 − D(G(z)))`.
pub fn gan_value(
    gen: &Network,
    disc: &Network,
    real: &LabeledBatch,
    latent: &LatentBatch,
    phi: &MeasureFunction,
) -> Result<f64, GanError> {
    check_batches(disc, real, latent)?;
    let fake = gen.predict(
        &latent.z,
        conditioning_labels(gen, latent.labels.as_deref(), "latent batch")?,
    )?;
    if fake.ncols() != disc.input_shape().len() {
        return Err(GanError::Shape(
            "generator output does not fit the discriminator".into(),
        ));
    }
    let d_real = disc.predict(
        real.samples(),
        conditioning_labels(disc, real.labels(), "real batch")?,
    )?;
    let d_fake = disc.predict(
        &fake,
        conditioning_labels(disc, latent.labels.as_deref(), "latent batch")?,
    )?;
    let real_term = d_real.iter().map(|&p| phi.value(p)).sum::<f64>() / d_real.len() as f64;
    let fake_term = d_fake.iter().map(|&p| phi.value(1.0 - p)).sum::<f64>() / d_fake.len() as f64;
    Ok(real_term + fake_term)
}

/// [`gan_value`] on conditioned tuples `(x|y)`; both networks must be conditional.
pub fn conditional_gan_value(
    gen: &Network,
    disc: &Network,
    real: &LabeledBatch,
    latent: &LatentBatch,
    phi: &MeasureFunction,
) -> Result<f64, GanError> {
    if real.labels().is_none() {
        return Err(GanError::MissingLabels("real batch"));
    }
    if latent.labels.is_none() {
        return Err(GanError::MissingLabels("latent batch"));
    }
    if !gen.is_conditional() || !disc.is_conditional() {
        return Err(GanError::Architecture(
            "conditional value needs conditional networks".into(),
        ));
    }
    gan_value(gen, disc, real, latent, phi)
}

/// Value of the batch objective and its gradient w.r.t. the discriminator.
pub fn discriminator_gradient(
    gen: &Network,
    disc: &Network,
    real: &LabeledBatch,
    latent: &LatentBatch,
    phi: &MeasureFunction,
) -> Result<(f64, Vec<f64>), GanError> {
    check_batches(disc, real, latent)?;
    let fake = gen.predict(
        &latent.z,
        conditioning_labels(gen, latent.labels.as_deref(), "latent batch")?,
    )?;
    let (d_real, tape_real) = disc.forward(
        real.samples(),
        conditioning_labels(disc, real.labels(), "real batch")?,
    )?;
    let (d_fake, tape_fake) = disc.forward(
        &fake,
        conditioning_labels(disc, latent.labels.as_deref(), "latent batch")?,
    )?;
    let nr = d_real.nrows() as f64;
    let nf = d_fake.nrows() as f64;
    let value = d_real.iter().map(|&p| phi.value(p)).sum::<f64>() / nr
        + d_fake.iter().map(|&p| phi.value(1.0 - p)).sum::<f64>() / nf;
    let g_real = d_real.mapv(|p| phi.derivative(p) / nr);
    let g_fake = d_fake.mapv(|p| -phi.derivative(1.0 - p) / nf);
    let mut grads = vec![0.0; disc.n_params()];
    disc.backward(&tape_real, g_real, Some(&mut grads));
    disc.backward(&tape_fake, g_fake, Some(&mut grads));
    Ok((value, grads))
}

fn norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// One ascent step on the batch value w.r.t. the discriminator parameters.
pub fn discriminator_step(
    pair: &mut GanPair,
    real: &LabeledBatch,
    latent: &LatentBatch,
    phi: &MeasureFunction,
    step_size: f64,
) -> Result<StepReport, GanError> {
    let (value, mut grads) =
        discriminator_gradient(&pair.generator, &pair.discriminator, real, latent, phi)?;
    if !value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(GanError::NonFinite("discriminator"));
    }
    let grad_norm = norm(&grads);
    grads.iter_mut().for_each(|g| *g = -*g);
    pair.disc_opt
        .descend(pair.discriminator.params_mut(), &grads, step_size);
    Ok(StepReport { value, grad_norm })
}

/// Non-saturating generator objective `−mean φ(D(G(z))) + Σ penalties`
/// and its gradient w.r.t. the generator parameters.
pub fn generator_gradient(
    gen: &Network,
    disc: &Network,
    latent: &LatentBatch,
    phi: &MeasureFunction,
    penalties: &[&dyn GeneratorPenalty],
) -> Result<GeneratorObjective, GanError> {
    if latent.is_empty() {
        return Err(GanError::EmptyBatch);
    }
    let labels = conditioning_labels(gen, latent.labels.as_deref(), "latent batch")?;
    let (fake, tape_gen) = gen.forward(&latent.z, labels)?;
    if fake.ncols() != disc.input_shape().len() {
        return Err(GanError::Shape(
            "generator output does not fit the discriminator".into(),
        ));
    }
    let (d_fake, tape_disc) = disc.forward(
        &fake,
        conditioning_labels(disc, latent.labels.as_deref(), "latent batch")?,
    )?;
    let n = d_fake.nrows() as f64;
    let base_loss = -d_fake.iter().map(|&p| phi.value(p)).sum::<f64>() / n;
    let mut grad_x = disc.backward(&tape_disc, d_fake.mapv(|p| -phi.derivative(p) / n), None);
    let mut values = Vec::with_capacity(penalties.len());
    for penalty in penalties {
        let (v, g) = penalty.evaluate(&fake, latent.labels.as_deref())?;
        if g.dim() != grad_x.dim() {
            return Err(GanError::Shape(
                "penalty gradient shape differs from generated batch".into(),
            ));
        }
        grad_x += &g;
        values.push(v);
    }
    let mut grads = vec![0.0; gen.n_params()];
    gen.backward(&tape_gen, grad_x, Some(&mut grads));
    Ok(GeneratorObjective {
        loss: base_loss + values.iter().sum::<f64>(),
        base_loss,
        penalties: values,
        grads,
    })
}

/// One descent step on the generator objective; the discriminator is untouched.
pub fn generator_step(
    pair: &mut GanPair,
    latent: &LatentBatch,
    phi: &MeasureFunction,
    step_size: f64,
    penalties: &[&dyn GeneratorPenalty],
) -> Result<(StepReport, Vec<f64>), GanError> {
    let obj = generator_gradient(&pair.generator, &pair.discriminator, latent, phi, penalties)?;
    if !obj.loss.is_finite() || obj.grads.iter().any(|g| !g.is_finite()) {
        return Err(GanError::NonFinite("generator"));
    }
    pair.gen_opt
        .descend(pair.generator.params_mut(), &obj.grads, step_size);
    Ok((
        StepReport {
            value: obj.loss,
            grad_norm: norm(&obj.grads),
        },
        obj.penalties,
    ))
}

/// Real minibatch (sampled without replacement) and fake latent codes for a
/// discriminator update; fake labels copy the real labels.
pub fn draw_discriminator_inputs<R: Rng + ?Sized>(
    data: &LabeledBatch,
    latent: &LatentPrior,
    batch_size: usize,
    rng: &mut R,
) -> Result<(LabeledBatch, LatentBatch), GanError> {
    if batch_size == 0 || data.len() < batch_size {
        return Err(GanError::EmptyBatch);
    }
    let idx = index::sample(rng, data.len(), batch_size).into_vec();
    let real = data.select(&idx);
    let z = latent.sample(batch_size, rng);
    let labels = real.labels().map(<[usize]>::to_vec);
    Ok((real, LatentBatch::new(z, labels)))
}

/// Latent codes for a generator update. Conditional generators
/// (`n_classes` set) get labels drawn uniformly over the classes.
pub fn draw_generator_inputs<R: Rng + ?Sized>(
    latent: &LatentPrior,
    batch_size: usize,
    n_classes: Option<usize>,
    rng: &mut R,
) -> Result<LatentBatch, GanError> {
    if batch_size == 0 {
        return Err(GanError::EmptyBatch);
    }
    let z = latent.sample(batch_size, rng);
    let labels = n_classes.map(|k| (0..batch_size).map(|_| rng.random_range(0..k)).collect());
    Ok(LatentBatch::new(z, labels))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalRoundReport {
    pub discriminator_value: f64,
    pub generator_loss: f64,
}

/// One discriminator step then one generator step on a site's own data.
pub fn local_round<R: Rng + ?Sized>(
    pair: &mut GanPair,
    data: &LabeledBatch,
    batch_size: usize,
    phi: &MeasureFunction,
    step_size: f64,
    rng: &mut R,
) -> Result<LocalRoundReport, GanError> {
    let (real, fake) = draw_discriminator_inputs(data, &pair.latent, batch_size, rng)?;
    let d = discriminator_step(pair, &real, &fake, phi, step_size)?;
    let latent = draw_generator_inputs(&pair.latent, batch_size, pair.n_classes(), rng)?;
    let (g, _) = generator_step(pair, &latent, phi, step_size, &[])?;
    Ok(LocalRoundReport {
        discriminator_value: d.value,
        generator_loss: g.value,
    })
}

/// Samples `labels.len()` (or `n`, unconditionally) images from a generator.
pub fn generate<R: Rng + ?Sized>(
    generator: &Network,
    latent: &LatentPrior,
    n: usize,
    labels: Option<&[usize]>,
    rng: &mut R,
) -> Result<Array2<f64>, GanError> {
    let n = labels.map_or(n, <[usize]>::len);
    let z = latent.sample(n, rng);
    Ok(generator.predict(
        &z,
        conditioning_labels(generator, labels, "generation request")?,
    )?)
}
