//! Federated GAN training coupled through a central adversary.
//!
//! Each of the N sites owns a [`GanPair`] and a private shard. The
//! [`CentralAdversary`] is an N-way source classifier that only ever sees
//! [`SyntheticBatch`] values, and each generator `i` is penalized by
//! `λ_i · mean φ(D_p^i(G_i(z)))`, the adversary's confidence that its
//! samples came from site `i`. The full objective is
//! `Σ_i V_φ(G_i, D_i) + λ_i R_i`.
//!
//! A round runs: site discriminator steps, one adversary step on fresh
//! synthetic batches, then site generator steps against a frozen adversary.
//!
//! Real samples cannot reach the adversary: its training and evaluation
//! entry points take [`SyntheticBatch`], which has no public constructor
//! other than running a generator.
//!
//! ```compile_fail
//! use felicia_core::mechanism::SyntheticBatch;
//! let real = ndarray::Array2::<f64>::zeros((4, 2));
//! let poisoned = SyntheticBatch { samples: real, source_site: 0, labels: None, generator_fingerprint: 0 };
//! ```

use std::collections::BTreeSet;

use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

use crate::checkpoint::{CheckpointError, CheckpointId, CheckpointStore};
use crate::gan::{
    discriminator_step, draw_discriminator_inputs, draw_generator_inputs, gan_value,
    generator_gradient, generator_step, DiscriminatorSpec, GanError, GanPair, GeneratorObjective,
    GeneratorPenalty, GeneratorSpec, LabeledBatch, LatentBatch, MeasureFunction,
};
use crate::nn::{argmax_rows, softmax_rows, Network, NnError, Optimizer, OptimizerKind};
use crate::rng::{self, Rng};

#[derive(Debug, Error)]
pub enum MechanismError {
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("site index {index} out of range for {n_sites} sites")]
    SiteIndex { index: usize, n_sites: usize },
    #[error("expected {expected} entries (one per site), got {got}")]
    SiteCount { expected: usize, got: usize },
    #[error("lambda values must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
    #[error("no synthetic batch for site {0}")]
    MissingSite(usize),
    #[error("more than one synthetic batch for site {0}")]
    DuplicateSite(usize),
    #[error("synthetic batch for site {site} rejected: {reason}")]
    Provenance { site: usize, reason: String },
    #[error("site {site} shard holds {available} samples, batch needs {needed}")]
    ShardExhausted {
        site: usize,
        available: usize,
        needed: usize,
    },
    #[error("shards of sites {a} and {b} overlap")]
    OverlappingShards { a: usize, b: usize },
    #[error("adversary architecture: {0}")]
    Adversary(String),
    #[error("round {round} aborted: {source}")]
    RoundAborted {
        round: u64,
        source: Box<MechanismError>,
    },
}

impl From<NnError> for MechanismError {
    fn from(e: NnError) -> Self {
        MechanismError::Gan(GanError::Nn(e))
    }
}

/// Per-site coupling weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaVector(Vec<f64>);

impl LambdaVector {
    pub fn new(values: Vec<f64>) -> Result<Self, MechanismError> {
        if let Some(&bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(MechanismError::InvalidLambda(bad));
        }
        Ok(Self(values))
    }

    pub fn uniform(n_sites: usize, value: f64) -> Result<Self, MechanismError> {
        Self::new(vec![value; n_sites])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Generator output tagged with the site and generator that produced it.
#[derive(Clone, Debug)]
pub struct SyntheticBatch {
    samples: Array2<f64>,
    source_site: usize,
    labels: Option<Vec<usize>>,
    generator_fingerprint: u64,
}

impl SyntheticBatch {
    /// Runs `generator` on `latent`; the only way to obtain a batch.
    pub fn generate(
        source_site: usize,
        generator: &Network,
        latent: &LatentBatch,
    ) -> Result<Self, MechanismError> {
        let samples = generator.predict(&latent.z, latent.labels.as_deref())?;
        Ok(Self {
            samples,
            source_site,
            labels: latent.labels.clone(),
            generator_fingerprint: generator.fingerprint(),
        })
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn source_site(&self) -> usize {
        self.source_site
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn generator_fingerprint(&self) -> u64 {
        self.generator_fingerprint
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversaryReport {
    /// Mean cross-entropy of source attribution before the update.
    pub loss: f64,
    /// Fraction of samples attributed to their source before the update.
    pub accuracy: f64,
}

/// N-way source classifier over synthetic samples. Shares the site
/// discriminator layers; the final dense emits N logits normalized by a
/// softmax. It is never conditioned on labels.
#[derive(Clone, Debug)]
pub struct CentralAdversary {
    network: Network,
    n_sites: usize,
    optimizer: Optimizer,
}

impl CentralAdversary {
    pub fn new<R: rand::Rng + ?Sized>(
        site_discriminator: &DiscriminatorSpec,
        n_sites: usize,
        optimizer: OptimizerKind,
        rng: &mut R,
    ) -> Result<Self, MechanismError> {
        let arch = site_discriminator.with_logit_head(n_sites)?;
        Self::from_network(Network::new(arch, rng)?, n_sites, optimizer)
    }

    /// Wraps a logit network with `n_sites` outputs and no conditioning.
    pub fn from_network(
        network: Network,
        n_sites: usize,
        optimizer: OptimizerKind,
    ) -> Result<Self, MechanismError> {
        if n_sites == 0 || network.output_shape().len() != n_sites {
            return Err(MechanismError::Adversary(format!(
                "network emits {} logits for {n_sites} sites",
                network.output_shape().len()
            )));
        }
        if network.is_conditional() {
            return Err(MechanismError::Adversary(
                "central adversary must be unconditional".into(),
            ));
        }
        let optimizer = Optimizer::new(optimizer, network.n_params());
        Ok(Self {
            network,
            n_sites,
            optimizer,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.network.params_mut()
    }

    /// Source probabilities, one row per sample; rows sum to one.
    pub fn probabilities(&self, batch: &SyntheticBatch) -> Result<Array2<f64>, MechanismError> {
        Ok(softmax_rows(self.network.predict(batch.samples(), None)?))
    }

    fn check_sites(&self, batches: &[SyntheticBatch]) -> Result<(), MechanismError> {
        let mut seen = BTreeSet::new();
        for b in batches {
            if b.source_site >= self.n_sites {
                return Err(MechanismError::SiteIndex {
                    index: b.source_site,
                    n_sites: self.n_sites,
                });
            }
            if !seen.insert(b.source_site) {
                return Err(MechanismError::DuplicateSite(b.source_site));
            }
            if b.is_empty() {
                return Err(GanError::EmptyBatch.into());
            }
        }
        if let Some(missing) = (0..self.n_sites).find(|i| !seen.contains(i)) {
            return Err(MechanismError::MissingSite(missing));
        }
        Ok(())
    }

    /// Cross-entropy of source attribution and its parameter gradient.
    pub fn loss_and_gradient(
        &self,
        batches: &[SyntheticBatch],
    ) -> Result<(AdversaryReport, Vec<f64>), MechanismError> {
        self.check_sites(batches)?;
        let total: usize = batches.iter().map(SyntheticBatch::len).sum();
        let mut grads = vec![0.0; self.network.n_params()];
        let mut loss = 0.0;
        let mut correct = 0usize;
        for b in batches {
            let (logits, tape) = self.network.forward(b.samples(), None)?;
            let p = softmax_rows(logits);
            let src = b.source_site;
            loss -= p
                .column(src)
                .iter()
                .map(|&q| q.max(f64::MIN_POSITIVE).ln())
                .sum::<f64>();
            correct += argmax_rows(&p).iter().filter(|&&k| k == src).count();
            let mut g = p;
            g.column_mut(src).mapv_inplace(|q| q - 1.0);
            g /= total as f64;
            self.network.backward(&tape, g, Some(&mut grads));
        }
        let report = AdversaryReport {
            loss: loss / total as f64,
            accuracy: correct as f64 / total as f64,
        };
        Ok((report, grads))
    }

    /// One descent step on the source-attribution cross-entropy.
    pub fn step(
        &mut self,
        batches: &[SyntheticBatch],
        step_size: f64,
    ) -> Result<AdversaryReport, MechanismError> {
        let (report, grads) = self.loss_and_gradient(batches)?;
        if !report.loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(GanError::NonFinite("adversary").into());
        }
        self.optimizer
            .descend(self.network.params_mut(), &grads, step_size);
        Ok(report)
    }
}

/// `λ · mean φ(D_p^site(x))` over generated rows `x`.
struct GlobalPenalty<'a> {
    adversary: &'a CentralAdversary,
    site: usize,
    lambda: f64,
    phi: MeasureFunction,
}

impl GeneratorPenalty for GlobalPenalty<'_> {
    fn evaluate(
        &self,
        generated: &Array2<f64>,
        _labels: Option<&[usize]>,
    ) -> Result<(f64, Array2<f64>), GanError> {
        let net = &self.adversary.network;
        let (logits, tape) = net.forward(generated, None)?;
        let p = softmax_rows(logits);
        let n = p.nrows() as f64;
        let i = self.site;
        let value = self.lambda * p.column(i).iter().map(|&q| self.phi.value(q)).sum::<f64>() / n;
        // d/dlogit_k φ(p_i) = φ'(p_i) · p_i · (δ_ik − p_k)
        let mut g = Array2::zeros(p.dim());
        for (r, row) in p.rows().into_iter().enumerate() {
            let pi = row[i];
            let scale = self.lambda * self.phi.derivative(pi) * pi / n;
            for (k, &pk) in row.iter().enumerate() {
                g[[r, k]] = scale * (if k == i { 1.0 } else { 0.0 } - pk);
            }
        }
        Ok((value, net.backward(&tape, g, None)))
    }
}

/// `R_i = mean φ(D_p^i(G_i(z)))` over a latent batch.
pub fn regularizer_value(
    adversary: &CentralAdversary,
    generator: &Network,
    latent: &LatentBatch,
    phi: &MeasureFunction,
    site: usize,
) -> Result<f64, MechanismError> {
    if site >= adversary.n_sites() {
        return Err(MechanismError::SiteIndex {
            index: site,
            n_sites: adversary.n_sites(),
        });
    }
    if latent.is_empty() {
        return Err(GanError::EmptyBatch.into());
    }
    let batch = SyntheticBatch::generate(site, generator, latent)?;
    let p = adversary.probabilities(&batch)?;
    Ok(p.column(site).iter().map(|&q| phi.value(q)).sum::<f64>() / p.nrows() as f64)
}

/// `λ_i · R_i`, the term generator `i` minimizes alongside its local loss.
pub fn generator_global_penalty(
    adversary: &CentralAdversary,
    generator: &Network,
    latent: &LatentBatch,
    phi: &MeasureFunction,
    site: usize,
    lambda: f64,
) -> Result<f64, MechanismError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(MechanismError::InvalidLambda(lambda));
    }
    Ok(lambda * regularizer_value(adversary, generator, latent, phi, site)?)
}

/// Gradient of `λ_i · R_i` with respect to the generator parameters.
pub fn global_penalty_gradient(
    adversary: &CentralAdversary,
    generator: &Network,
    latent: &LatentBatch,
    phi: &MeasureFunction,
    site: usize,
    lambda: f64,
) -> Result<(f64, Vec<f64>), MechanismError> {
    if site >= adversary.n_sites() {
        return Err(MechanismError::SiteIndex {
            index: site,
            n_sites: adversary.n_sites(),
        });
    }
    let penalty = GlobalPenalty {
        adversary,
        site,
        lambda,
        phi: *phi,
    };
    let (fake, tape) = generator.forward(&latent.z, latent.labels.as_deref())?;
    let (value, grad_x) = penalty.evaluate(&fake, None)?;
    let mut grads = vec![0.0; generator.n_params()];
    generator.backward(&tape, grad_x, Some(&mut grads));
    Ok((value, grads))
}

#[derive(Clone, Debug)]
pub struct FeliciaConfig {
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub optimizer: OptimizerKind,
    /// Step size of the site generator and discriminator updates.
    pub step_size: f64,
    pub adversary_step_size: f64,
    pub lambdas: LambdaVector,
    pub measure: MeasureFunction,
    pub seed: u64,
    /// Sequential site updates in a fixed order.
    pub deterministic: bool,
}

/// Initialization and training streams for one site. Baseline GANs trained
/// with these streams match the site's trajectory when it is decoupled.
pub fn site_streams(seed: u64, site: usize) -> (Rng, Rng) {
    (
        rng::stream(seed, "site-init", site as u64),
        rng::stream(seed, "site-train", site as u64),
    )
}

#[derive(Clone, Debug)]
pub struct SiteState {
    pub site_id: usize,
    pub pair: GanPair,
    /// Indices of this site's samples in the source dataset.
    pub shard: Vec<usize>,
    rng: Rng,
}

impl SiteState {
    pub fn is_conditional(&self) -> bool {
        self.pair.is_conditional()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteLossTerms {
    pub local: f64,
    pub global: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeliciaLoss {
    pub total: f64,
    pub per_site: Vec<SiteLossTerms>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    /// Round number after the update.
    pub round: u64,
    pub discriminator_values: Vec<f64>,
    pub generator_losses: Vec<f64>,
    /// `λ_i R_i` seen by each generator step (0 for decoupled sites).
    pub penalties: Vec<f64>,
    pub adversary: AdversaryReport,
}

/// Supplies the per-site synthetic batches for the adversary step.
pub trait SyntheticSource {
    fn draw(
        &mut self,
        sites: &[SiteState],
        batch_size: usize,
    ) -> Result<Vec<SyntheticBatch>, MechanismError>;
}

struct CoordinatorSource<'a> {
    rng: &'a mut Rng,
}

impl SyntheticSource for CoordinatorSource<'_> {
    fn draw(
        &mut self,
        sites: &[SiteState],
        batch_size: usize,
    ) -> Result<Vec<SyntheticBatch>, MechanismError> {
        sites
            .iter()
            .map(|site| {
                let latent = draw_generator_inputs(
                    &site.pair.latent,
                    batch_size,
                    site.pair.n_classes(),
                    self.rng,
                )?;
                SyntheticBatch::generate(site.site_id, &site.pair.generator, &latent)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct FeliciaState {
    sites: Vec<SiteState>,
    adversary: CentralAdversary,
    lambdas: LambdaVector,
    measure: MeasureFunction,
    step_size: f64,
    adversary_step_size: f64,
    seed: u64,
    deterministic: bool,
    round: u64,
    coordinator_rng: Rng,
}

impl FeliciaState {
    /// One site per shard; shards must be pairwise disjoint.
    pub fn new(config: FeliciaConfig, shards: Vec<Vec<usize>>) -> Result<Self, MechanismError> {
        let n = config.lambdas.len();
        if shards.len() != n {
            return Err(MechanismError::SiteCount {
                expected: n,
                got: shards.len(),
            });
        }
        let sets: Vec<BTreeSet<usize>> =
            shards.iter().map(|s| s.iter().copied().collect()).collect();
        for a in 0..n {
            for b in a + 1..n {
                if !sets[a].is_disjoint(&sets[b]) {
                    return Err(MechanismError::OverlappingShards { a, b });
                }
            }
        }
        let sites = shards
            .into_iter()
            .enumerate()
            .map(|(i, shard)| {
                let (mut init, train) = site_streams(config.seed, i);
                let pair = GanPair::new(
                    &config.generator,
                    &config.discriminator,
                    config.optimizer,
                    &mut init,
                )?;
                Ok(SiteState {
                    site_id: i,
                    pair,
                    shard,
                    rng: train,
                })
            })
            .collect::<Result<Vec<_>, MechanismError>>()?;
        let adversary = CentralAdversary::new(
            &config.discriminator,
            n,
            config.optimizer,
            &mut rng::stream(config.seed, "adversary-init", 0),
        )?;
        Ok(Self {
            sites,
            adversary,
            lambdas: config.lambdas,
            measure: config.measure,
            step_size: config.step_size,
            adversary_step_size: config.adversary_step_size,
            seed: config.seed,
            deterministic: config.deterministic,
            round: 0,
            coordinator_rng: rng::stream(config.seed, "adversary-train", 0),
        })
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn sites(&self) -> &[SiteState] {
        &self.sites
    }

    pub fn site(&self, i: usize) -> Result<&SiteState, MechanismError> {
        self.sites.get(i).ok_or(MechanismError::SiteIndex {
            index: i,
            n_sites: self.sites.len(),
        })
    }

    pub fn adversary(&self) -> &CentralAdversary {
        &self.adversary
    }

    pub fn adversary_mut(&mut self) -> &mut CentralAdversary {
        &mut self.adversary
    }

    pub fn lambdas(&self) -> &LambdaVector {
        &self.lambdas
    }

    pub fn measure(&self) -> &MeasureFunction {
        &self.measure
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_count(&self, got: usize) -> Result<(), MechanismError> {
        if got != self.sites.len() {
            return Err(MechanismError::SiteCount {
                expected: self.sites.len(),
                got,
            });
        }
        Ok(())
    }

    /// `Σ_i V_φ(G_i, D_i) + λ_i R_i` on one real and one latent batch per site.
    pub fn felicia_loss(
        &self,
        real: &[LabeledBatch],
        latent: &[LatentBatch],
    ) -> Result<FeliciaLoss, MechanismError> {
        self.check_count(real.len())?;
        self.check_count(latent.len())?;
        let mut per_site = Vec::with_capacity(self.sites.len());
        for (i, site) in self.sites.iter().enumerate() {
            let local = gan_value(
                &site.pair.generator,
                &site.pair.discriminator,
                &real[i],
                &latent[i],
                &self.measure,
            )?;
            let global = regularizer_value(
                &self.adversary,
                &site.pair.generator,
                &latent[i],
                &self.measure,
                i,
            )?;
            per_site.push(SiteLossTerms {
                local,
                global,
                lambda: self.lambdas.values()[i],
            });
        }
        let total = per_site.iter().map(|t| t.local + t.lambda * t.global).sum();
        Ok(FeliciaLoss { total, per_site })
    }

    /// The objective and gradient used by site `i`'s generator step.
    pub fn generator_objective(
        &self,
        i: usize,
        latent: &LatentBatch,
    ) -> Result<GeneratorObjective, MechanismError> {
        let site = self.site(i)?;
        let lambda = self.lambdas.values()[i];
        let penalty = GlobalPenalty {
            adversary: &self.adversary,
            site: i,
            lambda,
            phi: self.measure,
        };
        let penalties: Vec<&dyn GeneratorPenalty> = if lambda > 0.0 {
            vec![&penalty]
        } else {
            Vec::new()
        };
        Ok(generator_gradient(
            &site.pair.generator,
            &site.pair.discriminator,
            latent,
            &self.measure,
            &penalties,
        )?)
    }

    /// Adversary update from one synthetic batch per site. Each batch must
    /// come from the current generator of the site it names.
    pub fn adversary_step(
        &mut self,
        batches: &[SyntheticBatch],
        step_size: f64,
    ) -> Result<AdversaryReport, MechanismError> {
        for b in batches {
            let site = self.site(b.source_site())?;
            if b.generator_fingerprint() != site.pair.generator.fingerprint() {
                return Err(MechanismError::Provenance {
                    site: b.source_site(),
                    reason: "not produced by the site's current generator".into(),
                });
            }
        }
        self.adversary.step(batches, step_size)
    }

    pub fn train_round(
        &mut self,
        data: &[LabeledBatch],
        batch_size: usize,
    ) -> Result<RoundReport, MechanismError> {
        let mut rng = self.coordinator_rng.clone();
        let result = self.round_inner(data, batch_size, &mut CoordinatorSource { rng: &mut rng });
        if result.is_ok() {
            self.coordinator_rng = rng;
        }
        result
    }

    /// [`Self::train_round`] with caller-supplied synthetic batches for the
    /// adversary phase.
    pub fn train_round_with_source(
        &mut self,
        data: &[LabeledBatch],
        batch_size: usize,
        source: &mut dyn SyntheticSource,
    ) -> Result<RoundReport, MechanismError> {
        self.round_inner(data, batch_size, source)
    }

    fn round_inner(
        &mut self,
        data: &[LabeledBatch],
        batch_size: usize,
        source: &mut dyn SyntheticSource,
    ) -> Result<RoundReport, MechanismError> {
        self.check_count(data.len())?;
        for (i, shard) in data.iter().enumerate() {
            if shard.len() < batch_size || batch_size == 0 {
                return Err(MechanismError::ShardExhausted {
                    site: i,
                    available: shard.len(),
                    needed: batch_size,
                });
            }
        }
        let snapshot = (self.sites.clone(), self.adversary.clone());
        match self.phases(data, batch_size, source) {
            Ok(report) => Ok(report),
            Err(e) => {
                (self.sites, self.adversary) = snapshot;
                Err(MechanismError::RoundAborted {
                    round: self.round,
                    source: Box::new(e),
                })
            }
        }
    }

    fn phases(
        &mut self,
        data: &[LabeledBatch],
        batch_size: usize,
        source: &mut dyn SyntheticSource,
    ) -> Result<RoundReport, MechanismError> {
        let phi = self.measure;
        let step = self.step_size;

        let local = |site: &mut SiteState, shard: &LabeledBatch| -> Result<f64, MechanismError> {
            let (real, fake) =
                draw_discriminator_inputs(shard, &site.pair.latent, batch_size, &mut site.rng)?;
            Ok(discriminator_step(&mut site.pair, &real, &fake, &phi, step)?.value)
        };
        let discriminator_values: Vec<f64> = if self.deterministic {
            self.sites
                .iter_mut()
                .zip(data)
                .map(|(s, d)| local(s, d))
                .collect::<Result<_, _>>()?
        } else {
            self.sites
                .par_iter_mut()
                .zip(data.par_iter())
                .map(|(s, d)| local(s, d))
                .collect::<Result<_, _>>()?
        };

        let batches = source.draw(&self.sites, batch_size)?;
        let adversary_step = self.adversary_step_size;
        let adversary = self.adversary_step(&batches, adversary_step)?;

        let frozen = &self.adversary;
        let lambdas = self.lambdas.values();
        let global = |site: &mut SiteState| -> Result<(f64, f64), MechanismError> {
            let latent = draw_generator_inputs(
                &site.pair.latent,
                batch_size,
                site.pair.n_classes(),
                &mut site.rng,
            )?;
            let lambda = lambdas[site.site_id];
            let penalty = GlobalPenalty {
                adversary: frozen,
                site: site.site_id,
                lambda,
                phi,
            };
            let penalties: Vec<&dyn GeneratorPenalty> = if lambda > 0.0 {
                vec![&penalty]
            } else {
                Vec::new()
            };
            let (report, values) = generator_step(&mut site.pair, &latent, &phi, step, &penalties)?;
            Ok((report.value, values.first().copied().unwrap_or(0.0)))
        };
        let generator: Vec<(f64, f64)> = if self.deterministic {
            self.sites
                .iter_mut()
                .map(global)
                .collect::<Result<_, _>>()?
        } else {
            self.sites
                .par_iter_mut()
                .map(global)
                .collect::<Result<_, _>>()?
        };

        self.round += 1;
        Ok(RoundReport {
            round: self.round,
            discriminator_values,
            generator_losses: generator.iter().map(|g| g.0).collect(),
            penalties: generator.iter().map(|g| g.1).collect(),
            adversary,
        })
    }

    /// Persists every site generator tagged with `epoch` and the run seed.
    pub fn checkpoint_generators(
        &self,
        epoch: u64,
        store: &mut CheckpointStore,
    ) -> Result<Vec<CheckpointId>, MechanismError> {
        self.sites
            .iter()
            .map(|s| Ok(store.save(s.site_id, epoch, self.seed, &s.pair.generator)?))
            .collect()
    }
}
