//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.
//!
//! The three training experiments take tens of minutes on one core. Their
//! run directories live under cargo's target tmp dir (or
//! `FELICIA_ACCEPTANCE_DIR`); a later invocation with unchanged configs
//! reuses finished runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use felicia_core::corpus;
use felicia_core::eval::{
    aggregate_runs, auc_roc, median, read_reports_csv, select_lambda, select_top_epochs,
    subgroup_accuracy, EvalError, Split, UtilityReport,
};
use felicia_core::gan::{
    discriminator_gradient, draw_generator_inputs, gan_value, generator_gradient, local_round,
    DiscriminatorSpec, GanPair, GeneratorSpec, LabeledBatch, LatentBatch, LatentPrior,
    MeasureFunction,
};
use felicia_core::mechanism::{
    global_penalty_gradient, site_streams, CentralAdversary, FeliciaConfig, FeliciaState,
    LambdaVector, MechanismError, SiteState, SyntheticBatch, SyntheticSource,
};
use felicia_core::nn::optim::OptimizerKind;
use felicia_core::nn::{Activation, LayerSpec, Network, Shape};
use felicia_core::partition::{
    alpha_mix, beta_subgroup_split, lesion_fixed_split, pca_kmeans_split, BiasSpec, CountEntry,
    SitePartition,
};
use felicia_core::rng;
use felicia_harness::manifest::MANIFEST_FILE;
use felicia_harness::pipeline::{
    read_csv, subgroup_gap, CoverageRow, Selection, COVERAGE_METRICS, FINAL_TEST_METRICS,
    SELECTION, VALIDATION_REPORTS,
};
use felicia_harness::{resume, run_experiment, ExperimentConfig, RunManifest};
use ndarray::Array2;
use rand::Rng as _;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---- hand-written reference computations ---------------------------------

fn act(a: Activation, v: f64) -> f64 {
    match a {
        Activation::Relu => v.max(0.0),
        Activation::LeakyRelu => {
            if v > 0.0 {
                v
            } else {
                0.2 * v
            }
        }
        Activation::Tanh => v.tanh(),
        Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        Activation::Softmax => unreachable!("not used by reference MLPs"),
    }
}

/// Forward pass of an unconditional dense stack read straight from the flat
/// parameter vector: per layer a row-major `[n_in][n_out]` weight block and
/// then `n_out` biases.
fn mlp(layers: &[LayerSpec], params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut off = 0;
    for layer in layers {
        match *layer {
            LayerSpec::Dense { units } => {
                let n_in = h.len();
                let mut y = vec![0.0; units];
                for (o, yo) in y.iter_mut().enumerate() {
                    let mut s = params[off + n_in * units + o];
                    for (i, hi) in h.iter().enumerate() {
                        s += hi * params[off + i * units + o];
                    }
                    *yo = s;
                }
                off += n_in * units + units;
                h = y;
            }
            LayerSpec::Activation { activation } => {
                h.iter_mut().for_each(|v| *v = act(activation, *v))
            }
            _ => unreachable!("reference MLPs are dense"),
        }
    }
    assert_eq!(off, params.len(), "parameter layout");
    h
}

fn phi(p: f64) -> f64 {
    p.clamp(1e-7, 1.0 - 1e-7).ln()
}

fn rows(x: &Array2<f64>) -> Vec<Vec<f64>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// `mean φ(D(x)) + mean φ(1 − D(G(z)))`.
fn reference_value(g: &Network, d: &Network, real: &Array2<f64>, z: &Array2<f64>) -> f64 {
    let (gl, dl) = (&g.architecture().layers, &d.architecture().layers);
    let real_term: f64 = rows(real)
        .iter()
        .map(|x| phi(mlp(dl, d.params(), x)[0]))
        .sum::<f64>()
        / real.nrows() as f64;
    let fake_term: f64 = rows(z)
        .iter()
        .map(|zi| phi(1.0 - mlp(dl, d.params(), &mlp(gl, g.params(), zi))[0]))
        .sum::<f64>()
        / z.nrows() as f64;
    real_term + fake_term
}

/// `mean φ(softmax(D_p(G(z)))_site)`.
fn reference_regularizer(g: &Network, adversary: &Network, z: &Array2<f64>, site: usize) -> f64 {
    let (gl, al) = (&g.architecture().layers, &adversary.architecture().layers);
    rows(z)
        .iter()
        .map(|zi| {
            let logits = mlp(al, adversary.params(), &mlp(gl, g.params(), zi));
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let norm: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            phi((logits[site] - m).exp() / norm)
        })
        .sum::<f64>()
        / z.nrows() as f64
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

// ---- shared fixtures ------------------------------------------------------

fn toy_specs(
    dim: usize,
    latent: usize,
    n_classes: Option<usize>,
) -> (GeneratorSpec, DiscriminatorSpec) {
    let prior = LatentPrior {
        dimension: latent,
        ..Default::default()
    };
    let mut g = GeneratorSpec::mlp(prior, &[6], Shape::flat(dim), n_classes);
    let mut d = DiscriminatorSpec::mlp(Shape::flat(dim), &[5], n_classes);
    g.embed_dim = 2;
    d.embed_dim = 2;
    (g, d)
}

fn felicia(
    g: &GeneratorSpec,
    d: &DiscriminatorSpec,
    lambdas: Vec<f64>,
    seed: u64,
) -> FeliciaConfig {
    FeliciaConfig {
        generator: g.clone(),
        discriminator: d.clone(),
        optimizer: OptimizerKind::default(),
        step_size: 2e-3,
        adversary_step_size: 2e-3,
        lambdas: LambdaVector::new(lambdas).unwrap(),
        measure: MeasureFunction::log(),
        seed,
        deterministic: true,
    }
}

fn uniform_batch(n: usize, dim: usize, r: &mut rng::Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, dim), |_| r.random_range(-0.95..0.95))
}

/// Disjoint index shards `[0, n), [n, 2n), …`.
fn shards(n_sites: usize, n: usize) -> Vec<Vec<usize>> {
    (0..n_sites)
        .map(|i| (i * n..(i + 1) * n).collect())
        .collect()
}

// ---- criteria -------------------------------------------------------------

fn loss_correctness() -> Outcome {
    let (gs, ds) = toy_specs(4, 3, None);
    let mut worst: f64 = 0.0;
    for draw in 0..100u64 {
        let mut r = rng::stream(draw, "c1", 0);
        let state =
            FeliciaState::new(felicia(&gs, &ds, vec![0.0], draw), shards(1, 8)).map_err(err)?;
        let real =
            LabeledBatch::new(uniform_batch(8, 4, &mut r), Shape::flat(4), None).map_err(err)?;
        let z = gs.latent.sample(8, &mut r);
        let latent = LatentBatch::new(z.clone(), None);
        let loss = state
            .felicia_loss(std::slice::from_ref(&real), std::slice::from_ref(&latent))
            .map_err(err)?;
        let pair = &state.sites()[0].pair;
        let library = gan_value(
            &pair.generator,
            &pair.discriminator,
            &real,
            &latent,
            &MeasureFunction::log(),
        )
        .map_err(err)?;
        let reference = reference_value(&pair.generator, &pair.discriminator, real.samples(), &z);
        worst = worst
            .max((loss.total - reference).abs())
            .max((loss.total - library).abs());
        ensure(
            close(loss.total, reference, 1e-10) && close(loss.total, library, 1e-10),
            || {
                format!(
                    "draw {draw}: loss {} vs value {library} vs reference {reference}",
                    loss.total
                )
            },
        )?;
    }

    // λ-linearity: L(aλ + bμ) − L(0) = a(L(λ) − L(0)) + b(L(μ) − L(0)).
    let mut worst_lin: f64 = 0.0;
    for draw in 0..100u64 {
        let mut r = rng::stream(draw, "c1-linear", 0);
        let lam: Vec<f64> = (0..3).map(|_| r.random_range(0.0..4.0)).collect();
        let mu: Vec<f64> = (0..3).map(|_| r.random_range(0.0..4.0)).collect();
        let (a, b) = (r.random_range(0.0..2.0), r.random_range(0.0..2.0));
        let mix: Vec<f64> = lam.iter().zip(&mu).map(|(l, m)| a * l + b * m).collect();
        let real: Vec<LabeledBatch> = (0..3)
            .map(|_| LabeledBatch::new(uniform_batch(6, 4, &mut r), Shape::flat(4), None).unwrap())
            .collect();
        let latent: Vec<LatentBatch> = (0..3)
            .map(|_| LatentBatch::new(gs.latent.sample(6, &mut r), None))
            .collect();
        let total = |l: Vec<f64>| -> Result<f64, String> {
            let s = FeliciaState::new(felicia(&gs, &ds, l, draw), shards(3, 6)).map_err(err)?;
            Ok(s.felicia_loss(&real, &latent).map_err(err)?.total)
        };
        let zero = total(vec![0.0; 3])?;
        let lhs = total(mix)? - zero;
        let rhs = a * (total(lam)? - zero) + b * (total(mu)? - zero);
        worst_lin = worst_lin.max((lhs - rhs).abs());
        ensure(close(lhs, rhs, 1e-10), || {
            format!("draw {draw}: linearity {lhs} vs {rhs}")
        })?;
    }
    Ok(format!(
        "100 draws, max |Δ| {worst:.1e}; linearity max |Δ| {worst_lin:.1e}"
    ))
}

const FD_STEP: f64 = 1e-5;

fn central_diff(net: &Network, f: impl Fn(&Network) -> f64) -> Vec<f64> {
    (0..net.n_params())
        .map(|k| {
            let mut plus = net.clone();
            plus.params_mut()[k] += FD_STEP;
            let mut minus = net.clone();
            minus.params_mut()[k] -= FD_STEP;
            (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
        })
        .collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

fn gradient_fidelity() -> Outcome {
    let phi = MeasureFunction::log();
    let mut worst = [0.0f64; 3];
    for draw in 0..20u64 {
        let conditional = draw % 2 == 1;
        let (gs, ds) = toy_specs(5, 4, conditional.then_some(3));
        let mut r = rng::stream(draw, "c2", 0);
        let g = Network::new(gs.architecture(), &mut r).map_err(err)?;
        let d = Network::new(ds.architecture(), &mut r).map_err(err)?;
        let adversary =
            CentralAdversary::new(&toy_specs(5, 4, None).1, 2, OptimizerKind::Sgd, &mut r)
                .map_err(err)?;
        ensure(g.n_params() < 1000 && d.n_params() < 1000, || {
            "networks too large".into()
        })?;
        let labels = conditional.then(|| (0..7).map(|i| i % 3).collect::<Vec<_>>());
        let real =
            LabeledBatch::new(uniform_batch(7, 5, &mut r), Shape::flat(5), labels).map_err(err)?;
        let latent = draw_generator_inputs(&gs.latent, 7, gs.n_classes, &mut r).map_err(err)?;

        let (_, analytic) = discriminator_gradient(&g, &d, &real, &latent, &phi).map_err(err)?;
        let numeric = central_diff(&d, |d| {
            discriminator_gradient(&g, d, &real, &latent, &phi)
                .unwrap()
                .0
        });
        worst[0] = worst[0].max(relative_error(&analytic, &numeric));

        let analytic = generator_gradient(&g, &d, &latent, &phi, &[])
            .map_err(err)?
            .grads;
        let numeric = central_diff(&g, |g| {
            generator_gradient(g, &d, &latent, &phi, &[]).unwrap().loss
        });
        worst[1] = worst[1].max(relative_error(&analytic, &numeric));

        let ul = LatentBatch::new(latent.z.clone(), None);
        let gu = Network::new(toy_specs(5, 4, None).0.architecture(), &mut r).map_err(err)?;
        let lambda = 0.5 + draw as f64 * 0.1;
        let site = (draw % 2) as usize;
        let (_, analytic) =
            global_penalty_gradient(&adversary, &gu, &ul, &phi, site, lambda).map_err(err)?;
        let numeric = central_diff(&gu, |n| {
            global_penalty_gradient(&adversary, n, &ul, &phi, site, lambda)
                .unwrap()
                .0
        });
        worst[2] = worst[2].max(relative_error(&analytic, &numeric));
    }
    let msg = format!(
        "max relative error D {:.1e}, G {:.1e}, penalty {:.1e}",
        worst[0], worst[1], worst[2]
    );
    ensure(worst.iter().all(|&w| w < 1e-4), || msg.clone())?;
    Ok(format!("20 draws, {msg}"))
}

fn decoupling() -> Outcome {
    let data = corpus::digit_four(800, 9);
    let batches = [
        data.batch(&(0..400).collect::<Vec<_>>(), false)
            .map_err(err)?,
        data.batch(&(400..800).collect::<Vec<_>>(), false)
            .map_err(err)?,
    ];
    let latent = LatentPrior {
        dimension: 32,
        ..Default::default()
    };
    let g = GeneratorSpec::mlp(latent, &[128, 256], corpus::SHAPE, None);
    let d = DiscriminatorSpec::mlp(corpus::SHAPE, &[128], None);
    let config = FeliciaConfig {
        step_size: 2e-4,
        adversary_step_size: 2e-4,
        ..felicia(&g, &d, vec![0.0, 0.0], 17)
    };
    let mut state = FeliciaState::new(config.clone(), shards(2, 400)).map_err(err)?;
    for _ in 0..500 {
        state.train_round(&batches, 64).map_err(err)?;
    }
    for (i, shard) in batches.iter().enumerate() {
        let (mut init, mut train) = site_streams(config.seed, i);
        let mut pair = GanPair::new(&g, &d, config.optimizer, &mut init).map_err(err)?;
        for _ in 0..500 {
            local_round(
                &mut pair,
                shard,
                64,
                &config.measure,
                config.step_size,
                &mut train,
            )
            .map_err(err)?;
        }
        let site = &state.sites()[i].pair;
        let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(
            same(pair.generator.params(), site.generator.params()),
            || format!("site {i} generator differs"),
        )?;
        ensure(
            same(pair.discriminator.params(), site.discriminator.params()),
            || format!("site {i} discriminator differs"),
        )?;
    }
    Ok("500 rounds, both sites bitwise identical to independent GANs".into())
}

/// Independent privGAN objective with one shared λ: Σ_i V(G_i, D_i) + λ Σ_i
/// E log D_p(G_i(z))_i.
fn privgan_objective(
    state: &FeliciaState,
    real: &[LabeledBatch],
    z: &[Array2<f64>],
    lambda: f64,
) -> f64 {
    let adversary = state.adversary().network();
    state
        .sites()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            reference_value(
                &s.pair.generator,
                &s.pair.discriminator,
                real[i].samples(),
                &z[i],
            ) + lambda * reference_regularizer(&s.pair.generator, adversary, &z[i], i)
        })
        .sum()
}

fn privgan_reduction(scratch: &Path) -> Outcome {
    let (gs, ds) = toy_specs(4, 3, None);
    let mut worst: f64 = 0.0;
    for draw in 0..50u64 {
        let mut r = rng::stream(draw, "c4", 0);
        let lambda = r.random_range(0.0..4.0);
        let mut state =
            FeliciaState::new(felicia(&gs, &ds, vec![lambda, lambda], draw), shards(2, 16))
                .map_err(err)?;
        let data: Vec<LabeledBatch> = (0..2)
            .map(|_| LabeledBatch::new(uniform_batch(16, 4, &mut r), Shape::flat(4), None).unwrap())
            .collect();
        // Compare on fresh batches after a few training rounds too.
        for _ in 0..3 {
            let z: Vec<Array2<f64>> = (0..2).map(|_| gs.latent.sample(8, &mut r)).collect();
            let latent: Vec<LatentBatch> = z
                .iter()
                .map(|z| LatentBatch::new(z.clone(), None))
                .collect();
            let real: Vec<LabeledBatch> = data
                .iter()
                .map(|b| b.select(&(0..8).collect::<Vec<_>>()))
                .collect();
            let ours = state.felicia_loss(&real, &latent).map_err(err)?.total;
            let theirs = privgan_objective(&state, &real, &z, lambda);
            worst = worst.max((ours - theirs).abs());
            ensure(close(ours, theirs, 1e-10), || {
                format!("draw {draw}: {ours} vs {theirs}")
            })?;
            state.train_round(&data, 8).map_err(err)?;
        }
    }

    // The harness's PrivGAN recipe keeps λ₁ = λ₂ and one checkpoint.
    let out = scratch.join("c4");
    let cfg = tiny_lesion(&out)?;
    run_experiment(&cfg).map_err(err)?;
    let selection: Selection =
        serde_json::from_slice(&std::fs::read(out.join(SELECTION)).map_err(err)?).map_err(err)?;
    for point in selection.points.values() {
        let l = point.privgan_lambdas.ok_or("no PrivGAN selection")?;
        ensure(l[0] == l[1], || format!("PrivGAN λ {l:?}"))?;
        for run in point.runs.iter().filter(|r| r.recipe == "privgan") {
            ensure(run.epochs.len() == 1, || {
                format!("PrivGAN run keeps {} checkpoints", run.epochs.len())
            })?;
            ensure(run.lambdas.is_some_and(|l| l[0] == l[1]), || {
                "PrivGAN run off the diagonal".into()
            })?;
        }
    }
    let reports = read_reports_csv(&out.join(FINAL_TEST_METRICS), Split::Test).map_err(err)?;
    let p = reports
        .iter()
        .find(|r| r.recipe == "privgan")
        .ok_or("no PrivGAN test report")?;
    ensure(p.epoch.is_some(), || {
        "PrivGAN test report is an ensemble".into()
    })?;
    Ok(format!(
        "150 batches, max |Δ| {worst:.1e}; harness selection single-checkpoint on λ₁ = λ₂"
    ))
}

fn tiny_lesion(out: &Path) -> Result<ExperimentConfig, String> {
    let toml = format!(
        r#"
name = "acceptance-tiny-lesion"
epochs = 12
eval_cadence = 3
ensemble_k = 2
batch_size = 8
seeds = [1]
lambda_grid = [[0.5, 0.5], [1.0, 1.0], [2.0, 0.5]]
deterministic = true
output_dir = "{}"

[dataset]
source = "corpus"
name = "lesions"
counts = [80, 40, 40, 30]
seed = 1

[experiment]
kind = "lesion"
holdout_per_class = 20
synthetic_per_class = 16
count_table = [
  {{ class = 0, subgroup = "melanocytic_nevi", count = 2 }},
  {{ class = 0, subgroup = "benign_keratosis", count = 14 }},
  {{ class = 1, subgroup = "melanoma", count = 8 }},
  {{ class = 1, subgroup = "basal_cell_carcinoma", count = 8 }},
]

[gan]
latent_dim = 4
generator_hidden = [16]
discriminator_hidden = [16]

[classifier]
layers = [{{ type = "dense", units = 8 }}, {{ type = "activation", activation = "relu" }}]
epochs = 2
batch_size = 16
step_size = 0.01
"#,
        out.display()
    );
    std::fs::create_dir_all(out).map_err(err)?;
    let path = out.with_extension("toml");
    std::fs::write(&path, toml).map_err(err)?;
    ExperimentConfig::from_path(&path).map_err(err)
}

/// Runs `configs/<name>.toml` under `base`, reusing a finished run with an
/// identical config.
fn experiment(name: &str, base: &Path) -> Result<RunManifest, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(format!("{name}.toml"));
    let mut cfg = ExperimentConfig::from_path(&path).map_err(err)?;
    let out = base.join(name);
    cfg.output_dir = Some(out.clone());
    let manifest = out.join(MANIFEST_FILE);
    if let Ok(m) = RunManifest::load(&manifest) {
        if m.config_hash == cfg.hash() {
            return resume(&manifest).map_err(err);
        }
    }
    if out.exists() {
        std::fs::remove_dir_all(&out).map_err(err)?;
    }
    run_experiment(&cfg).map_err(err)
}

fn coverage(base: &Path) -> Outcome {
    let m = experiment("coverage", base)?;
    let rows: Vec<CoverageRow> = read_csv(&m.output_dir.join(COVERAGE_METRICS)).map_err(err)?;
    let mut details = Vec::new();
    let mut passing = 0;
    for &seed in &m.seeds {
        let frac = |recipe: &str, site: usize| {
            rows.iter()
                .find(|r| r.seed == seed && r.recipe == recipe && r.site == site)
                .map(|r| r.minority_fraction)
        };
        let mut ok = true;
        for site in 0..2 {
            let (f, g) = (
                frac("felicia", site).ok_or("missing FELICIA row")?,
                frac("gan", site).ok_or("missing GAN row")?,
            );
            ok &= f > 0.0 && f >= 3.0 * g;
            details.push(format!("s{seed}/site{site} {f:.3} vs {g:.3}"));
        }
        passing += usize::from(ok);
    }
    let msg = format!(
        "{passing}/3 seeds with ≥3× minority coverage [{}]",
        details.join(", ")
    );
    ensure(passing >= 2, || msg.clone())?;
    Ok(msg)
}

fn medians(
    reports: &[UtilityReport],
    config_id: &str,
    f: impl Fn(&UtilityReport) -> Option<f64>,
) -> BTreeMap<String, f64> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.config_id == config_id) {
        if let Some(v) = f(r) {
            groups.entry(r.recipe.clone()).or_default().push(v);
        }
    }
    groups
        .into_iter()
        .map(|(k, v)| (k, median(&v).unwrap_or(f64::NAN)))
        .collect()
}

fn subgroup_bias(base: &Path) -> Outcome {
    let m = experiment("subgroup", base)?;
    let focus = match &m.config.experiment {
        felicia_harness::config::ExperimentKind::Subgroup { focus, .. } => focus.clone(),
        _ => return Err("subgroup config expected".into()),
    };
    let reports =
        read_reports_csv(&m.output_dir.join(FINAL_TEST_METRICS), Split::Test).map_err(err)?;
    let acc = |id: &str| medians(&reports, id, |r| r.per_subgroup.get(&focus).copied());
    let (low, high) = (acc("beta=0.5"), acc("beta=0.9"));
    let get =
        |t: &BTreeMap<String, f64>, k: &str| t.get(k).copied().ok_or(format!("no {k} reports"));
    let (real_low, real_high) = (get(&low, "real")?, get(&high, "real")?);
    let (gan, fel) = (get(&high, "gan")?, get(&high, "felicia")?);
    let msg = format!(
        "median {focus} accuracy: real β=0.5 {real_low:.3}, β=0.9 real {real_high:.3} / real+GAN {gan:.3} / real+FELICIA {fel:.3}"
    );
    ensure(real_high < real_low, || format!("(a) fails: {msg}"))?;
    ensure(fel > real_high && fel > gan, || format!("(b) fails: {msg}"))?;
    Ok(msg)
}

fn lesion_utility(base: &Path) -> Outcome {
    let m = experiment("lesion", base)?;
    let reports =
        read_reports_csv(&m.output_dir.join(FINAL_TEST_METRICS), Split::Test).map_err(err)?;
    let auc = medians(&reports, "counts", |r| Some(r.auc));
    let gap = medians(&reports, "counts", |r| Some(subgroup_gap(r)));
    let get =
        |t: &BTreeMap<String, f64>, k: &str| t.get(k).copied().ok_or(format!("no {k} reports"));
    let (fel, gan, real) = (get(&auc, "felicia")?, get(&auc, "gan")?, get(&auc, "real")?);
    let (gap_fel, gap_real) = (get(&gap, "felicia")?, get(&gap, "real")?);
    let privgan = auc
        .get("privgan")
        .map_or(String::new(), |p| format!(", PrivGAN {p:.3}"));
    let msg = format!(
        "median AUC real {real:.3}, GAN {gan:.3}, FELICIA {fel:.3}{privgan}; subgroup gap real {gap_real:.3}, FELICIA {gap_fel:.3}"
    );
    ensure(fel > gan && fel > real && gap_fel < gap_real, || {
        msg.clone()
    })?;
    Ok(msg)
}

fn evaluation_oracles() -> Outcome {
    let mut r = rng::stream(8, "c8", 0);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let n = r.random_range(2..80);
        let scores: Vec<f64> = (0..n)
            .map(|_| f64::from(r.random_range(0u8..25)) / 24.0)
            .collect();
        let mut truth: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        truth[0] = true;
        truth[1] = false;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if truth[i] && !truth[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        let a = auc_roc(&scores, &truth).map_err(err)?;
        worst = worst.max((a - num / den).abs());
        ensure((a - num / den).abs() <= 1e-12, || {
            format!("case {case}: auc {a} vs {}", num / den)
        })?;
    }

    // Overall accuracy is the size-weighted mean of subgroup accuracies.
    let data = corpus::lesions([40, 25, 20, 15], 3);
    let mut worst_dec: f64 = 0.0;
    for case in 0..200 {
        let preds: Vec<usize> = (0..data.len()).map(|_| r.random_range(0..2)).collect();
        let overall = preds
            .iter()
            .zip(data.classes())
            .filter(|(p, c)| p == c)
            .count() as f64
            / data.len() as f64;
        let mut weighted = 0.0;
        for (g, name) in data.subgroup_names().iter().enumerate() {
            let size = data
                .subgroups()
                .unwrap()
                .iter()
                .filter(|&&t| t == g)
                .count() as f64;
            weighted +=
                size / data.len() as f64 * subgroup_accuracy(&preds, &data, name).map_err(err)?;
        }
        worst_dec = worst_dec.max((overall - weighted).abs());
        ensure((overall - weighted).abs() <= 1e-12, || {
            format!("case {case}: {overall} vs {weighted}")
        })?;
    }

    // Quartiles against sort-and-interpolate.
    for case in 0..500 {
        let v: Vec<f64> = (0..r.random_range(1..40))
            .map(|_| r.random_range(-5.0..5.0))
            .collect();
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = p * (s.len() - 1) as f64;
            let (i, frac) = (h.floor() as usize, h - h.floor());
            if i + 1 < s.len() {
                s[i] * (1.0 - frac) + s[i + 1] * frac
            } else {
                s[i]
            }
        };
        let a = aggregate_runs(&v).map_err(err)?;
        let ok = [
            (a.lower_quartile, q(0.25)),
            (a.median, q(0.5)),
            (a.upper_quartile, q(0.75)),
            (a.whisker_low, s[0]),
            (a.whisker_high, s[s.len() - 1]),
        ]
        .iter()
        .all(|(x, y)| (x - y).abs() <= 1e-12);
        ensure(ok, || format!("case {case}: {a:?}"))?;
    }
    Ok(format!("AUC max |Δ| {worst:.1e} over 1000; decomposition max |Δ| {worst_dec:.1e}; quartiles exact over 500"))
}

fn composition(p: &SitePartition, key: impl Fn(usize) -> usize) -> Vec<BTreeMap<usize, usize>> {
    p.sites
        .iter()
        .map(|s| {
            let mut m = BTreeMap::new();
            s.iter().for_each(|&i| *m.entry(key(i)).or_insert(0) += 1);
            m
        })
        .collect()
}

fn partition_contracts() -> Outcome {
    let digits = corpus::digit_four(600, 4);
    let split = pca_kmeans_split(digits.images()).map_err(err)?;
    let (n1, n2) = (split.members(1).len(), split.members(2).len());
    let animals = corpus::animals(200, 5);
    let lesions = corpus::lesions([60, 30, 30, 20], 6);
    let pool: Vec<usize> = (0..lesions.len()).filter(|i| i % 7 != 0).collect();
    let pool_counts = composition(
        &SitePartition {
            sites: vec![pool.clone()],
            spec: BiasSpec::FixedCounts {
                count_table: vec![],
                seed: 0,
            },
            seed: 0,
        },
        |i| lesions.subgroups().unwrap()[i],
    )
    .remove(0);
    let mut r = rng::stream(9, "c9", 0);
    let mut kinds = [0usize; 3];
    for case in 0..200u64 {
        let seed = r.random_range(0..1_000_000);
        let kind = (case % 3) as usize;
        kinds[kind] += 1;
        let alpha = f64::from(r.random_range(0u32..=100));
        let beta = f64::from(r.random_range(0u32..=20)) / 20.0;
        let table: Vec<CountEntry> = corpus::LESIONS
            .iter()
            .enumerate()
            .map(|(g, name)| CountEntry {
                class: usize::from(matches!(g, 1 | 3)),
                subgroup: name.to_string(),
                count: r.random_range(0..=pool_counts[&g]),
            })
            .collect();
        let run = |seed: u64| -> Result<SitePartition, String> {
            Ok(match kind {
                0 => alpha_mix(&split, alpha, (n1.min(n2) / 2).min(150), seed).map_err(err)?,
                1 => beta_subgroup_split(&animals, "deer", "horse", beta, 58, seed).map_err(err)?,
                _ => lesion_fixed_split(&lesions, &pool, &table, seed).map_err(err)?,
            })
        };
        let p = run(seed)?;
        ensure(run(seed)? == p, || format!("case {case}: not reproducible"))?;
        let n = match kind {
            0 => digits.len(),
            1 => animals.len(),
            _ => lesions.len(),
        };
        p.check(n).map_err(|e| format!("case {case}: {e}"))?;
        match &p.spec {
            BiasSpec::AlphaMix {
                alpha,
                n_per_subset,
                ..
            } => {
                let comp = composition(&p, |i| split.assignments[i] as usize);
                let want = ((alpha * *n_per_subset as f64 / 100.0) + 0.5).floor() as usize;
                ensure(p.sites.iter().all(|s| s.len() == *n_per_subset), || {
                    format!("case {case}: subset sizes")
                })?;
                ensure(comp[0].get(&1).copied().unwrap_or(0) == want, || {
                    format!("case {case}: cluster-1 count")
                })?;
                let mirror = alpha_mix(&split, 100.0 - alpha, *n_per_subset, seed).map_err(err)?;
                let mc = composition(&mirror, |i| split.assignments[i] as usize);
                ensure(mc[0] == comp[1] && mc[1] == comp[0], || {
                    format!("case {case}: α symmetry")
                })?;
            }
            BiasSpec::BetaSubgroup {
                beta,
                n_per_class_per_site,
                ..
            } => {
                let tags = animals.subgroups().unwrap();
                let comp = composition(&p, |i| tags[i]);
                let n = *n_per_class_per_site;
                let deer = animals.subgroup_id("deer").unwrap();
                let horse = animals.subgroup_id("horse").unwrap();
                let want = ((beta * n as f64) + 0.5).floor() as usize;
                ensure(comp[0].get(&deer).copied().unwrap_or(0) == want, || {
                    format!("case {case}: helpee deer")
                })?;
                ensure(
                    comp[0].get(&horse).copied().unwrap_or(0) == n - want,
                    || format!("case {case}: helpee horse"),
                )?;
                for site in &p.sites {
                    for class in 0..2 {
                        let k = site
                            .iter()
                            .filter(|&&i| animals.classes()[i] == class)
                            .count();
                        ensure(k == n, || format!("case {case}: class {class} has {k}"))?;
                    }
                }
            }
            BiasSpec::FixedCounts { count_table, .. } => {
                let tags = lesions.subgroups().unwrap();
                let comp = composition(&p, |i| tags[i]);
                for e in count_table {
                    let g = lesions.subgroup_id(&e.subgroup).unwrap();
                    ensure(comp[0].get(&g).copied().unwrap_or(0) == e.count, || {
                        format!("case {case}: {} count", e.subgroup)
                    })?;
                }
                let mut all: Vec<usize> = p.sites.concat();
                all.sort_unstable();
                ensure(all == pool, || {
                    format!("case {case}: sites do not cover the pool")
                })?;
            }
        }
    }
    Ok(format!(
        "200 specs ({} α, {} β, {} fixed-count) hold every contract",
        kinds[0], kinds[1], kinds[2]
    ))
}

/// Hands the adversary one batch made by a generator that copies a real
/// training row.
struct Poisoned(Network);

impl SyntheticSource for Poisoned {
    fn draw(
        &mut self,
        sites: &[SiteState],
        batch_size: usize,
    ) -> Result<Vec<SyntheticBatch>, MechanismError> {
        let mut r = rng::stream(0, "poison", 0);
        sites
            .iter()
            .map(|s| {
                let latent =
                    draw_generator_inputs(&s.pair.latent, batch_size, s.pair.n_classes(), &mut r)?;
                let g = if s.site_id == 0 {
                    &self.0
                } else {
                    &s.pair.generator
                };
                SyntheticBatch::generate(s.site_id, g, &latent)
            })
            .collect()
    }
}

fn hygiene(scratch: &Path) -> Outcome {
    // Synthetic-only adversary.
    let (gs, ds) = toy_specs(4, 3, None);
    let mut rejected = 0;
    for draw in 0..50u64 {
        let mut r = rng::stream(draw, "c10", 0);
        let data: Vec<LabeledBatch> = (0..2)
            .map(|_| LabeledBatch::new(uniform_batch(12, 4, &mut r), Shape::flat(4), None).unwrap())
            .collect();
        let mut state = FeliciaState::new(felicia(&gs, &ds, vec![1.0, 1.0], draw), shards(2, 12))
            .map_err(err)?;
        state.train_round(&data, 4).map_err(err)?;
        // G(z) = tanh(atanh(x)) for a real row x: every output is real data.
        let mut copier = state.sites()[0].pair.generator.clone();
        let n = copier.n_params();
        copier.params_mut().fill(0.0);
        let row = data[0].samples().row((draw % 12) as usize).to_owned();
        for (k, v) in row.iter().enumerate() {
            copier.params_mut()[n - 4 + k] = v.atanh();
        }
        let before = (
            state.adversary().network().params().to_vec(),
            state.sites()[0].pair.generator.params().to_vec(),
            state.round(),
        );
        match state.train_round_with_source(&data, 4, &mut Poisoned(copier.clone())) {
            Err(_) => rejected += 1,
            Ok(_) => return Err(format!("draw {draw}: poisoned round accepted")),
        }
        let after = (
            state.adversary().network().params().to_vec(),
            state.sites()[0].pair.generator.params().to_vec(),
            state.round(),
        );
        ensure(before == after, || {
            format!("draw {draw}: state changed by a rejected round")
        })?;
        let latent = LatentBatch::new(gs.latent.sample(4, &mut r), None);
        let direct = [
            SyntheticBatch::generate(0, &copier, &latent).map_err(err)?,
            SyntheticBatch::generate(1, &state.sites()[1].pair.generator, &latent).map_err(err)?,
        ];
        ensure(
            matches!(
                state.adversary_step(&direct, 1e-3),
                Err(MechanismError::Provenance { site: 0, .. })
            ),
            || format!("draw {draw}: direct poisoned step accepted"),
        )?;
    }

    // Test-set isolation in selection.
    let mut r = rng::stream(10, "c10-split", 0);
    let report = |epoch: u64, split: Split, r: &mut rng::Rng| UtilityReport {
        config_id: "x".into(),
        lambdas: vec![1.0, 1.0],
        epoch: Some(epoch),
        seed: 1,
        recipe: "felicia".into(),
        split,
        auc: r.random_range(0.0..1.0),
        acc_overall: 0.5,
        per_subgroup: BTreeMap::new(),
    };
    for case in 0..200 {
        let n = r.random_range(2..12u64);
        let leak = case % 2 == 0;
        let mut reports: Vec<UtilityReport> = (1..=n)
            .map(|e| report(e * 10, Split::Validation, &mut r))
            .collect();
        if leak {
            let at = r.random_range(0..reports.len());
            reports[at].split = Split::Test;
        }
        let top = select_top_epochs(&reports, 1);
        let lam = select_lambda(&[
            ((1.0, 1.0), reports.clone()),
            ((0.5, 0.5), vec![report(5, Split::Validation, &mut r)]),
        ]);
        if leak {
            ensure(
                matches!(top, Err(EvalError::TestReport(_)))
                    && matches!(lam, Err(EvalError::TestReport(_))),
                || format!("case {case}: test-tagged report accepted"),
            )?;
        } else {
            ensure(top.is_ok() && lam.is_ok(), || {
                format!("case {case}: validation reports rejected")
            })?;
        }
    }

    // Deterministic double run.
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = scratch.join(format!("c10-{run}"));
        let mut cfg = tiny_lesion(&out)?;
        cfg.name = "acceptance-determinism".into();
        cfg.output_dir = Some(out.clone());
        run_experiment(&cfg).map_err(err)?;
        let files: Vec<Vec<u8>> = [
            VALIDATION_REPORTS,
            SELECTION,
            FINAL_TEST_METRICS,
            "aggregate.csv",
        ]
        .iter()
        .map(|f| std::fs::read(out.join(f)).unwrap_or_default())
        .collect();
        outputs.push(files);
    }
    ensure(
        outputs[0] == outputs[1] && outputs[0].iter().all(|f| !f.is_empty()),
        || "CSV outputs differ between runs".into(),
    )?;
    Ok(format!("{rejected}/50 poisoned rounds rejected with state intact; 200 selection cases; identical CSVs"))
}

fn main() {
    let scratch = tempfile::tempdir().expect("scratch dir");
    let base: PathBuf = std::env::var_os("FELICIA_ACCEPTANCE_DIR").map_or_else(
        || Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"),
        PathBuf::from,
    );
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("loss correctness", Box::new(loss_correctness)),
        ("gradient fidelity", Box::new(gradient_fidelity)),
        ("decoupling", Box::new(decoupling)),
        (
            "PrivGAN reduction",
            Box::new(|| privgan_reduction(scratch.path())),
        ),
        ("digit coverage", Box::new(|| coverage(&base))),
        (
            "subgroup bias correction",
            Box::new(|| subgroup_bias(&base)),
        ),
        (
            "lesion utility ordering",
            Box::new(|| lesion_utility(&base)),
        ),
        ("evaluation oracles", Box::new(evaluation_oracles)),
        ("partition contracts", Box::new(partition_contracts)),
        ("hygiene", Box::new(|| hygiene(scratch.path()))),
    ];
    let only: Option<Vec<usize>> = std::env::var("FELICIA_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let number = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&number)) {
            continue;
        }
        let t = Instant::now();
        let outcome = check();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {number:>2} {name}: PASS ({secs:.1}s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {number:>2} {name}: FAIL ({secs:.1}s) {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
