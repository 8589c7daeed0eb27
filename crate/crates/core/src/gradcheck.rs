//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Example, Network, Sizes};
use crate::nn::Mode;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{Tape, Var};

/// Lower bound on the denominator of the relative error, so coordinates
/// whose true gradient is zero are judged by absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates checked per parameter; `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
    /// When set, a coordinate whose error exceeds this is re-checked with
    /// step/10; if the error then falls within it, the first stencil
    /// straddled a kink (relu, max pool) and the coordinate is reported in
    /// `kinks` instead of counting towards `max_rel_error`.
    pub kink_tolerance: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords_per_param: None,
            seed: 0,
            kink_tolerance: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discrepancy {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst: Option<Discrepancy>,
    pub kinks: Vec<Discrepancy>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares tape gradients of the scalar `f` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every (or a sample of) parameter coordinate.
///
/// `f` must be a pure function of the parameter values: any randomness it
/// uses has to be re-seeded on every call.
pub fn check_gradients<F>(store: &mut ParamStore, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    if opts.step <= 0.0 {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    ensure_finite(tape.value(loss).data()[0], "base point")?;
    tape.backward(loss)?;
    let mut grads = Gradients::new(store);
    tape.export_param_grads(store, &mut grads);
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let len = store.value(id).len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for c in coords {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[c]);
            let numeric = central_difference(store, &mut f, id, c, opts.step)?;
            let rel = relative_error(analytic, numeric);
            report.coords_checked += 1;
            let found = Discrepancy {
                param: store.get(id).name.clone(),
                index: c,
                analytic,
                numeric,
                rel_error: rel,
            };
            if let Some(tol) = opts.kink_tolerance {
                if rel > tol {
                    let finer = central_difference(store, &mut f, id, c, opts.step / 10.0)?;
                    if relative_error(analytic, finer) <= tol {
                        report.kinks.push(found);
                        continue;
                    }
                }
            }
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(found);
            }
        }
    }
    Ok(report)
}

/// Checks the full training objective of a freshly initialized network on
/// `batch` in training mode (dropout re-seeded per evaluation).
///
/// Every parameter is shifted by `U(−jitter, jitter)` first: zero-initialized
/// biases otherwise put relu units exactly on their kink, where the one-sided
/// slopes differ and central differences are meaningless.
pub fn check_network(
    cfg: &ModelConfig,
    sizes: Sizes,
    batch: &[Example],
    seed: u64,
    jitter: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let net = Network::init(cfg, sizes, &mut store, &mut rng)?;
    if jitter > 0.0 {
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for v in store.value_mut(id).data_mut() {
                *v += rng.gen_range(-jitter..jitter);
            }
        }
    }
    let stats = net.initial_norm_stats();
    let refs: Vec<&Example> = batch.iter().collect();
    check_gradients(
        &mut store,
        |s, tape| {
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            net.forward(tape, s, &refs, Mode::Train, &stats, &mut r)?
                .loss
                .ok_or_else(|| Error::Usage("gradient check needs labelled examples".into()))
        },
        opts,
    )
}

fn central_difference<F>(store: &mut ParamStore, f: &mut F, id: ParamId, c: usize, h: f64) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let orig = store.value(id).data()[c];
    store.value_mut(id).data_mut()[c] = orig + h;
    let plus = eval(store, f);
    store.value_mut(id).data_mut()[c] = orig - h;
    let minus = eval(store, f);
    store.value_mut(id).data_mut()[c] = orig;
    let name = &store.get(id).name;
    let (plus, minus) = (plus?, minus?);
    ensure_finite(plus, name)?;
    ensure_finite(minus, name)?;
    Ok((plus - minus) / (2.0 * h))
}

fn eval<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    Ok(tape.value(loss).data()[0])
}

fn ensure_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "non-finite loss {v} while perturbing {what}"
        )))
    }
}
