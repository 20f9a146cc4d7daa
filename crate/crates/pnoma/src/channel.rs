//! Shared multiple-access channel model.
//!
//! All users transmit complex symbol vectors simultaneously; the receiver
//! sees the gain-weighted superposition plus circular complex Gaussian
//! noise. This module owns SNR arithmetic, the per-user power constraint,
//! gain sampling, and the differentiable transmit path (noise and gains are
//! constants in the graph; the power-normalization scale is not).

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{RngStream, Tape, Tensor, Var};

/// Fading model for the shared channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    /// Unit gains, additive noise only.
    Awgn,
    /// Per-user complex Gaussian gains with unit mean square magnitude.
    Rayleigh,
}

impl std::fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChannelKind::Awgn => write!(f, "awgn"),
            ChannelKind::Rayleigh => write!(f, "rayleigh"),
        }
    }
}

impl std::str::FromStr for ChannelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "awgn" => Ok(ChannelKind::Awgn),
            "rayleigh" => Ok(ChannelKind::Rayleigh),
            other => Err(Error::Config(format!(
                "unknown channel kind `{other}` (expected `awgn` or `rayleigh`)"
            ))),
        }
    }
}

/// Average-power budget shared by `n_users` transmitters over `k` symbols.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerBudget {
    /// Total average power constraint of the shared channel.
    pub p_bar: f64,
    pub n_users: usize,
    /// Complex symbols per channel use.
    pub k: usize,
}

impl PowerBudget {
    pub fn new(p_bar: f64, n_users: usize, k: usize) -> Result<Self> {
        if !(p_bar > 0.0) || !p_bar.is_finite() {
            return Err(Error::Config(format!("p_bar must be positive, got {p_bar}")));
        }
        if n_users == 0 || k == 0 {
            return Err(Error::Config("n_users and k must be positive".to_string()));
        }
        Ok(PowerBudget { p_bar, n_users, k })
    }

    /// Per-user transmit power: the budget splits evenly across users.
    pub fn p_tx(&self) -> f64 {
        self.p_bar / self.n_users as f64
    }
}

/// One concrete draw of the channel: per-user gains plus a noise level.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    pub gains: Vec<Complex64>,
    /// Noise standard deviation per complex dimension (variance `sigma^2`).
    pub sigma: f64,
    pub kind: ChannelKind,
}

impl ChannelRealization {
    pub fn new(kind: ChannelKind, gains: Vec<Complex64>, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        if gains.is_empty() {
            return Err(Error::Config("at least one gain required".to_string()));
        }
        if kind == ChannelKind::Awgn && gains.iter().any(|g| *g != Complex64::new(1.0, 0.0)) {
            return Err(Error::Config("awgn realization requires unit gains".to_string()));
        }
        Ok(ChannelRealization { gains, sigma, kind })
    }
}

// ---------------------------------------------------------------------
// SNR arithmetic
// ---------------------------------------------------------------------

/// Noise variance for a target SNR: `sigma^2 = p_bar / 10^(snr_db/10)`.
pub fn snr_db_to_noise_var(snr_db: f64, p_bar: f64) -> Result<f64> {
    if !(p_bar > 0.0) || !p_bar.is_finite() {
        return Err(Error::Config(format!("p_bar must be positive, got {p_bar}")));
    }
    if !snr_db.is_finite() {
        return Err(Error::Config(format!("snr_db must be finite, got {snr_db}")));
    }
    Ok(p_bar / 10f64.powf(snr_db / 10.0))
}

/// SNR in dB for a given noise variance: `10 log10(p_bar / sigma^2)`.
pub fn noise_var_to_snr_db(noise_var: f64, p_bar: f64) -> Result<f64> {
    if !(p_bar > 0.0) || !p_bar.is_finite() {
        return Err(Error::Config(format!("p_bar must be positive, got {p_bar}")));
    }
    if !(noise_var > 0.0) || !noise_var.is_finite() {
        return Err(Error::Config(format!("noise variance must be positive, got {noise_var}")));
    }
    Ok(10.0 * (p_bar / noise_var).log10())
}

// ---------------------------------------------------------------------
// gains and noise
// ---------------------------------------------------------------------

/// Per-user channel gains: exactly one per user.
pub fn sample_gains(kind: ChannelKind, n_users: usize, stream: &mut RngStream) -> Vec<Complex64> {
    match kind {
        ChannelKind::Awgn => vec![Complex64::new(1.0, 0.0); n_users],
        ChannelKind::Rayleigh => {
            // Each real component N(0, 1/2) so E|h|^2 = 1.
            let comp_std = std::f64::consts::FRAC_1_SQRT_2;
            (0..n_users)
                .map(|_| Complex64::new(stream.normal(0.0, comp_std), stream.normal(0.0, comp_std)))
                .collect()
        }
    }
}

/// Complex vector held as two plain tensors (graph constants or raw data).
#[derive(Debug, Clone)]
pub struct ComplexTensor {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexTensor {
    pub fn zeros(k: usize) -> Self {
        ComplexTensor { re: Tensor::zeros(&[k]), im: Tensor::zeros(&[k]) }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }
}

/// Circular complex Gaussian noise: each real component has variance
/// `sigma^2 / 2`, so each complex dimension has variance `sigma^2`.
pub fn sample_noise(k: usize, sigma: f64, stream: &mut RngStream) -> ComplexTensor {
    assert!(sigma >= 0.0, "negative sigma {sigma}");
    let comp_std = sigma * std::f64::consts::FRAC_1_SQRT_2;
    let mut re = vec![0.0; k];
    let mut im = vec![0.0; k];
    stream.fill_normal(&mut re, 0.0, comp_std);
    stream.fill_normal(&mut im, 0.0, comp_std);
    ComplexTensor {
        re: Tensor::new(vec![k], re).expect("length matches"),
        im: Tensor::new(vec![k], im).expect("length matches"),
    }
}

// ---------------------------------------------------------------------
// graph-side complex vectors
// ---------------------------------------------------------------------

/// Complex vector living on a tape as separate real and imaginary nodes.
#[derive(Debug, Clone, Copy)]
pub struct ComplexVar {
    pub re: Var,
    pub im: Var,
}

impl ComplexVar {
    /// Squared complex norm as a scalar node.
    pub fn norm_sq(&self, tape: &mut Tape) -> Result<Var> {
        let nr = tape.l2_norm_sq(self.re)?;
        let ni = tape.l2_norm_sq(self.im)?;
        tape.add(nr, ni)
    }

    /// Multiplication by a constant complex scalar.
    pub fn scale_by(&self, tape: &mut Tape, c: Complex64) -> Result<ComplexVar> {
        let ar = tape.scale(self.re, c.re)?;
        let bi = tape.scale(self.im, c.im)?;
        let re = tape.sub(ar, bi)?;
        let ai = tape.scale(self.re, c.im)?;
        let br = tape.scale(self.im, c.re)?;
        let im = tape.add(ai, br)?;
        Ok(ComplexVar { re, im })
    }
}

/// Threshold below which a latent's energy counts as degenerate.
const DEGENERATE_NORM_SQ: f64 = 1e-280;

/// Rescales `z` so the average per-symbol power is exactly `p_tx`.
///
/// The scaling factor `sqrt(k p_tx / ||z||^2)` is a graph node, so gradients
/// flow through the normalization. A (near-)zero input has no well-defined
/// direction and signals a dead model; it is rejected rather than scaled.
pub fn power_normalize(tape: &mut Tape, z: &ComplexVar, k: usize, p_tx: f64) -> Result<ComplexVar> {
    if !(p_tx > 0.0) || !p_tx.is_finite() {
        return Err(Error::Config(format!("p_tx must be positive, got {p_tx}")));
    }
    let len = tape.value(z.re).len();
    if len != k || tape.value(z.im).len() != k {
        return Err(Error::shape(
            "power_normalize",
            format!("expected {k} symbols, got re {} / im {}", len, tape.value(z.im).len()),
        ));
    }
    let ns = z.norm_sq(tape)?;
    if tape.value(ns).item() < DEGENERATE_NORM_SQ {
        return Err(Error::numeric(
            "power_normalize",
            "degenerate (all-zero) input vector cannot be normalized",
        ));
    }
    let inv_norm = tape.powf(ns, -0.5)?;
    let factor = tape.scale(inv_norm, (k as f64 * p_tx).sqrt())?;
    let re = tape.mul_scalar(z.re, factor)?;
    let im = tape.mul_scalar(z.im, factor)?;
    Ok(ComplexVar { re, im })
}

/// Superimposes gain-weighted user signals and adds a fixed noise vector.
///
/// `noise = None` models a noiseless channel. An empty user list is allowed
/// only when noise is present (the receiver then sees noise alone).
pub fn transmit_fixed(
    tape: &mut Tape,
    inputs: &[(Complex64, ComplexVar)],
    noise: Option<&ComplexTensor>,
    k: usize,
) -> Result<ComplexVar> {
    if inputs.is_empty() && noise.is_none() {
        return Err(Error::shape("transmit", "no signals and no noise".to_string()));
    }
    for (_, z) in inputs {
        if tape.value(z.re).len() != k || tape.value(z.im).len() != k {
            return Err(Error::shape(
                "transmit",
                format!("user vector length != {k} symbols"),
            ));
        }
    }
    if let Some(nv) = noise {
        if nv.len() != k {
            return Err(Error::shape("transmit", format!("noise length {} != {k}", nv.len())));
        }
    }

    let mut acc: Option<ComplexVar> = None;
    for (gain, z) in inputs {
        let term = z.scale_by(tape, *gain)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => ComplexVar {
                re: tape.add(prev.re, term.re)?,
                im: tape.add(prev.im, term.im)?,
            },
        });
    }

    let mut y = match acc {
        Some(v) => v,
        None => ComplexVar {
            re: tape.constant(Tensor::zeros(&[k]))?,
            im: tape.constant(Tensor::zeros(&[k]))?,
        },
    };
    if let Some(nv) = noise {
        let nre = tape.constant(nv.re.clone())?;
        let nim = tape.constant(nv.im.clone())?;
        y = ComplexVar { re: tape.add(y.re, nre)?, im: tape.add(y.im, nim)? };
    }
    Ok(y)
}

/// Full channel use: pairs user signals with a realization's gains, samples
/// fresh noise at `realization.sigma` from the stream, and superimposes.
pub fn transmit(
    tape: &mut Tape,
    signals: &[ComplexVar],
    realization: &ChannelRealization,
    k: usize,
    stream: &mut RngStream,
) -> Result<ComplexVar> {
    if signals.len() != realization.gains.len() {
        return Err(Error::shape(
            "transmit",
            format!("{} signals vs {} gains", signals.len(), realization.gains.len()),
        ));
    }
    let noise = if realization.sigma > 0.0 {
        Some(sample_noise(k, realization.sigma, stream))
    } else {
        None
    };
    let inputs: Vec<(Complex64, ComplexVar)> =
        realization.gains.iter().copied().zip(signals.iter().copied()).collect();
    transmit_fixed(tape, &inputs, noise.as_ref(), k)
}
