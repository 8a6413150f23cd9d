//! Geometric multipath MIMO-OFDM channel.
//!
//! A scene is a fixed set of propagation paths seen by a uniform linear array
//! with half-wavelength spacing. The user moves in a straight line at constant
//! speed, which enters only through a per-path Doppler rotation:
//!
//! ```text
//! H[a, s, t] = Σ_p g_p · e^{i2π f_d,p t} · e^{−i2π f_s τ_p} · e^{iπ a sin θ_p}
//! ```
//!
//! with `f_s` the baseband offset of subcarrier `s` (spacing `bandwidth/n_sc`,
//! centred on zero) and `a` the antenna index starting at 0.

use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math;

/// Propagation speed used for Doppler shifts, m/s.
pub const SPEED_OF_LIGHT: f64 = 3.0e8;

/// Per-path power ratio between consecutive paths before normalization.
pub const PATH_POWER_DECAY: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathComponent {
    pub gain: Complex64,
    /// Angle of departure from array broadside, radians.
    pub aod: f64,
    /// Seconds.
    pub delay: f64,
    /// Hz.
    pub doppler: f64,
}

impl PathComponent {
    pub fn new(gain: Complex64, aod: f64, delay: f64, doppler: f64) -> Result<Self> {
        if !(gain.norm() > 0.0) || !gain.re.is_finite() || !gain.im.is_finite() {
            return Err(invalid("path gain must be finite and non-zero"));
        }
        if !(delay >= 0.0) || !delay.is_finite() {
            return Err(invalid("path delay must be finite and non-negative"));
        }
        if !aod.is_finite() || !doppler.is_finite() {
            return Err(invalid("path angle and doppler must be finite"));
        }
        Ok(Self {
            gain,
            aod,
            delay,
            doppler,
        })
    }

    /// Path whose Doppler follows from motion at `speed` m/s in direction
    /// `motion_dir` (radians, same frame as `aod`):
    /// `f_d = speed · f_c / c · cos(motion_dir − aod)`.
    pub fn from_motion(gain: Complex64, aod: f64, delay: f64, speed: f64, f_c: f64, motion_dir: f64) -> Result<Self> {
        let doppler = doppler_shift(speed, f_c, motion_dir - aod);
        Self::new(gain, aod, delay, doppler)
    }
}

/// `speed · f_c / c · cos(angle)`.
pub fn doppler_shift(speed: f64, f_c: f64, angle: f64) -> f64 {
    speed * f_c / SPEED_OF_LIGHT * math::cos(angle)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathSet {
    pub paths: Vec<PathComponent>,
}

impl PathSet {
    pub fn new(paths: Vec<PathComponent>) -> Self {
        Self { paths }
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub n_ant: usize,
    pub n_sc: usize,
    /// Carrier frequency, Hz.
    pub f_c: f64,
    /// Hz.
    pub bandwidth: f64,
    pub n_paths: usize,
    /// m/s.
    pub speed: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_ant: 4,
            n_sc: 8,
            f_c: 3.5e9,
            bandwidth: 100e6,
            n_paths: 3,
            speed: 10.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ant == 0 || self.n_sc == 0 || self.n_paths == 0 {
            return Err(invalid("scene needs n_ant, n_sc and n_paths of at least 1"));
        }
        if !(self.speed >= 0.0) || !self.speed.is_finite() {
            return Err(invalid("scene speed must be finite and non-negative"));
        }
        if !(self.f_c > 0.0) || !(self.bandwidth > 0.0) || !self.f_c.is_finite() || !self.bandwidth.is_finite() {
            return Err(invalid("carrier frequency and bandwidth must be positive"));
        }
        Ok(())
    }

    /// Baseband offset of subcarrier `s`, Hz.
    pub fn subcarrier_offset(&self, s: usize) -> f64 {
        let spacing = self.bandwidth / self.n_sc as f64;
        (s as f64 - (self.n_sc as f64 - 1.0) / 2.0) * spacing
    }

    /// Largest drawn path delay: one OFDM symbol, `n_sc / bandwidth`.
    pub fn max_delay(&self) -> f64 {
        self.n_sc as f64 / self.bandwidth
    }
}

/// Draws a scene: motion direction uniform on [0, 2π); per path an AoD uniform
/// on (−π/2, π/2), a delay uniform on [0, n_sc/bandwidth), a uniform phase, and
/// power `∝ 0.7^p` normalized to unit total. Deterministic in `cfg.seed`.
pub fn make_scene(cfg: &SceneConfig) -> Result<PathSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let motion_dir = rng.random_range(0.0..2.0 * PI);
    let total: f64 = (0..cfg.n_paths).map(|p| math::pow(PATH_POWER_DECAY, p as f64)).sum();
    let mut paths = Vec::with_capacity(cfg.n_paths);
    for p in 0..cfg.n_paths {
        let aod = loop {
            let a = rng.random_range(-PI / 2.0..PI / 2.0);
            if a > -PI / 2.0 {
                break a;
            }
        };
        let delay = rng.random_range(0.0..cfg.max_delay());
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = math::sqrt(math::pow(PATH_POWER_DECAY, p as f64) / total);
        let gain = Complex64::new(amp * math::cos(phase), amp * math::sin(phase));
        paths.push(PathComponent::from_motion(gain, aod, delay, cfg.speed, cfg.f_c, motion_dir)?);
    }
    Ok(PathSet { paths })
}

/// Complex `n_ant × n_sc` matrix, antenna-major row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiMatrix {
    n_ant: usize,
    n_sc: usize,
    values: Vec<Complex64>,
}

impl CsiMatrix {
    pub fn new(n_ant: usize, n_sc: usize, values: Vec<Complex64>) -> Result<Self> {
        if n_ant == 0 || n_sc == 0 || values.len() != n_ant * n_sc {
            return Err(invalid(alloc::format!(
                "csi matrix {n_ant}x{n_sc} needs {} entries, got {}",
                n_ant * n_sc,
                values.len()
            )));
        }
        Ok(Self { n_ant, n_sc, values })
    }

    pub fn zeros(n_ant: usize, n_sc: usize) -> Self {
        Self {
            n_ant,
            n_sc,
            values: alloc::vec![Complex64::new(0.0, 0.0); n_ant * n_sc],
        }
    }

    /// From interleaved `(re, im)` pairs.
    pub fn from_real(n_ant: usize, n_sc: usize, interleaved: &[f64]) -> Result<Self> {
        if interleaved.len() != 2 * n_ant * n_sc {
            return Err(invalid("interleaved csi vector has wrong length"));
        }
        let values = interleaved.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect();
        Self::new(n_ant, n_sc, values)
    }

    pub fn n_ant(&self) -> usize {
        self.n_ant
    }

    pub fn n_sc(&self) -> usize {
        self.n_sc
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n_ant, self.n_sc)
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn get(&self, a: usize, s: usize) -> Complex64 {
        self.values[a * self.n_sc + s]
    }

    /// Interleaved `(re, im)` real vector of length `2·n_ant·n_sc`.
    pub fn to_real(&self) -> Vec<f64> {
        self.values.iter().flat_map(|c| [c.re, c.im]).collect()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// Elementwise combination of two matrices of equal dimensions.
    pub fn zip_with(&self, other: &Self, f: impl Fn(Complex64, Complex64) -> Complex64) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: other.dims(),
            });
        }
        Ok(Self {
            n_ant: self.n_ant,
            n_sc: self.n_sc,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        Self {
            n_ant: self.n_ant,
            n_sc: self.n_sc,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[inline]
fn cis(phase: f64) -> Complex64 {
    Complex64::new(math::cos(phase), math::sin(phase))
}

/// Channel response of `paths` at time `t` (seconds).
pub fn csi_at(paths: &PathSet, cfg: &SceneConfig, t: f64) -> CsiMatrix {
    let mut h = CsiMatrix::zeros(cfg.n_ant, cfg.n_sc);
    for p in &paths.paths {
        let rot = p.gain * cis(2.0 * PI * p.doppler * t);
        let steer = PI * math::sin(p.aod);
        for a in 0..cfg.n_ant {
            let ra = rot * cis(steer * a as f64);
            for s in 0..cfg.n_sc {
                let fs = cfg.subcarrier_offset(s);
                h.values[a * cfg.n_sc + s] += ra * cis(-2.0 * PI * fs * p.delay);
            }
        }
    }
    h
}

/// Timestamped CSI observations. Timestamps are finite and distinct; their
/// order is arbitrary.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiHistory {
    timestamps: Vec<f64>,
    inputs: Vec<CsiMatrix>,
}

impl CsiHistory {
    pub fn new(timestamps: Vec<f64>, inputs: Vec<CsiMatrix>) -> Result<Self> {
        if timestamps.is_empty() {
            return Err(Error::Empty("csi history"));
        }
        if timestamps.len() != inputs.len() {
            return Err(invalid("one timestamp per input matrix is required"));
        }
        if timestamps.iter().any(|t| !t.is_finite()) {
            return Err(invalid("timestamps must be finite"));
        }
        let dims = inputs[0].dims();
        if let Some(m) = inputs.iter().find(|m| m.dims() != dims) {
            return Err(Error::DimensionMismatch {
                expected: dims,
                found: m.dims(),
            });
        }
        let mut sorted = timestamps.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("duplicate timestamps"));
        }
        Ok(Self { timestamps, inputs })
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn inputs(&self) -> &[CsiMatrix] {
        &self.inputs
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.inputs[0].dims()
    }

    /// Index permutation that sorts the observations by time.
    pub fn time_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.timestamps[a].total_cmp(&self.timestamps[b]));
        idx
    }

    /// Observation with the latest timestamp.
    pub fn latest(&self) -> (f64, &CsiMatrix) {
        let i = *self.time_order().last().unwrap();
        (self.timestamps[i], &self.inputs[i])
    }

    /// Reorders observations (jointly with their timestamps).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(invalid("permutation length mismatch"));
        }
        Self::new(
            perm.iter().map(|&i| self.timestamps[i]).collect(),
            perm.iter().map(|&i| self.inputs[i].clone()).collect(),
        )
    }
}

/// Prediction sample: strictly increasing history plus the target matrix at a
/// later time.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiSequence {
    history: CsiHistory,
    target_time: f64,
    target: CsiMatrix,
}

impl CsiSequence {
    pub fn new(timestamps: Vec<f64>, inputs: Vec<CsiMatrix>, target_time: f64, target: CsiMatrix) -> Result<Self> {
        if timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("timestamps must be strictly increasing"));
        }
        let history = CsiHistory::new(timestamps, inputs)?;
        if !(target_time > *history.timestamps.last().unwrap()) || !target_time.is_finite() {
            return Err(invalid("target time must come after the last input"));
        }
        if target.dims() != history.dims() {
            return Err(Error::DimensionMismatch {
                expected: history.dims(),
                found: target.dims(),
            });
        }
        Ok(Self {
            history,
            target_time,
            target,
        })
    }

    pub fn history(&self) -> &CsiHistory {
        &self.history
    }

    pub fn timestamps(&self) -> &[f64] {
        self.history.timestamps()
    }

    pub fn inputs(&self) -> &[CsiMatrix] {
        self.history.inputs()
    }

    pub fn target_time(&self) -> f64 {
        self.target_time
    }

    pub fn target(&self) -> &CsiMatrix {
        &self.target
    }

    pub fn dims(&self) -> (usize, usize) {
        self.history.dims()
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Gaps between consecutive inputs, milliseconds.
    pub fn gaps_ms(&self) -> Vec<f64> {
        self.timestamps().windows(2).map(|w| (w[1] - w[0]) * 1e3).collect()
    }
}

/// Samples `paths` at `timestamps` and at `target_time`.
pub fn sample_sequence(paths: &PathSet, cfg: &SceneConfig, timestamps: &[f64], target_time: f64) -> Result<CsiSequence> {
    if timestamps.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("timestamps must be strictly increasing"));
    }
    let inputs = timestamps.iter().map(|&t| csi_at(paths, cfg, t)).collect();
    CsiSequence::new(timestamps.to_vec(), inputs, target_time, csi_at(paths, cfg, target_time))
}

/// How input gaps are chosen for generated sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GapPattern {
    /// The same gaps (ms) for every sequence; length `n_inputs − 1`.
    Fixed(Vec<f64>),
    /// Each gap drawn uniformly from these values (ms).
    Choice(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingPlan {
    pub n_inputs: usize,
    pub gaps: GapPattern,
    /// Gap from the last input to the prediction target, ms.
    pub target_gap_ms: f64,
}

impl SamplingPlan {
    /// `n_inputs` samples evenly spaced by `interval_ms`, target one interval later.
    pub fn uniform(n_inputs: usize, interval_ms: f64) -> Self {
        Self {
            n_inputs,
            gaps: GapPattern::Fixed(alloc::vec![interval_ms; n_inputs.saturating_sub(1)]),
            target_gap_ms: interval_ms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_inputs == 0 {
            return Err(invalid("sampling plan needs at least one input"));
        }
        let positive = |v: &[f64]| v.iter().all(|g| *g > 0.0 && g.is_finite());
        match &self.gaps {
            GapPattern::Fixed(g) if g.len() != self.n_inputs - 1 => {
                return Err(invalid("fixed gap pattern needs n_inputs - 1 gaps"))
            }
            GapPattern::Fixed(g) | GapPattern::Choice(g) if !positive(g) => {
                return Err(invalid("gaps must be positive"))
            }
            GapPattern::Choice(g) if g.is_empty() && self.n_inputs > 1 => {
                return Err(invalid("gap choice set is empty"))
            }
            _ => {}
        }
        if !(self.target_gap_ms > 0.0) || !self.target_gap_ms.is_finite() {
            return Err(invalid("target gap must be positive"));
        }
        Ok(())
    }

    fn draw_gaps(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match &self.gaps {
            GapPattern::Fixed(g) => g.clone(),
            GapPattern::Choice(c) => (1..self.n_inputs).map(|_| c[rng.random_range(0..c.len())]).collect(),
        }
    }
}

/// Generates `count` sequences, each from its own random scene (scene seeds
/// drawn from `seed`). Timestamps start at 0.
pub fn generate_sequences(scene: &SceneConfig, plan: &SamplingPlan, count: usize, seed: u64) -> Result<Vec<CsiSequence>> {
    scene.validate()?;
    plan.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let cfg = SceneConfig {
            seed: rng.next_u64(),
            ..scene.clone()
        };
        let gaps = plan.draw_gaps(&mut rng);
        let mut ts = Vec::with_capacity(plan.n_inputs);
        let mut t = 0.0;
        ts.push(t);
        for g in gaps {
            t += g * 1e-3;
            ts.push(t);
        }
        let target = t + plan.target_gap_ms * 1e-3;
        let paths = make_scene(&cfg)?;
        out.push(sample_sequence(&paths, &cfg, &ts, target)?);
    }
    Ok(out)
}
