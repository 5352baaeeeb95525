//! LiDAR power, pulse energy and resolution budget.
//!
//! ```text
//! P_total = P_laser + P_scan + P_signal + P_control
//! P_laser = E_pulse f_pulse / eta_laser
//! P_scan  = V_motor I_motor / eta_motor
//! E_pulse(R) = P_r (4 pi R^2)^2 tau / (A_r rho eta)
//! dR = c tau / 2,   dtheta = lambda / D
//! f_s = c / dR,     P_ADC = k f_s 2^N
//! ```

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::perturb::PerturbationSpec;

/// Speed of light, exact SI value (m/s).
pub const SPEED_OF_LIGHT: f64 = 2.997_924_58e8;

#[derive(Debug, Clone, PartialEq)]
pub struct LidarConfig {
    /// Configured energy per pulse (J).
    pub e_pulse: f64,
    pub f_pulse: f64,
    pub eta_laser: f64,
    pub v_motor: f64,
    pub i_motor: f64,
    pub eta_motor: f64,
    pub p_signal: f64,
    pub p_control: f64,
    /// Minimum received power (W).
    pub p_r: f64,
    /// Receiver aperture area (m^2).
    pub a_r: f64,
    pub rho: f64,
    pub eta: f64,
    /// Pulse width (s).
    pub tau: f64,
    /// Wavelength (m).
    pub lambda: f64,
    /// Aperture diameter (m).
    pub d: f64,
    /// ADC constant, joules per sample per quantization level.
    pub k_adc: f64,
    pub n_bits: u32,
}

impl Default for LidarConfig {
    /// A 905 nm mechanical scanner operating point.
    fn default() -> Self {
        Self {
            e_pulse: 1e-6,
            f_pulse: 1e5,
            eta_laser: 0.25,
            v_motor: 12.0,
            i_motor: 0.5,
            eta_motor: 0.8,
            p_signal: 2.0,
            p_control: 1.0,
            p_r: 1e-9,
            a_r: 1e-3,
            rho: 0.5,
            eta: 0.5,
            tau: 5e-9,
            lambda: 905e-9,
            d: 0.025,
            k_adc: 1e-12,
            n_bits: 8,
        }
    }
}

const KEYS: [&str; 17] = [
    "E_pulse", "f_pulse", "eta_laser", "V_motor", "I_motor", "eta_motor", "P_signal", "P_control", "P_r", "A_r",
    "rho", "eta", "tau", "lambda", "D", "k_adc", "N_bits",
];

fn efficiency(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {v} must be in (0, 1]")))
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {v} must be positive")))
    }
}

fn nonnegative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {v} must be nonnegative")))
    }
}

impl LidarConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = || -> Result<f64> {
            value
                .parse()
                .map_err(|_| Error::parse("lidar config", format!("{key} = '{value}' is not a number")))
        };
        match key {
            "E_pulse" => self.e_pulse = num()?,
            "f_pulse" => self.f_pulse = num()?,
            "eta_laser" => self.eta_laser = num()?,
            "V_motor" => self.v_motor = num()?,
            "I_motor" => self.i_motor = num()?,
            "eta_motor" => self.eta_motor = num()?,
            "P_signal" => self.p_signal = num()?,
            "P_control" => self.p_control = num()?,
            "P_r" => self.p_r = num()?,
            "A_r" => self.a_r = num()?,
            "rho" => self.rho = num()?,
            "eta" => self.eta = num()?,
            "tau" => self.tau = num()?,
            "lambda" => self.lambda = num()?,
            "D" => self.d = num()?,
            "k_adc" => self.k_adc = num()?,
            "N_bits" => {
                self.n_bits = value
                    .parse()
                    .map_err(|_| Error::parse("lidar config", format!("N_bits = '{value}'")))?
            }
            _ => {
                return Err(Error::Unknown {
                    kind: "lidar parameter",
                    value: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    /// Keys outside the physical parameter set are returned separately.
    pub fn parse_with_extras(text: &str) -> Result<(Self, Vec<(String, String)>)> {
        let mut cfg = Self::default();
        let mut extras = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("lidar config", format!("line {}: expected key=value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if KEYS.contains(&k) {
                cfg.set(k, v)?;
            } else {
                extras.push((k.to_string(), v.to_string()));
            }
        }
        Ok((cfg, extras))
    }

    pub fn validate(&self) -> Result<()> {
        efficiency("eta_laser", self.eta_laser)?;
        efficiency("eta_motor", self.eta_motor)?;
        efficiency("eta", self.eta)?;
        efficiency("rho", self.rho)?;
        for (name, v) in [
            ("E_pulse", self.e_pulse),
            ("f_pulse", self.f_pulse),
            ("V_motor", self.v_motor),
            ("I_motor", self.i_motor),
            ("P_signal", self.p_signal),
            ("P_control", self.p_control),
            ("P_r", self.p_r),
            ("k_adc", self.k_adc),
        ] {
            nonnegative(name, v)?;
        }
        for (name, v) in [("A_r", self.a_r), ("tau", self.tau), ("lambda", self.lambda), ("D", self.d)] {
            positive(name, v)?;
        }
        if self.n_bits == 0 {
            return Err(Error::Domain("N_bits must be at least 1".into()));
        }
        Ok(())
    }
}

impl FromStr for LidarConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (cfg, extras) = Self::parse_with_extras(s)?;
        if let Some((k, _)) = extras.first() {
            return Err(Error::Unknown {
                kind: "lidar parameter",
                value: k.clone(),
            });
        }
        Ok(cfg)
    }
}

pub fn laser_power(cfg: &LidarConfig) -> Result<f64> {
    efficiency("eta_laser", cfg.eta_laser)?;
    nonnegative("E_pulse", cfg.e_pulse)?;
    nonnegative("f_pulse", cfg.f_pulse)?;
    Ok(cfg.e_pulse * cfg.f_pulse / cfg.eta_laser)
}

pub fn scan_power(cfg: &LidarConfig) -> Result<f64> {
    efficiency("eta_motor", cfg.eta_motor)?;
    nonnegative("V_motor", cfg.v_motor)?;
    nonnegative("I_motor", cfg.i_motor)?;
    Ok(cfg.v_motor * cfg.i_motor / cfg.eta_motor)
}

/// Pulse energy needed to detect a target at range `r` metres.
pub fn pulse_energy_for_range(cfg: &LidarConfig, r: f64) -> Result<f64> {
    positive("R", r)?;
    positive("tau", cfg.tau)?;
    positive("A_r", cfg.a_r)?;
    efficiency("rho", cfg.rho)?;
    efficiency("eta", cfg.eta)?;
    nonnegative("P_r", cfg.p_r)?;
    let spread = 4.0 * std::f64::consts::PI * r * r;
    Ok(cfg.p_r * spread * spread * cfg.tau / (cfg.a_r * cfg.rho * cfg.eta))
}

pub fn range_resolution(cfg: &LidarConfig) -> Result<f64> {
    positive("tau", cfg.tau)?;
    Ok(SPEED_OF_LIGHT * cfg.tau / 2.0)
}

pub fn angular_resolution(cfg: &LidarConfig) -> Result<f64> {
    positive("D", cfg.d)?;
    positive("lambda", cfg.lambda)?;
    Ok(cfg.lambda / cfg.d)
}

/// ADC power and the minimum sampling rate for range resolution `delta_r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdcPower {
    pub watts: f64,
    pub f_s: f64,
}

pub fn adc_power(cfg: &LidarConfig, delta_r: f64) -> Result<AdcPower> {
    positive("delta_r", delta_r)?;
    nonnegative("k_adc", cfg.k_adc)?;
    if cfg.n_bits == 0 || cfg.n_bits > 1023 {
        return Err(Error::Domain(format!("N_bits = {} must be in 1..=1023", cfg.n_bits)));
    }
    let f_s = SPEED_OF_LIGHT / delta_r;
    let levels = 2f64.powi(cfg.n_bits as i32);
    Ok(AdcPower {
        watts: cfg.k_adc * f_s * levels,
        f_s,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarBudget {
    pub range: f64,
    pub p_laser: f64,
    pub p_scan: f64,
    pub p_signal: f64,
    pub p_control: f64,
    pub p_total: f64,
    pub p_adc: f64,
    pub f_s: f64,
    pub e_pulse_required: f64,
    pub e_pulse_available: f64,
    pub delta_r: f64,
    pub delta_theta: f64,
}

pub fn total_power(cfg: &LidarConfig, range: f64) -> Result<LidarBudget> {
    nonnegative("P_signal", cfg.p_signal)?;
    nonnegative("P_control", cfg.p_control)?;
    let p_laser = laser_power(cfg)?;
    let p_scan = scan_power(cfg)?;
    let delta_r = range_resolution(cfg)?;
    let adc = adc_power(cfg, delta_r)?;
    Ok(LidarBudget {
        range,
        p_laser,
        p_scan,
        p_signal: cfg.p_signal,
        p_control: cfg.p_control,
        p_total: p_laser + p_scan + cfg.p_signal + cfg.p_control,
        p_adc: adc.watts,
        f_s: adc.f_s,
        e_pulse_required: pulse_energy_for_range(cfg, range)?,
        e_pulse_available: cfg.e_pulse,
        delta_r,
        delta_theta: angular_resolution(cfg)?,
    })
}

/// Map a pulse-energy shortfall against a nominal operating point onto a
/// perturbation severity: with
/// `r = clamp(1 - available / reference_required, 0, 1)`,
/// drop `alpha = 0.5 r` and noise `sigma = 0.1 r`.
pub fn severity_from_budget(budget: &LidarBudget, reference: &LidarBudget) -> PerturbationSpec {
    let ratio = if reference.e_pulse_required > 0.0 {
        budget.e_pulse_available / reference.e_pulse_required
    } else {
        1.0
    };
    let deficit = (1.0 - ratio).clamp(0.0, 1.0);
    PerturbationSpec {
        drop_fraction: 0.5 * deficit,
        sigma: 0.1 * deficit,
        ..PerturbationSpec::clean()
    }
}

impl LidarBudget {
    pub fn table(&self) -> String {
        let rows = [
            ("range", self.range, "m"),
            ("P_laser", self.p_laser, "W"),
            ("P_scan", self.p_scan, "W"),
            ("P_signal", self.p_signal, "W"),
            ("P_control", self.p_control, "W"),
            ("P_total", self.p_total, "W"),
            ("P_ADC", self.p_adc, "W"),
            ("f_s", self.f_s, "Hz"),
            ("E_pulse required", self.e_pulse_required, "J"),
            ("E_pulse available", self.e_pulse_available, "J"),
            ("range resolution", self.delta_r, "m"),
            ("angular resolution", self.delta_theta, "rad"),
        ];
        let mut s = String::new();
        for (name, v, unit) in rows {
            writeln!(s, "{name:<20} {v:>14.6e} {unit}").unwrap();
        }
        s
    }
}

/// TOML fragment declaring an evaluation condition for `spec`.
pub fn condition_fragment(name: &str, spec: &PerturbationSpec) -> String {
    format!(
        "[[eval.conditions]]\nname = \"{name}\"\ndrop = {:?}\nsigma = {:?}\n",
        spec.drop_fraction, spec.sigma
    )
}
