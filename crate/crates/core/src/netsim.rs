//! Network instance generation.
//!
//! Base stations sit at fixed positions inside a square area; UEs are dropped
//! uniformly at random over the whole square. The channel power gain between
//! base station `k` and UE `n` is `l^-beta * E` where `l` is their distance and
//! `E` is an exponential (Rayleigh power) draw. When fewer than `2BK` real UEs
//! are active, zero-CSI surrogate UEs fill the remaining slots.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rates::RadioParams;

/// Geometry and radio parameters shared by every instance of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// One planar coordinate per base station, in meters.
    pub bs_positions: Vec<[f64; 2]>,
    pub prbs_per_bs: usize,
    /// Number of real (non-surrogate) UEs. `None` means the full `2BK`.
    #[serde(default)]
    pub active_ues: Option<usize>,
    pub area_half_width: f64,
    pub pathloss_exponent: f64,
    pub tx_power: f64,
    pub noise_variance: f64,
    /// Mean of the small-scale fading power draw.
    #[serde(default = "default_fading_mean")]
    pub fading_mean: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_fading_mean() -> f64 {
    1.0
}

impl NetworkConfig {
    /// 100 m x 100 m area, P = 1 W, noise 4e-9 W, pathloss exponent 4.
    pub fn with_base_stations(bs_positions: Vec<[f64; 2]>, prbs_per_bs: usize) -> Self {
        NetworkConfig {
            bs_positions,
            prbs_per_bs,
            active_ues: None,
            area_half_width: 50.0,
            pathloss_exponent: 4.0,
            tx_power: 1.0,
            noise_variance: 4e-9,
            fading_mean: 1.0,
            seed: 0,
        }
    }

    pub fn num_bs(&self) -> usize {
        self.bs_positions.len()
    }

    /// Total UE count `N = 2BK`, surrogates included.
    pub fn num_ues(&self) -> usize {
        2 * self.prbs_per_bs * self.num_bs()
    }

    pub fn num_active_ues(&self) -> usize {
        self.active_ues.unwrap_or_else(|| self.num_ues())
    }

    pub fn radio(&self) -> RadioParams {
        RadioParams::new(self.tx_power, self.noise_variance)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.bs_positions.is_empty() {
            return fail("at least one base station is required".into());
        }
        if self.prbs_per_bs == 0 {
            return fail("prbs_per_bs must be at least 1".into());
        }
        if !(self.area_half_width > 0.0 && self.area_half_width.is_finite()) {
            return fail(format!("area_half_width must be positive, got {}", self.area_half_width));
        }
        for (name, v) in [
            ("pathloss_exponent", self.pathloss_exponent),
            ("tx_power", self.tx_power),
            ("noise_variance", self.noise_variance),
            ("fading_mean", self.fading_mean),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive and finite, got {v}"));
            }
        }
        for (k, p) in self.bs_positions.iter().enumerate() {
            if p.iter().any(|c| !c.is_finite() || c.abs() > self.area_half_width) {
                return fail(format!("base station {k} at {p:?} lies outside the area"));
            }
        }
        if self.num_active_ues() > self.num_ues() {
            return fail(format!(
                "{} active UEs exceed the 2BK = {} available NOMA slots",
                self.num_active_ues(),
                self.num_ues()
            ));
        }
        Ok(())
    }

    /// Short stable fingerprint of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Channel power gains `h2[k][n]`, stored row-major with one row per base
/// station. Column `n` is the CSI vector of UE `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiMatrix {
    num_bs: usize,
    num_ues: usize,
    gains: Vec<f64>,
}

impl CsiMatrix {
    pub fn zeros(num_bs: usize, num_ues: usize) -> Self {
        CsiMatrix {
            num_bs,
            num_ues,
            gains: vec![0.0; num_bs * num_ues],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let num_bs = rows.len();
        let num_ues = rows.first().map_or(0, Vec::len);
        if num_bs == 0 {
            return Err(Error::Dimension("CSI matrix needs at least one row".into()));
        }
        let mut gains = Vec::with_capacity(num_bs * num_ues);
        for (k, row) in rows.into_iter().enumerate() {
            if row.len() != num_ues {
                return Err(Error::Dimension(format!(
                    "CSI row {k} has {} entries, expected {num_ues}",
                    row.len()
                )));
            }
            if let Some(bad) = row.iter().find(|g| !(**g >= 0.0 && g.is_finite())) {
                return Err(Error::Constraint(format!("CSI row {k} holds invalid gain {bad}")));
            }
            gains.extend(row);
        }
        Ok(CsiMatrix {
            num_bs,
            num_ues,
            gains,
        })
    }

    pub fn num_bs(&self) -> usize {
        self.num_bs
    }

    pub fn num_ues(&self) -> usize {
        self.num_ues
    }

    #[inline]
    pub fn gain(&self, k: usize, n: usize) -> f64 {
        self.gains[k * self.num_ues + n]
    }

    pub fn set_gain(&mut self, k: usize, n: usize, value: f64) {
        self.gains[k * self.num_ues + n] = value;
    }

    pub fn column(&self, n: usize) -> Vec<f64> {
        (0..self.num_bs).map(|k| self.gain(k, n)).collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.gains.chunks(self.num_ues.max(1)).take(self.num_bs).map(<[f64]>::to_vec).collect()
    }

    pub fn is_zero_column(&self, n: usize) -> bool {
        (0..self.num_bs).all(|k| self.gain(k, n) == 0.0)
    }
}

/// One optimization problem: the scenario plus a realized CSI matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkInstance {
    pub config: NetworkConfig,
    /// `None` marks a surrogate UE.
    pub ue_positions: Vec<Option<[f64; 2]>>,
    pub csi: CsiMatrix,
}

impl NetworkInstance {
    pub fn num_ues(&self) -> usize {
        self.csi.num_ues()
    }

    pub fn radio(&self) -> RadioParams {
        self.config.radio()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.csi.num_bs() != self.config.num_bs() {
            return Err(Error::Dimension(format!(
                "CSI has {} rows for {} base stations",
                self.csi.num_bs(),
                self.config.num_bs()
            )));
        }
        if self.ue_positions.len() != self.csi.num_ues() {
            return Err(Error::Dimension(format!(
                "{} UE positions for {} CSI columns",
                self.ue_positions.len(),
                self.csi.num_ues()
            )));
        }
        let w = self.config.area_half_width;
        for (n, pos) in self.ue_positions.iter().enumerate() {
            if let Some(p) = pos {
                if p.iter().any(|c| c.abs() > w) {
                    return Err(Error::Constraint(format!("UE {n} at {p:?} lies outside the area")));
                }
            }
        }
        Ok(())
    }
}

/// `l^-beta * fading`.
pub fn channel_gain(distance: f64, pathloss_exponent: f64, fading: f64) -> f64 {
    distance.powf(-pathloss_exponent) * fading
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Draws one instance, padded with surrogates up to `2BK` UEs.
///
/// Each active UE is placed first and then gets one fading draw per base
/// station, so the stream layout is stable across configurations.
pub fn sample_instance<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Result<NetworkInstance> {
    config.validate()?;
    let fading = Exp::new(1.0 / config.fading_mean).map_err(|e| Error::Config(e.to_string()))?;
    let active = config.num_active_ues();
    let num_bs = config.num_bs();
    let w = config.area_half_width;

    let mut positions = Vec::with_capacity(active);
    let mut csi = CsiMatrix::zeros(num_bs, active);
    for n in 0..active {
        let pos = loop {
            let p = [rng.random_range(-w..=w), rng.random_range(-w..=w)];
            if config.bs_positions.iter().all(|bs| distance(*bs, p) > 0.0) {
                break p;
            }
        };
        for (k, bs) in config.bs_positions.iter().enumerate() {
            let draw = loop {
                let e: f64 = fading.sample(rng);
                if e > 0.0 {
                    break e;
                }
            };
            csi.set_gain(k, n, channel_gain(distance(*bs, pos), config.pathloss_exponent, draw));
        }
        positions.push(Some(pos));
    }
    let instance = NetworkInstance {
        config: config.clone(),
        ue_positions: positions,
        csi,
    };
    pad_with_surrogates(instance, config.num_ues())
}

/// Appends zero-CSI surrogate UEs until the instance holds `target` UEs.
pub fn pad_with_surrogates(instance: NetworkInstance, target: usize) -> Result<NetworkInstance> {
    let current = instance.num_ues();
    if target < current {
        return Err(Error::Constraint(format!(
            "cannot pad {current} UEs down to {target}; padding only adds surrogates"
        )));
    }
    if target == current {
        return Ok(instance);
    }
    let num_bs = instance.csi.num_bs();
    let mut csi = CsiMatrix::zeros(num_bs, target);
    for k in 0..num_bs {
        for n in 0..current {
            csi.set_gain(k, n, instance.csi.gain(k, n));
        }
    }
    let mut ue_positions = instance.ue_positions;
    ue_positions.resize(target, None);
    Ok(NetworkInstance {
        config: instance.config,
        ue_positions,
        csi,
    })
}

#[derive(Serialize, Deserialize)]
struct Record {
    config_hash: String,
    config: NetworkConfig,
    ue_positions: Vec<Option<[f64; 2]>>,
    csi: Vec<Vec<f64>>,
}

/// Writes one JSON record per line.
pub fn save_dataset(instances: &[NetworkInstance], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for inst in instances {
        let record = Record {
            config_hash: inst.config.hash(),
            config: inst.config.clone(),
            ue_positions: inst.ue_positions.clone(),
            csi: inst.csi.rows(),
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<NetworkInstance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut instances = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let record: Record = serde_json::from_str(&line)
            .map_err(|e| parse_err(format!("record {}: {e}", instances.len() + 1)))?;
        let csi = CsiMatrix::from_rows(record.csi)
            .map_err(|e| parse_err(format!("record {}: {e}", instances.len() + 1)))?;
        let instance = NetworkInstance {
            config: record.config,
            ue_positions: record.ue_positions,
            csi,
        };
        instance
            .validate()
            .map_err(|e| parse_err(format!("record {}: {e}", instances.len() + 1)))?;
        instances.push(instance);
    }
    Ok(instances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn five_cell_config() -> NetworkConfig {
        NetworkConfig::with_base_stations(
            vec![[0.0, 0.0], [25.0, 25.0], [25.0, -25.0], [-25.0, 25.0], [-25.0, -25.0]],
            1,
        )
    }

    #[test]
    fn gain_formula() {
        assert!((channel_gain(10.0, 4.0, 1.0) - 1e-4).abs() < 1e-18);
        assert_eq!(channel_gain(1.0, 4.0, 0.0), 0.0);
    }

    #[test]
    fn five_cell_instance_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst = sample_instance(&five_cell_config(), &mut rng).unwrap();
        assert_eq!(inst.csi.num_bs(), 5);
        assert_eq!(inst.csi.num_ues(), 10);
        for k in 0..5 {
            for n in 0..10 {
                assert!(inst.csi.gain(k, n) > 0.0);
            }
        }
        inst.validate().unwrap();
    }

    #[test]
    fn sampling_is_reproducible() {
        let cfg = five_cell_config();
        let a = sample_instance(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_instance(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unit_mean_fading() {
        let fading = Exp::new(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mean: f64 = (0..n).map(|_| fading.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
    }

    #[test]
    fn padding() {
        let mut cfg = NetworkConfig::with_base_stations(vec![[0.0, 0.0], [25.0, 25.0]], 2);
        cfg.active_ues = Some(7);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inst = sample_instance(&cfg, &mut rng).unwrap();
        assert_eq!(inst.num_ues(), 8);
        assert!(inst.csi.is_zero_column(7));
        assert!(!inst.csi.is_zero_column(6));
        assert_eq!(inst.ue_positions[7], None);

        let same = pad_with_surrogates(inst.clone(), 8).unwrap();
        assert_eq!(same, inst);
        assert!(matches!(pad_with_surrogates(inst, 7), Err(Error::Constraint(_))));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = five_cell_config();
        cfg.pathloss_exponent = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = five_cell_config();
        cfg.bs_positions.push([60.0, 0.0]);
        assert!(cfg.validate().is_err());
        let mut cfg = five_cell_config();
        cfg.active_ues = Some(11);
        assert!(cfg.validate().is_err());
    }
}
