//! Channel gains, link rates, transfer and computation costs, local-period assembly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Scenario;

#[derive(Debug, Error, PartialEq)]
pub enum WirelessError {
    #[error("distance {distance} m is below the reference distance {reference} m")]
    BelowReference { distance: f64, reference: f64 },
    #[error("active computation with zero CPU frequency")]
    ZeroFrequency,
    #[error("link outage: active transfer over a zero-rate link")]
    LinkOutage,
    #[error("negative period component: {0}")]
    NegativeComponent(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelParams {
    /// β0 in dB at the reference distance.
    pub pathloss_ref_db: f64,
    /// d0 in metres.
    pub ref_distance: f64,
    pub pathloss_exponent: f64,
    /// N0 in W/Hz.
    pub noise_density: f64,
    pub fading_seed: u64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            pathloss_ref_db: -30.0,
            ref_distance: 1.0,
            pathloss_exponent: 3.0,
            // -174 dBm/Hz thermal noise
            noise_density: 3.98e-21,
            fading_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Uplink,
    Downlink,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    pub gain_squared: f64,
    pub rate: f64,
    pub direction: Direction,
    pub aggregation_index: usize,
}

/// Large-scale gain β_lin for a device at `distance`.
pub fn pathloss_linear(distance: f64, params: &ChannelParams) -> Result<f64, WirelessError> {
    if distance < params.ref_distance {
        return Err(WirelessError::BelowReference { distance, reference: params.ref_distance });
    }
    let db = params.pathloss_ref_db
        - 10.0 * params.pathloss_exponent * (distance / params.ref_distance).log10();
    Ok(10f64.powf(db / 10.0))
}

/// |h|² = β_lin·|u|² with u ~ CN(0, 1).
pub fn channel_gain<R: Rng + ?Sized>(
    distance: f64,
    params: &ChannelParams,
    rng: &mut R,
) -> Result<f64, WirelessError> {
    let beta = pathloss_linear(distance, params)?;
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Ok(beta * 0.5 * (re * re + im * im))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable seed derived from a tuple of keys, independent of evaluation order.
pub fn derive_seed(keys: &[u64]) -> u64 {
    keys.iter().fold(0x5EED_u64, |acc, &k| splitmix(acc ^ splitmix(k)))
}

/// Block-fading gain for one transfer, keyed by (seed, device, aggregation, direction).
pub fn block_gain(
    distance: f64,
    params: &ChannelParams,
    device: usize,
    g: usize,
    direction: Direction,
) -> Result<f64, WirelessError> {
    let dir = match direction {
        Direction::Uplink => 0,
        Direction::Downlink => 1,
    };
    let seed = derive_seed(&[params.fading_seed, device as u64, g as u64, dir]);
    channel_gain(distance, params, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Shannon rate in bits/s.
pub fn link_rate(bandwidth: f64, gain_squared: f64, tx_power: f64, noise_density: f64) -> f64 {
    bandwidth * (1.0 + gain_squared * tx_power / (noise_density * bandwidth)).log2()
}

/// Uplink and downlink budgets of `device` at aggregation `g`.
pub fn link_budgets(
    scenario: &Scenario,
    device: usize,
    g: usize,
) -> Result<(LinkBudget, LinkBudget), WirelessError> {
    let d = &scenario.devices[device];
    let ch = &scenario.channel;
    let dist = d.distance();
    let hu = block_gain(dist, ch, device, g, Direction::Uplink)?;
    let hd = block_gain(dist, ch, device, g, Direction::Downlink)?;
    let up = LinkBudget {
        gain_squared: hu,
        rate: link_rate(d.uplink_bandwidth, hu, d.uplink_power, ch.noise_density),
        direction: Direction::Uplink,
        aggregation_index: g,
    };
    let down = LinkBudget {
        gain_squared: hd,
        rate: link_rate(d.downlink_bandwidth, hd, scenario.downlink_power, ch.noise_density),
        direction: Direction::Downlink,
        aggregation_index: g,
    };
    Ok((up, down))
}

fn gate(active: bool) -> f64 {
    if active {
        1.0
    } else {
        0.0
    }
}

/// T = a·e·B / f when active.
pub fn compute_time(active: bool, cycles: f64, sgd_iters: f64, batch: f64, freq: f64) -> Result<f64, WirelessError> {
    if !active {
        return Ok(0.0);
    }
    if freq <= 0.0 {
        return Err(WirelessError::ZeroFrequency);
    }
    Ok(cycles * sgd_iters * batch / freq)
}

/// E = ξ·e·a·B·f² when active.
pub fn compute_energy(
    active: bool,
    capacitance: f64,
    sgd_iters: f64,
    cycles: f64,
    batch: f64,
    freq: f64,
) -> Result<f64, WirelessError> {
    if active && freq <= 0.0 {
        return Err(WirelessError::ZeroFrequency);
    }
    Ok(gate(active) * capacitance * sgd_iters * cycles * batch * freq * freq)
}

/// (delay, energy) of sending σ·M bits at `rate` with `power`.
pub fn transfer_cost(
    active: bool,
    bits_per_param: u32,
    model_dim: usize,
    rate: f64,
    power: f64,
) -> Result<(f64, f64), WirelessError> {
    if !active {
        return Ok((0.0, 0.0));
    }
    if rate <= 0.0 {
        return Err(WirelessError::LinkOutage);
    }
    let t = bits_per_param as f64 * model_dim as f64 / rate;
    Ok((t, power * t))
}

/// T^L = active·idle + compute + uplink + downlink.
pub fn local_period(
    idle: f64,
    active: bool,
    compute: f64,
    uplink: f64,
    downlink: f64,
) -> Result<f64, WirelessError> {
    for (v, name) in [(idle, "idle"), (compute, "compute"), (uplink, "uplink"), (downlink, "downlink")] {
        if !(v >= 0.0) {
            return Err(WirelessError::NegativeComponent(name));
        }
    }
    Ok(gate(active) * idle + compute + uplink + downlink)
}

/// Every time and energy component of one local period.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PeriodBreakdown {
    pub idle: f64,
    pub downlink: f64,
    pub compute: f64,
    pub uplink: f64,
    pub total: f64,
    pub compute_energy: f64,
    pub uplink_energy: f64,
    /// Charged to the base station.
    pub downlink_energy: f64,
}

/// Resource settings for one (device, task, aggregation) slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotResources {
    pub cpu_freq: f64,
    pub batch_size: f64,
    pub sgd_iters: f64,
    pub idle: f64,
}

/// Assemble the period of device `i` on task `j` at aggregation `g`.
pub fn period_breakdown(
    scenario: &Scenario,
    i: usize,
    j: usize,
    g: usize,
    active: bool,
    res: &SlotResources,
) -> Result<PeriodBreakdown, WirelessError> {
    if !active {
        return Ok(PeriodBreakdown::default());
    }
    let d = &scenario.devices[i];
    let t = &scenario.tasks[j];
    let (up, down) = link_budgets(scenario, i, g)?;
    let a = d.cycles_per_sample[j];
    let compute = compute_time(true, a, res.sgd_iters, res.batch_size, res.cpu_freq)?;
    let ec = compute_energy(true, d.chipset_capacitance, res.sgd_iters, a, res.batch_size, res.cpu_freq)?;
    let (tu, eu) = transfer_cost(true, t.bits_per_param, t.model_dim, up.rate, d.uplink_power)?;
    let (td, ed) = transfer_cost(true, t.bits_per_param, t.model_dim, down.rate, scenario.downlink_power)?;
    let total = local_period(res.idle, true, compute, tu, td)?;
    Ok(PeriodBreakdown {
        idle: res.idle,
        downlink: td,
        compute,
        uplink: tu,
        total,
        compute_energy: ec,
        uplink_energy: eu,
        downlink_energy: ed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_examples() {
        // SNR argument 1 gives r = B
        assert_eq!(link_rate(1e6, 1.0, 1e-15, 1e-21), 1e6);
        assert_eq!(link_rate(1e6, 0.0, 1.0, 1e-21), 0.0);
        assert!((link_rate(1e6, 3.0, 1e-15, 1e-21) - 2e6).abs() < 1e-6);
    }

    #[test]
    fn compute_examples() {
        assert_eq!(compute_time(false, 1000.0, 2.0, 10.0, 1e6).unwrap(), 0.0);
        assert!((compute_time(true, 1000.0, 2.0, 10.0, 1e6).unwrap() - 0.02).abs() < 1e-15);
        assert!((compute_energy(true, 1e-21, 2.0, 1000.0, 10.0, 1e6).unwrap() - 2e-5).abs() < 1e-18);
        assert_eq!(compute_time(true, 1.0, 1.0, 1.0, 0.0), Err(WirelessError::ZeroFrequency));
    }

    #[test]
    fn transfer_example() {
        let (t, e) = transfer_cost(true, 4096, 7850, 1e6, 0.25).unwrap();
        assert!((t - 32.1536).abs() < 1e-9);
        assert!((e - 8.0384).abs() < 1e-9);
        assert_eq!(transfer_cost(false, 4096, 7850, 0.0, 0.25).unwrap(), (0.0, 0.0));
        let err = transfer_cost(true, 4096, 7850, 0.0, 0.25).unwrap_err();
        assert!(err.to_string().contains("link outage"));
    }

    #[test]
    fn period_examples() {
        assert_eq!(local_period(5.0, false, 0.0, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(local_period(1.0, true, 1.0, 1.0, 1.0).unwrap(), 4.0);
        assert!((local_period(2.0, true, 0.02, 32.15, 3.2).unwrap() - 37.37).abs() < 1e-12);
        assert!(local_period(-1.0, true, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn block_gain_is_keyed() {
        let p = ChannelParams { fading_seed: 7, ..Default::default() };
        let a = block_gain(10.0, &p, 2, 3, Direction::Uplink).unwrap();
        let b = block_gain(10.0, &p, 2, 3, Direction::Uplink).unwrap();
        let c = block_gain(10.0, &p, 2, 3, Direction::Downlink).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(block_gain(0.5, &p, 0, 0, Direction::Uplink).is_err());
    }
}
