//! Uniform one-way network delay and in-order link delivery.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DelayError {
    #[error("unknown network `{0}` (expected ideal, 5G or 4G)")]
    UnknownNetwork(String),
    #[error("invalid delay bounds [{0}, {1}] ms")]
    InvalidBounds(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Network {
    #[serde(rename = "ideal")]
    Ideal,
    #[serde(rename = "5G")]
    FiveG,
    #[serde(rename = "4G")]
    FourG,
}

impl Network {
    pub const ALL: [Network; 3] = [Network::Ideal, Network::FiveG, Network::FourG];

    pub fn as_str(self) -> &'static str {
        match self {
            Network::Ideal => "ideal",
            Network::FiveG => "5G",
            Network::FourG => "4G",
        }
    }

    pub fn delay_model(self) -> DelayModel {
        match self {
            Network::Ideal => DelayModel::new(self, 0.0, 0.0),
            Network::FiveG => DelayModel::new(self, 0.0, 10.0),
            Network::FourG => DelayModel::new(self, 20.0, 50.0),
        }
        .expect("built-in bounds are valid")
    }
}

impl fmt::Display for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Network {
    type Err = DelayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Network::ALL
            .into_iter()
            .find(|n| n.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| DelayError::UnknownNetwork(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    pub label: Network,
    pub d_min_ms: f64,
    pub d_max_ms: f64,
}

impl DelayModel {
    pub fn new(label: Network, d_min_ms: f64, d_max_ms: f64) -> Result<Self, DelayError> {
        if !(0.0 <= d_min_ms && d_min_ms <= d_max_ms && d_max_ms.is_finite()) {
            return Err(DelayError::InvalidBounds(d_min_ms, d_max_ms));
        }
        Ok(DelayModel {
            label,
            d_min_ms,
            d_max_ms,
        })
    }

    pub fn mean_ms(&self) -> f64 {
        0.5 * (self.d_min_ms + self.d_max_ms)
    }

    /// One-way delay in milliseconds.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.d_max_ms == self.d_min_ms {
            return self.d_min_ms;
        }
        rng.gen_range(self.d_min_ms..=self.d_max_ms)
    }

    /// One-way delay in seconds.
    pub fn sample_secs<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.sample(rng) / 1000.0
    }
}

/// Reliable in-order link: a message never overtakes an earlier one.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Link {
    last_delivery: f64,
}

impl Link {
    pub fn delivery_time(&mut self, sent: f64, delay: f64) -> f64 {
        let t = (sent + delay).max(self.last_delivery);
        self.last_delivery = t;
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ideal_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(Network::Ideal.delay_model().sample(&mut rng), 0.0);
    }

    #[test]
    fn link_preserves_order() {
        let mut link = Link::default();
        assert_eq!(link.delivery_time(0.0, 0.05), 0.05);
        assert_eq!(link.delivery_time(0.01, 0.02), 0.05);
        assert_eq!(link.delivery_time(0.1, 0.0), 0.1);
    }

    #[test]
    fn parse_labels() {
        assert_eq!("5g".parse::<Network>().unwrap(), Network::FiveG);
        assert!("3G".parse::<Network>().is_err());
        assert!(DelayModel::new(Network::FourG, 50.0, 20.0).is_err());
    }
}
