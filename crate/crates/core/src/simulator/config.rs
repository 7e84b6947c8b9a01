use serde::{Deserialize, Serialize};

use crate::controller::ControllerConfig;
use crate::layout::{LayoutKind, LayoutOverrides, LayoutParams};
use crate::metrics::EmissionModel;
use crate::planner::VehicleParams;
use crate::protocol::Network;

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Priority,
    TrafficLight,
    Fifo,
    Moveover,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Priority, Method::TrafficLight, Method::Fifo, Method::Moveover];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Priority => "priority",
            Method::TrafficLight => "traffic_light",
            Method::Fifo => "fifo",
            Method::Moveover => "moveover",
        }
    }

    pub fn supports(self, layout: LayoutKind) -> bool {
        !(layout == LayoutKind::Roundabout && matches!(self, Method::TrafficLight | Method::Fifo))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('-', "_").to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| SimError::Config {
                field: "method".into(),
                reason: format!("unknown method {s:?}"),
            })
    }
}

/// Fixed-time signal plan. Each axis gets `green + yellow` in turn; on the
/// two-lane layout left turns keep green for `left_extension` seconds after
/// straight and right movements turn yellow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalTiming {
    pub green: f64,
    pub yellow: f64,
    pub green_two_lane: f64,
    pub left_extension: f64,
}

impl Default for SignalTiming {
    fn default() -> Self {
        SignalTiming {
            green: 35.0,
            yellow: 3.0,
            green_two_lane: 33.0,
            left_extension: 9.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarFollowing {
    /// Standstill bumper gap.
    pub min_gap: f64,
    /// Desired time headway.
    pub tau: f64,
    /// Deceleration the follower plans with.
    pub decel: f64,
    /// Hard braking limit.
    pub emergency_decel: f64,
    /// Distance kept to the intersection entrance while waiting.
    pub stop_line_gap: f64,
}

impl Default for CarFollowing {
    fn default() -> Self {
        CarFollowing {
            min_gap: 2.5,
            tau: 1.0,
            decel: 4.5,
            emergency_decel: 9.0,
            stop_line_gap: 0.2,
        }
    }
}

/// Partial vehicle overrides; unset fields come from the layout speeds and
/// the default vehicle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleOverrides {
    pub a_max: Option<f64>,
    pub b_max: Option<f64>,
    pub v_min: Option<f64>,
    pub length: Option<f64>,
    pub width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub layout: LayoutKind,
    pub method: Method,
    #[serde(default = "default_network")]
    pub network: Network,
    /// Poisson arrival rate per incoming direction, veh/s.
    pub arrival_rate: f64,
    /// Simulated seconds of arrivals.
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default = "default_timestep")]
    pub timestep: f64,
    #[serde(default)]
    pub seed: u64,
    /// Overrides the network's default negotiation zone length.
    #[serde(default)]
    pub negotiation_length: Option<f64>,
    /// Time a minor-road vehicle keeps clear of priority traffic.
    #[serde(default = "default_priority_margin")]
    pub priority_margin: f64,
    #[serde(default)]
    pub record_events: bool,
    #[serde(default)]
    pub geometry: LayoutOverrides,
    #[serde(default)]
    pub vehicle: VehicleOverrides,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub signals: SignalTiming,
    #[serde(default)]
    pub car_following: CarFollowing,
    #[serde(default)]
    pub emissions: EmissionModel,
}

fn default_network() -> Network {
    Network::Ideal
}

fn default_duration() -> f64 {
    1800.0
}

fn default_timestep() -> f64 {
    0.1
}

fn default_priority_margin() -> f64 {
    1.0
}

/// Negotiation zone length for a layout under a network, m.
pub fn default_negotiation_length(layout: LayoutKind, network: Network) -> f64 {
    match network {
        Network::Ideal => 0.0,
        Network::FiveG => 2.0,
        Network::FourG => match layout {
            LayoutKind::FourWay1L | LayoutKind::ThreeWay1L => 10.0,
            LayoutKind::Roundabout => 7.5,
            LayoutKind::FourWay2L => 17.0,
        },
    }
}

impl ScenarioConfig {
    pub fn new(layout: LayoutKind, method: Method, network: Network, arrival_rate: f64) -> Self {
        ScenarioConfig {
            layout,
            method,
            network,
            arrival_rate,
            duration: default_duration(),
            timestep: default_timestep(),
            seed: 0,
            negotiation_length: None,
            priority_margin: default_priority_margin(),
            record_events: false,
            geometry: LayoutOverrides::default(),
            vehicle: VehicleOverrides::default(),
            controller: ControllerConfig::default(),
            signals: SignalTiming::default(),
            car_following: CarFollowing::default(),
            emissions: EmissionModel::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, SimError> {
        toml::to_string(self).map_err(|e| SimError::Parse(e.to_string()))
    }

    pub fn negotiation_length(&self) -> f64 {
        self.negotiation_length
            .unwrap_or_else(|| default_negotiation_length(self.layout, self.network))
    }

    /// Vehicle parameters: layout speeds and defaults, then the overrides.
    pub fn vehicle_params(&self) -> Result<VehicleParams, SimError> {
        let layout = self.geometry.apply(LayoutParams::defaults(self.layout))?;
        self.vehicle_params_for(&layout)
    }

    pub(crate) fn vehicle_params_for(&self, layout: &LayoutParams) -> Result<VehicleParams, SimError> {
        let mut params = VehicleParams::for_layout(layout);
        let o = &self.vehicle;
        params.a_max = o.a_max.unwrap_or(params.a_max);
        params.b_max = o.b_max.unwrap_or(params.b_max);
        params.v_min = o.v_min.unwrap_or(params.v_min);
        params.length = o.length.unwrap_or(params.length);
        params.width = o.width.unwrap_or(params.width);
        params.validate()?;
        Ok(params)
    }

    /// Checks ranges and names the first offending field.
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |field: &str, reason: String| {
            Err(SimError::Config {
                field: field.to_string(),
                reason,
            })
        };
        if !self.method.supports(self.layout) {
            return bad(
                "method",
                format!("{} is not available on the {} layout", self.method, self.layout),
            );
        }
        let positive: [(&str, f64); 4] = [
            ("duration", self.duration),
            ("timestep", self.timestep),
            ("car_following.decel", self.car_following.decel),
            ("car_following.emergency_decel", self.car_following.emergency_decel),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(field, format!("must be positive, got {v}"));
            }
        }
        let non_negative: [(&str, f64); 8] = [
            ("arrival_rate", self.arrival_rate),
            ("priority_margin", self.priority_margin),
            ("car_following.min_gap", self.car_following.min_gap),
            ("car_following.tau", self.car_following.tau),
            ("car_following.stop_line_gap", self.car_following.stop_line_gap),
            ("signals.yellow", self.signals.yellow),
            ("signals.left_extension", self.signals.left_extension),
            ("controller.epsilon", self.controller.epsilon),
        ];
        for (field, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(field, format!("must be non-negative, got {v}"));
            }
        }
        if self.timestep > 1.0 {
            return bad("timestep", format!("{} s is too coarse", self.timestep));
        }
        if let Some(l) = self.negotiation_length {
            if !(l >= 0.0) {
                return bad("negotiation_length", format!("must be non-negative, got {l}"));
            }
        }
        if !(self.signals.green > 0.0 && self.signals.green_two_lane > 0.0) {
            return bad("signals.green", "green phases must be positive".into());
        }
        if !(self.controller.sample_dt > 0.0) {
            return bad("controller.sample_dt", "must be positive".into());
        }
        if self.controller.max_exchanges < 2 {
            return bad(
                "controller.max_exchanges",
                "at least one proposal and one response".into(),
            );
        }
        if self.car_following.emergency_decel < self.car_following.decel {
            return bad(
                "car_following.emergency_decel",
                "must not be below car_following.decel".into(),
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_toml() {
        let cfg = ScenarioConfig::from_toml(
            r#"
layout = "four-way-1L"
method = "moveover"
network = "4G"
arrival_rate = 0.2
"#,
        )
        .unwrap();
        assert_eq!(cfg.duration, 1800.0);
        assert_eq!(cfg.negotiation_length(), 10.0);
        let back = ScenarioConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn names_offending_field() {
        let err =
            ScenarioConfig::from_toml("layout = \"roundabout\"\nmethod = \"fifo\"\narrival_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("method"), "{err}");
        let err = ScenarioConfig::from_toml("layout = \"three-way-1L\"\nmethod = \"priority\"\narrival_rate = -1\n")
            .unwrap_err();
        assert!(err.to_string().contains("arrival_rate"), "{err}");
        let err = ScenarioConfig::from_toml(
            "layout = \"three-way-1L\"\nmethod = \"priority\"\narrival_rate = 0.1\n[car_following]\ntau = -2\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("car_following.tau"), "{err}");
        assert!(ScenarioConfig::from_toml("layout = \"x\"\nmethod = \"fifo\"\narrival_rate = 1\n").is_err());
    }

    #[test]
    fn negotiation_lengths() {
        use LayoutKind::*;
        assert_eq!(default_negotiation_length(FourWay2L, Network::FourG), 17.0);
        assert_eq!(default_negotiation_length(Roundabout, Network::FourG), 7.5);
        assert_eq!(default_negotiation_length(ThreeWay1L, Network::FiveG), 2.0);
        assert_eq!(default_negotiation_length(FourWay1L, Network::Ideal), 0.0);
    }
}
