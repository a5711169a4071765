use serde::{Deserialize, Serialize};

use crate::remap::{SizeBudget, TimingBudget};
use crate::{Error, Result};

/// Which source flows the attacker perturbs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    Su,
    St(Vec<usize>),
}

/// What the attacker wants the classifier to output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DestMode {
    Du,
    Dt(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Timing,
    Size,
    DirectionInjection,
    TimingInjection,
    SizeInjection,
}

impl Channel {
    pub fn is_injection(self) -> bool {
        matches!(self, Self::DirectionInjection | Self::TimingInjection | Self::SizeInjection)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Invisibility {
    Off,
    Laplace { location: f64, scale: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub source: SourceMode,
    pub dest: DestMode,
    pub channels: Vec<Channel>,
    pub timing: Option<TimingBudget>,
    pub size: Option<SizeBudget>,
    /// Packets injected per flow (alpha).
    pub insertion_count: usize,
    pub epochs: usize,
    /// Independent initialisations tried for one epoch each; the best one
    /// is trained to the end.
    pub restarts: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub invisibility: Invisibility,
    pub regularizer_coef: f64,
    pub discriminator_lr: f64,
    /// Generated and reference samples per discriminator step (each).
    pub discriminator_batch: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            source: SourceMode::Su,
            dest: DestMode::Du,
            channels: vec![Channel::DirectionInjection],
            timing: None,
            size: None,
            insertion_count: 0,
            epochs: 10,
            restarts: 1,
            learning_rate: 1e-3,
            batch_size: 32,
            invisibility: Invisibility::Off,
            regularizer_coef: 1.0,
            discriminator_lr: 1e-4,
            discriminator_batch: 16,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn has(&self, c: Channel) -> bool {
        self.channels.contains(&c)
    }

    /// Checks the config against a target with `class_count` classes and
    /// flows of `length` packets (`pair` for flow-pair targets).
    pub fn validate(&self, class_count: usize, length: usize, pair: bool) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels.is_empty() {
            return bad("attack needs at least one channel".into());
        }
        let mut sorted = self.channels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.channels.len() {
            return bad("duplicate attack channel".into());
        }
        if pair && self.channels.iter().any(|c| c.is_injection()) {
            return bad("packet injection is only supported on single flows".into());
        }
        if self.has(Channel::Timing) && self.timing.is_none() {
            return bad("timing channel needs a timing budget".into());
        }
        if self.has(Channel::Size) && self.size.is_none() {
            return bad("size channel needs a size budget".into());
        }
        if (self.has(Channel::TimingInjection) || self.has(Channel::SizeInjection)) && !self.has(Channel::DirectionInjection) {
            return bad("injected timing/size values need the direction-injection channel".into());
        }
        if self.insertion_count > length {
            return bad(format!("insertion count {} exceeds flow length {length}", self.insertion_count));
        }
        match &self.source {
            SourceMode::St(classes) if classes.is_empty() => return bad("ST needs at least one source class".into()),
            SourceMode::St(classes) => {
                if let Some(c) = classes.iter().find(|c| **c >= class_count) {
                    return bad(format!("ST class {c} out of range for {class_count} classes"));
                }
            }
            SourceMode::Su => {}
        }
        if let DestMode::Dt(t) = self.dest {
            if t >= class_count {
                return bad(format!("DT target {t} out of range for {class_count} classes"));
            }
        }
        if let Invisibility::Laplace { scale, location } = self.invisibility {
            if !self.has(Channel::Timing) {
                return bad("the Laplace regularizer needs the timing channel".into());
            }
            if !(scale > 0.0) || !location.is_finite() {
                return bad(format!("invalid Laplace parameters ({location}, {scale})"));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.discriminator_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1".into());
        }
        if self.batch_size == 0 || self.discriminator_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.regularizer_coef >= 0.0) {
            return bad("regularizer coefficient must be >= 0".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = AttackConfig {
            source: SourceMode::St(vec![1, 3]),
            dest: DestMode::Dt(2),
            channels: vec![Channel::Timing, Channel::Size],
            timing: Some(TimingBudget::new(0.0, 0.03).unwrap()),
            size: Some(SizeBudget::new(1000.0, 512.0, 512.0).unwrap()),
            invisibility: Invisibility::Laplace {
                location: 0.0,
                scale: 0.02,
            },
            ..Default::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        let back: AttackConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        let short: AttackConfig = toml::from_str("dest = { dt = 4 }\ninsertion_count = 50").unwrap();
        assert_eq!(short.dest, DestMode::Dt(4));
        assert_eq!(short.channels, vec![Channel::DirectionInjection]);
    }

    #[test]
    fn validation() {
        let ok = AttackConfig {
            insertion_count: 5,
            ..Default::default()
        };
        assert!(ok.validate(10, 50, false).is_ok());
        assert!(ok.validate(2, 50, true).is_err());
        let too_many = AttackConfig {
            insertion_count: 51,
            ..Default::default()
        };
        assert!(too_many.validate(10, 50, false).is_err());
        let st = AttackConfig {
            source: SourceMode::St(vec![]),
            ..Default::default()
        };
        assert!(st.validate(10, 50, false).is_err());
        let dt = AttackConfig {
            dest: DestMode::Dt(10),
            ..Default::default()
        };
        assert!(dt.validate(10, 50, false).is_err());
        let timing = AttackConfig {
            channels: vec![Channel::Timing],
            ..Default::default()
        };
        assert!(timing.validate(10, 50, false).is_err());
        let orphan = AttackConfig {
            channels: vec![Channel::TimingInjection],
            ..Default::default()
        };
        assert!(orphan.validate(10, 50, false).is_err());
    }
}
