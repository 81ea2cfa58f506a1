//! Per-batch stage durations and the workload profiles they come from.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Whether the batch is an inference request (client data passes through
/// the proxy, which must open it before resealing) or a training batch (the
/// data already sits inside the proxy).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flow {
    Inference,
    Training,
}

impl Flow {
    pub const ALL: [Flow; 2] = [Flow::Inference, Flow::Training];

    pub fn name(self) -> &'static str {
        match self {
            Flow::Inference => "inference",
            Flow::Training => "training",
        }
    }
}

impl fmt::Display for Flow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Flow {
    type Err = TimingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inference" => Ok(Flow::Inference),
            "training" => Ok(Flow::Training),
            other => Err(TimingError::UnknownFlow(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TimingError {
    #[error("unknown preset {0:?} (expected resnet50, graphsage or ttnn)")]
    UnknownPreset(String),
    #[error("unknown flow {0:?} (expected inference or training)")]
    UnknownFlow(String),
    #[error("stage {stage} has invalid duration {value}")]
    InvalidDuration { stage: &'static str, value: f64 },
    #[error("parameter {name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("transfer share {0} must lie strictly between 0 and 1")]
    InvalidShare(f64),
}

/// Per-batch stage durations in microseconds for one flow.
///
/// `cpu_*` stages run on the proxy; `keystream + xor_dec` together form the
/// accelerator's CTR decryption and `gpu_auth` its tag check.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTiming {
    pub cpu_enc: f64,
    pub cpu_mac: f64,
    pub cpu_dec: f64,
    pub cpu_auth: f64,
    pub transfer: f64,
    pub keystream: f64,
    pub xor_dec: f64,
    pub gpu_auth: f64,
    pub compute: f64,
}

impl StageTiming {
    pub fn fields(&self) -> [(&'static str, f64); 9] {
        [
            ("cpu_enc", self.cpu_enc),
            ("cpu_mac", self.cpu_mac),
            ("cpu_dec", self.cpu_dec),
            ("cpu_auth", self.cpu_auth),
            ("transfer", self.transfer),
            ("keystream", self.keystream),
            ("xor_dec", self.xor_dec),
            ("gpu_auth", self.gpu_auth),
            ("compute", self.compute),
        ]
    }

    pub fn validate(&self) -> Result<(), TimingError> {
        for (stage, value) in self.fields() {
            if !value.is_finite() || value < 0.0 {
                return Err(TimingError::InvalidDuration { stage, value });
            }
        }
        Ok(())
    }

    /// Full accelerator decryption time.
    pub fn gpu_dec(&self) -> f64 {
        self.keystream + self.xor_dec
    }

    /// Proxy work that opens client data (inference only).
    pub fn proxy_open(&self) -> f64 {
        self.cpu_dec + self.cpu_auth
    }

    /// Proxy work that reseals data for the accelerator.
    pub fn proxy_seal(&self) -> f64 {
        self.cpu_enc + self.cpu_mac
    }

    /// Serialized secure-transfer cost of one batch without any optimization.
    pub fn secure_transfer(&self) -> f64 {
        self.proxy_open() + self.proxy_seal() + self.transfer + self.gpu_dec() + self.gpu_auth
    }

    /// How much slower a secured transfer is than the raw copy.
    pub fn penalty_ratio(&self) -> f64 {
        self.secure_transfer() / self.transfer
    }

    /// Share of the serialized per-batch time spent on secure transfer.
    pub fn transfer_share(&self) -> f64 {
        let io = self.secure_transfer();
        io / (io + self.compute)
    }
}

/// Published per-batch measurements for one model.
///
/// `cpu_enc` covers the proxy's encryption together with whatever part of
/// tag generation the measurement included; `batch_total` is the quoted
/// total secure-transfer time per batch; the shares are the quoted fraction
/// of end-to-end time spent on secure transfer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PresetNumbers {
    pub transfer: f64,
    pub gpu_dec: f64,
    pub gpu_auth: f64,
    pub cpu_enc: f64,
    pub batch_total: f64,
    pub training_share: f64,
    pub inference_share: f64,
}

/// Linear cost model: each stage costs `bytes * rate + fixed`.
/// Rates are microseconds per byte; compute is microseconds per item.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ByteRates {
    pub cpu_crypt: f64,
    pub cpu_mac: f64,
    pub transfer: f64,
    pub keystream: f64,
    pub xor_dec: f64,
    pub gpu_auth: f64,
    pub compute_per_item: f64,
    pub fixed: f64,
}

impl ByteRates {
    fn validate(&self) -> Result<(), TimingError> {
        let rates = [
            ("cpu_crypt", self.cpu_crypt),
            ("cpu_mac", self.cpu_mac),
            ("transfer", self.transfer),
            ("keystream", self.keystream),
            ("xor_dec", self.xor_dec),
            ("gpu_auth", self.gpu_auth),
            ("compute_per_item", self.compute_per_item),
        ];
        for (name, value) in rates {
            if !(value.is_finite() && value > 0.0) {
                return Err(TimingError::NonPositive { name, value });
            }
        }
        if !(self.fixed.is_finite() && self.fixed >= 0.0) {
            return Err(TimingError::InvalidDuration { stage: "fixed", value: self.fixed });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingSource {
    Preset(PresetNumbers),
    Rates(ByteRates),
    /// A timing vector used verbatim.
    Fixed(StageTiming),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    pub name: String,
    pub batch_size: u64,
    /// Payload bytes per item as sent by the client.
    pub item_bytes: u64,
    pub n_chains: usize,
    /// Share of accelerator decryption spent on the final XOR pass; the
    /// rest is keystream generation.
    pub xor_fraction: f64,
    pub timing: TimingSource,
    pub flow: Flow,
}

pub const PRESET_NAMES: [&str; 3] = ["resnet50", "graphsage", "ttnn"];

/// Default share of decryption time attributed to the XOR pass. Keystream
/// generation runs the full AES round function per block while the XOR is a
/// single streaming pass, so the XOR is taken as a tenth of the total.
pub const DEFAULT_XOR_FRACTION: f64 = 0.1;

impl WorkloadProfile {
    pub fn resnet50(flow: Flow) -> Self {
        Self {
            name: "resnet50".into(),
            batch_size: 64,
            item_bytes: 112 * 1024,
            n_chains: 16,
            xor_fraction: DEFAULT_XOR_FRACTION,
            timing: TimingSource::Preset(PresetNumbers {
                transfer: 312.5,
                gpu_dec: 70.3,
                gpu_auth: 1130.0,
                cpu_enc: 2440.0,
                batch_total: 3960.0,
                training_share: 0.10,
                inference_share: 0.368,
            }),
            flow,
        }
    }

    pub fn graphsage(flow: Flow) -> Self {
        Self {
            name: "graphsage".into(),
            batch_size: 1024,
            // 100 float32 node features per item.
            item_bytes: 400,
            n_chains: 16,
            xor_fraction: DEFAULT_XOR_FRACTION,
            timing: TimingSource::Preset(PresetNumbers {
                transfer: 2100.0,
                gpu_dec: 4200.0,
                gpu_auth: 13400.0,
                cpu_enc: 12980.0,
                batch_total: 32600.0,
                training_share: 0.8324,
                inference_share: 0.9304,
            }),
            flow,
        }
    }

    pub fn ttnn(flow: Flow) -> Self {
        Self {
            name: "ttnn".into(),
            batch_size: 1024,
            // A user/item id pair plus a rating and timestamp, as 32-bit words.
            item_bytes: 16,
            n_chains: 16,
            xor_fraction: DEFAULT_XOR_FRACTION,
            timing: TimingSource::Preset(PresetNumbers {
                transfer: 2190.0,
                gpu_dec: 4190.0,
                gpu_auth: 21890.0,
                cpu_enc: 22070.0,
                batch_total: 51430.0,
                training_share: 0.605,
                inference_share: 0.866,
            }),
            flow,
        }
    }

    pub fn preset(name: &str, flow: Flow) -> Result<Self, TimingError> {
        match name {
            "resnet50" => Ok(Self::resnet50(flow)),
            "graphsage" => Ok(Self::graphsage(flow)),
            "ttnn" => Ok(Self::ttnn(flow)),
            other => Err(TimingError::UnknownPreset(other.to_string())),
        }
    }

    pub fn batch_bytes(&self) -> u64 {
        self.batch_size * self.item_bytes
    }
}

/// Turns a profile into per-batch stage durations for its flow.
///
/// For measured presets:
/// - any part of the quoted per-batch total not covered by the listed
///   components is attributed to proxy tag generation (`cpu_mac`);
/// - decryption is split into keystream and XOR by `xor_fraction`;
/// - for inference the proxy first opens the client's data, which costs the
///   same as resealing it (`cpu_dec = cpu_enc`, `cpu_auth = cpu_mac`);
/// - compute is whatever remains of the end-to-end time once the quoted
///   transfer share is taken out, with batches processed serially.
pub fn derive_timings(profile: &WorkloadProfile) -> Result<StageTiming, TimingError> {
    if !(0.0..=1.0).contains(&profile.xor_fraction) {
        return Err(TimingError::InvalidDuration { stage: "xor_fraction", value: profile.xor_fraction });
    }
    let inference = profile.flow == Flow::Inference;
    let timing = match profile.timing {
        TimingSource::Fixed(t) => t,
        TimingSource::Preset(p) => {
            let quoted = [p.transfer, p.gpu_dec, p.gpu_auth, p.cpu_enc, p.batch_total];
            if let Some(&value) = quoted.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(TimingError::NonPositive { name: "preset value", value });
            }
            let share = if inference { p.inference_share } else { p.training_share };
            if !(share > 0.0 && share < 1.0) {
                return Err(TimingError::InvalidShare(share));
            }
            let listed = p.transfer + p.gpu_dec + p.gpu_auth + p.cpu_enc;
            let cpu_mac = (p.batch_total - listed).max(0.0);
            let mut t = StageTiming {
                cpu_enc: p.cpu_enc,
                cpu_mac,
                cpu_dec: 0.0,
                cpu_auth: 0.0,
                transfer: p.transfer,
                keystream: p.gpu_dec * (1.0 - profile.xor_fraction),
                xor_dec: p.gpu_dec * profile.xor_fraction,
                gpu_auth: p.gpu_auth,
                compute: 0.0,
            };
            if inference {
                t.cpu_dec = t.cpu_enc;
                t.cpu_auth = t.cpu_mac;
            }
            t.compute = t.secure_transfer() * (1.0 - share) / share;
            t
        }
        TimingSource::Rates(r) => {
            r.validate()?;
            let bytes = profile.batch_bytes() as f64;
            let stage = |rate: f64| bytes * rate + r.fixed;
            let mut t = StageTiming {
                cpu_enc: stage(r.cpu_crypt),
                cpu_mac: stage(r.cpu_mac),
                cpu_dec: 0.0,
                cpu_auth: 0.0,
                transfer: stage(r.transfer),
                keystream: stage(r.keystream),
                xor_dec: stage(r.xor_dec),
                gpu_auth: stage(r.gpu_auth),
                compute: profile.batch_size as f64 * r.compute_per_item,
            };
            if inference {
                t.cpu_dec = t.cpu_enc;
                t.cpu_auth = t.cpu_mac;
            }
            t
        }
    };
    timing.validate()?;
    Ok(timing)
}
