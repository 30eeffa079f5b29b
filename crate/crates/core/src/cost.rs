//! Device-centric systems cost model: dense-training and inference FLOPs,
//! per-round communication volume, and wall-clock transfer estimates over an
//! asymmetric residential link.
//!
//! Conventions: 1 GB = 1e9 bytes, 1 Mbps = 1e6 bits per second, four bytes
//! per parameter at full precision.

use serde::{Deserialize, Serialize};

use crate::domain::ModelSpec;

// --------------------------------------------------------------------------
// Link model
// --------------------------------------------------------------------------

/// Access-link speeds in bits per second. Defaults follow the median US
/// fixed-broadband profile: 61 Mbps down, 8 Mbps up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    #[serde(default = "default_down_bps")]
    pub down_bps: f64,
    #[serde(default = "default_up_bps")]
    pub up_bps: f64,
}

fn default_down_bps() -> f64 {
    61e6
}

fn default_up_bps() -> f64 {
    8e6
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec { down_bps: default_down_bps(), up_bps: default_up_bps() }
    }
}

// --------------------------------------------------------------------------
// Formulas
// --------------------------------------------------------------------------

/// Dense training cost: 6 FLOPs per parameter per token seen.
pub fn training_flops(spec: &ModelSpec, steps: u64, batch: u64, seq_len: u64) -> f64 {
    6.0 * spec.params as f64 * steps as f64 * batch as f64 * seq_len as f64
}

/// Forward-only cost with reused attention caches: 2 FLOPs per parameter per
/// input token.
pub fn inference_flops(spec: &ModelSpec, input_len: u64) -> f64 {
    2.0 * spec.params as f64 * input_len as f64
}

/// Per-device federated communication volume over `rounds` rounds: one full
/// model down and one full update up per round. Returns (down, up) bytes.
pub fn fl_comm_bytes(spec: &ModelSpec, rounds: u64) -> (f64, f64) {
    let per_round = spec.param_bytes() as f64;
    (rounds as f64 * per_round, rounds as f64 * per_round)
}

/// One-time foundation-model download; nothing is ever uploaded.
pub fn icl_download_bytes(spec: &ModelSpec) -> f64 {
    spec.param_bytes() as f64
}

/// Seconds to move `bytes` over a link of `bits_per_second`.
pub fn transfer_seconds(bytes: f64, bits_per_second: f64) -> f64 {
    8.0 * bytes / bits_per_second
}

// --------------------------------------------------------------------------
// Tally
// --------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Federated,
    InContext,
    LocalOnly,
}

/// Accumulated systems cost of one scenario, per device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTally {
    pub kind: CostKind,
    pub tasks_supported: u64,
    pub training_flops: f64,
    pub inference_flops: f64,
    pub bytes_down: f64,
    pub bytes_up: f64,
    pub transfer_seconds_down: f64,
    pub transfer_seconds_up: f64,
    pub transfer_seconds_total: f64,
    /// Bytes the device must keep to serve the task(s).
    pub disk_bytes: f64,
}

impl CostTally {
    pub fn new(
        kind: CostKind,
        training_flops: f64,
        inference_flops: f64,
        bytes_down: f64,
        bytes_up: f64,
        disk_bytes: f64,
        network: &NetworkSpec,
    ) -> CostTally {
        let down_s = transfer_seconds(bytes_down, network.down_bps);
        let up_s = transfer_seconds(bytes_up, network.up_bps);
        CostTally {
            kind,
            tasks_supported: 1,
            training_flops,
            inference_flops,
            bytes_down,
            bytes_up,
            transfer_seconds_down: down_s,
            transfer_seconds_up: up_s,
            transfer_seconds_total: down_s + up_s,
            disk_bytes,
        }
    }

    /// Project the tally onto a device running `tasks` independent tasks.
    /// Federated and local training pay every component once per task; a
    /// downloaded foundation model is shared, so only inference scales.
    pub fn for_tasks(&self, tasks: u64) -> CostTally {
        let t = tasks as f64;
        let mut out = self.clone();
        out.tasks_supported = tasks;
        match self.kind {
            CostKind::Federated | CostKind::LocalOnly => {
                out.training_flops *= t;
                out.inference_flops *= t;
                out.bytes_down *= t;
                out.bytes_up *= t;
                out.transfer_seconds_down *= t;
                out.transfer_seconds_up *= t;
                out.transfer_seconds_total *= t;
                out.disk_bytes *= t;
            }
            CostKind::InContext => {
                out.inference_flops *= t;
            }
        }
        out
    }
}

/// Device tally for federated training: `steps` local optimizer steps and
/// full-model exchange in every one of `rounds` rounds, plus one local
/// inference pass per served example.
pub fn federated_device_tally(
    spec: &ModelSpec,
    rounds: u64,
    steps: u64,
    batch: u64,
    seq_len: u64,
    inference_calls: u64,
    inference_len: u64,
    network: &NetworkSpec,
) -> CostTally {
    let (down, up) = fl_comm_bytes(spec, rounds);
    CostTally::new(
        CostKind::Federated,
        training_flops(spec, steps, batch, seq_len),
        inference_flops(spec, inference_len) * inference_calls as f64,
        down,
        up,
        spec.param_bytes() as f64,
        network,
    )
}

/// Device tally for in-context serving: one model download, no training, and
/// one forward pass per scorer call at the given context length.
pub fn icl_device_tally(
    spec: &ModelSpec,
    inference_calls: u64,
    inference_len: u64,
    network: &NetworkSpec,
) -> CostTally {
    CostTally::new(
        CostKind::InContext,
        0.0,
        inference_flops(spec, inference_len) * inference_calls as f64,
        icl_download_bytes(spec),
        0.0,
        spec.param_bytes() as f64,
        network,
    )
}

/// Round to one significant figure, the precision headline cost tables use.
pub fn round_sig1(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let exp = x.abs().log10().floor();
    let scale = 10f64.powf(exp);
    (x / scale).round() * scale
}
