//! Dispatch accounting and the launch-overhead latency model.
//!
//! Every matrix-multiply dispatch the engine issues is recorded with its
//! kind and FLOP count. Latency is modeled as a fixed per-dispatch launch
//! overhead plus compute time at a flat throughput; optionally the recorder
//! injects a calibrated busy-wait per dispatch so wall-clock measurements
//! reproduce the overhead-dominated regime. The per-dispatch cost is an
//! explicit knob, not a measurement of any real device.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::engine::ExecMode;
use crate::model::{ModelConfig, SiteName};

/// Kind of a recorded dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum DispatchKind {
    BackboneGemm,
    AdapterGemm,
    RouterGemm,
    MergeGemm,
    SgmmDispatch,
}

impl DispatchKind {
    pub const ALL: [DispatchKind; 5] = [
        DispatchKind::BackboneGemm,
        DispatchKind::AdapterGemm,
        DispatchKind::RouterGemm,
        DispatchKind::MergeGemm,
        DispatchKind::SgmmDispatch,
    ];
}

impl fmt::Display for DispatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DispatchKind::BackboneGemm => "backbone_gemm",
            DispatchKind::AdapterGemm => "adapter_gemm",
            DispatchKind::RouterGemm => "router_gemm",
            DispatchKind::MergeGemm => "merge_gemm",
            DispatchKind::SgmmDispatch => "sgmm_dispatch",
        };
        write!(f, "{s}")
    }
}

/// One recorded dispatch. Decode steps use non-negative `token_step`;
/// prefill positions are encoded as negative steps (`-1 - position`) so the
/// log distinguishes phases without an extra column. `site_id` is -1 for
/// dispatches not tied to a single site.
#[derive(Debug, Clone, Serialize)]
pub struct DispatchEvent {
    pub kind: DispatchKind,
    pub flops: u64,
    pub token_step: i64,
    pub site_id: i64,
}

/// Parameters of the analytic latency model.
#[derive(Debug, Clone, Serialize)]
pub struct CostParams {
    /// Fixed cost charged per dispatch, microseconds.
    pub launch_overhead_us: f64,
    /// Flat effective compute rate, GFLOP/s.
    pub throughput_gflops: f64,
    /// Busy-wait `launch_overhead_us` inside every `record` call so measured
    /// wall-clock times sit in the same overhead-dominated regime the model
    /// describes.
    pub injected_delay: bool,
}

impl Default for CostParams {
    fn default() -> Self {
        // Chosen so that at this crate's toy dimensions the per-dispatch
        // overhead dominates per-dispatch compute, which is the regime the
        // dispatch-reduction claims are about. Both values are plain knobs
        // (see the CLI --overhead-us / --throughput-gflops flags).
        Self {
            launch_overhead_us: 200.0,
            throughput_gflops: 100.0,
            injected_delay: false,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<(), ProfilerError> {
        if !(self.launch_overhead_us > 0.0) || !(self.throughput_gflops > 0.0) {
            return Err(ProfilerError::InvalidParams(format!(
                "launch_overhead_us ({}) and throughput_gflops ({}) must be positive",
                self.launch_overhead_us, self.throughput_gflops
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ProfilerError {
    #[error("invalid cost params: {0}")]
    InvalidParams(String),
}

/// Per-session dispatch log.
#[derive(Debug, Clone)]
pub struct DispatchLog {
    events: Vec<DispatchEvent>,
    params: CostParams,
    decode_steps: u64,
}

impl DispatchLog {
    pub fn new(params: CostParams) -> Self {
        Self {
            events: Vec::new(),
            params,
            decode_steps: 0,
        }
    }

    pub fn record(&mut self, kind: DispatchKind, flops: u64, token_step: i64, site_id: i64) {
        if self.params.injected_delay {
            spin_for_us(self.params.launch_overhead_us);
        }
        self.events.push(DispatchEvent {
            kind,
            flops,
            token_step,
            site_id,
        });
    }

    pub fn events(&self) -> &[DispatchEvent] {
        &self.events
    }

    pub fn params(&self) -> &CostParams {
        &self.params
    }

    pub fn decode_steps(&self) -> u64 {
        self.decode_steps
    }

    pub(crate) fn finish_decode_step(&mut self) {
        self.decode_steps += 1;
    }

    /// Decode-phase totals per kind (prefill events excluded).
    pub fn decode_counts(&self) -> BTreeMap<DispatchKind, u64> {
        let mut out = BTreeMap::new();
        for e in self.events.iter().filter(|e| e.token_step >= 0) {
            *out.entry(e.kind).or_insert(0) += 1;
        }
        out
    }

    pub fn decode_flops(&self) -> BTreeMap<DispatchKind, u64> {
        let mut out = BTreeMap::new();
        for e in self.events.iter().filter(|e| e.token_step >= 0) {
            *out.entry(e.kind).or_insert(0) += e.flops;
        }
        out
    }

    /// Raw log as CSV rows aggregated per (token_step, kind):
    /// `token_step,kind,count,flops,modeled_us`.
    pub fn export_csv(&self) -> String {
        let mut agg: BTreeMap<(i64, DispatchKind), (u64, u64)> = BTreeMap::new();
        for e in &self.events {
            let slot = agg.entry((e.token_step, e.kind)).or_insert((0, 0));
            slot.0 += 1;
            slot.1 += e.flops;
        }
        let mut out = String::from("token_step,kind,count,flops,modeled_us\n");
        for ((step, kind), (count, flops)) in agg {
            let us = count as f64 * self.params.launch_overhead_us
                + flops as f64 / (self.params.throughput_gflops * 1e3);
            out.push_str(&format!("{step},{kind},{count},{flops},{us:.6}\n"));
        }
        out
    }

    /// JSON mirror of [`export_csv`] with the cost params at top level.
    pub fn export_json(&self) -> serde_json::Value {
        let mut agg: BTreeMap<(i64, DispatchKind), (u64, u64)> = BTreeMap::new();
        for e in &self.events {
            let slot = agg.entry((e.token_step, e.kind)).or_insert((0, 0));
            slot.0 += 1;
            slot.1 += e.flops;
        }
        let rows: Vec<serde_json::Value> = agg
            .into_iter()
            .map(|((step, kind), (count, flops))| {
                let us = count as f64 * self.params.launch_overhead_us
                    + flops as f64 / (self.params.throughput_gflops * 1e3);
                serde_json::json!({
                    "token_step": step,
                    "kind": kind.to_string(),
                    "count": count,
                    "flops": flops,
                    "modeled_us": us,
                })
            })
            .collect();
        serde_json::json!({
            "params": {
                "launch_overhead_us": self.params.launch_overhead_us,
                "throughput_gflops": self.params.throughput_gflops,
                "injected_delay": self.params.injected_delay,
            },
            "rows": rows,
        })
    }
}

fn spin_for_us(us: f64) {
    let target = Duration::from_nanos((us * 1e3) as u64);
    let start = Instant::now();
    while start.elapsed() < target {
        std::hint::spin_loop();
    }
}

/// Closed-form per-token dispatch counts for a mode, with
/// `S` = adapted sites and `B` = total sites:
///
/// - naive per-site:  backbone `B`, adapter `2kS`, router `S`
/// - naive per-block: backbone `B`, adapter `2kS`, router `n_blocks`
/// - pre-gated naive: backbone `B`, adapter `2kS`, router `1`
/// - simple merge:    backbone `B`, merge `2S`,    router `1`
/// - fused switch:    backbone `B`, sgmm `1`,      router `1`
///
/// A hypothetical `k = 0` degenerates every mode to backbone-only counts.
pub fn count_per_token(config: &ModelConfig, mode: ExecMode) -> BTreeMap<DispatchKind, u64> {
    let b = config.total_sites() as u64;
    let s = config.adapted_sites() as u64;
    let k = config.top_k as u64;
    let mut out = BTreeMap::new();
    out.insert(DispatchKind::BackboneGemm, b);
    if k == 0 {
        return out;
    }
    match mode {
        ExecMode::NaivePerSite => {
            out.insert(DispatchKind::AdapterGemm, 2 * k * s);
            out.insert(DispatchKind::RouterGemm, s);
        }
        ExecMode::NaivePerBlock => {
            out.insert(DispatchKind::AdapterGemm, 2 * k * s);
            out.insert(DispatchKind::RouterGemm, config.n_blocks as u64);
        }
        ExecMode::PreGatedNaive => {
            out.insert(DispatchKind::AdapterGemm, 2 * k * s);
            out.insert(DispatchKind::RouterGemm, 1);
        }
        ExecMode::SimpleMerge => {
            out.insert(DispatchKind::MergeGemm, 2 * s);
            out.insert(DispatchKind::RouterGemm, 1);
        }
        ExecMode::FusedSwitch => {
            out.insert(DispatchKind::SgmmDispatch, 1);
            out.insert(DispatchKind::RouterGemm, 1);
        }
    }
    out
}

/// Closed-form per-token FLOPs by kind, matching [`count_per_token`]. The
/// fused-switch entry uses the steady-state segment rank `2kr` (unmerge of
/// the previous decision plus merge of the current one); the first token of
/// a session and elided no-op switches run below this figure.
pub fn flops_per_token(config: &ModelConfig, mode: ExecMode) -> BTreeMap<DispatchKind, u64> {
    let d_model = config.d_model;
    let d_hidden = config.d_hidden;
    let r = config.rank as u64;
    let k = config.top_k as u64;

    let mut backbone = 0u64;
    let mut adapter = 0u64;
    let mut merge_one_pass = 0u64;
    let mut sgmm = 0u64;
    for name in SiteName::ALL {
        let (o, i) = name.dims(d_model, d_hidden);
        let (o, i) = (o as u64, i as u64);
        backbone += 2 * o * i;
        if name.adapted_under(config.placement) {
            adapter += k * (2 * r * i + 2 * o * r);
            merge_one_pass += 2 * o * (k * r) * i;
            sgmm += 2 * o * (2 * k * r) * i;
        }
    }
    backbone *= config.n_blocks as u64;
    adapter *= config.n_blocks as u64;
    merge_one_pass *= config.n_blocks as u64;
    sgmm *= config.n_blocks as u64;

    let router_flops = |d_in: u64| 2 * config.n_experts as u64 * d_in;

    let mut out = BTreeMap::new();
    out.insert(DispatchKind::BackboneGemm, backbone);
    if k == 0 {
        return out;
    }
    match mode {
        ExecMode::NaivePerSite => {
            out.insert(DispatchKind::AdapterGemm, adapter);
            let mut rf = 0;
            for name in SiteName::ALL {
                if name.adapted_under(config.placement) {
                    rf += router_flops(name.dims(d_model, d_hidden).1 as u64);
                }
            }
            out.insert(DispatchKind::RouterGemm, rf * config.n_blocks as u64);
        }
        ExecMode::NaivePerBlock => {
            out.insert(DispatchKind::AdapterGemm, adapter);
            out.insert(
                DispatchKind::RouterGemm,
                router_flops(d_model as u64) * config.n_blocks as u64,
            );
        }
        ExecMode::PreGatedNaive => {
            out.insert(DispatchKind::AdapterGemm, adapter);
            out.insert(DispatchKind::RouterGemm, router_flops(d_model as u64));
        }
        ExecMode::SimpleMerge => {
            out.insert(DispatchKind::MergeGemm, 2 * merge_one_pass);
            out.insert(DispatchKind::RouterGemm, router_flops(d_model as u64));
        }
        ExecMode::FusedSwitch => {
            out.insert(DispatchKind::SgmmDispatch, sgmm);
            out.insert(DispatchKind::RouterGemm, router_flops(d_model as u64));
        }
    }
    out
}

/// Modeled latency in microseconds:
/// `sum_kind count * launch_overhead_us + total_flops / throughput`.
pub fn estimate_latency(
    counts: &BTreeMap<DispatchKind, u64>,
    flops_by_kind: &BTreeMap<DispatchKind, u64>,
    params: &CostParams,
) -> f64 {
    let dispatches: u64 = counts.values().sum();
    let flops: u64 = flops_by_kind.values().sum();
    dispatches as f64 * params.launch_overhead_us + flops as f64 / (params.throughput_gflops * 1e3)
}

/// First divergence between a recorded decode log and the closed-form counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMismatch {
    pub token_step: i64,
    pub kind: DispatchKind,
    pub expected: u64,
    pub observed: u64,
}

impl fmt::Display for CountMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "token {}: {} expected {} observed {}",
            self.token_step, self.kind, self.expected, self.observed
        )
    }
}

/// Verifies that every decoded token's recorded dispatch counts equal
/// [`count_per_token`] exactly. Prefill events (negative steps) are ignored.
pub fn verify_counts(
    log: &DispatchLog,
    config: &ModelConfig,
    mode: ExecMode,
) -> Result<(), CountMismatch> {
    let expected = count_per_token(config, mode);
    let mut per_step: BTreeMap<i64, BTreeMap<DispatchKind, u64>> = BTreeMap::new();
    for e in log.events().iter().filter(|e| e.token_step >= 0) {
        *per_step
            .entry(e.token_step)
            .or_default()
            .entry(e.kind)
            .or_insert(0) += 1;
    }
    for step in 0..log.decode_steps() as i64 {
        let observed = per_step.remove(&step).unwrap_or_default();
        for kind in DispatchKind::ALL {
            let want = expected.get(&kind).copied().unwrap_or(0);
            let got = observed.get(&kind).copied().unwrap_or(0);
            if want != got {
                return Err(CountMismatch {
                    token_step: step,
                    kind,
                    expected: want,
                    observed: got,
                });
            }
        }
    }
    // Any leftover steps beyond the session's decode counter are stray.
    if let Some((&step, counts)) = per_step.iter().next() {
        let kind = *counts.keys().next().expect("non-empty step entry");
        return Err(CountMismatch {
            token_step: step,
            kind,
            expected: 0,
            observed: counts[&kind],
        });
    }
    Ok(())
}

/// One row of a latency breakdown table.
#[derive(Debug, Clone, Serialize)]
pub struct BreakdownRow {
    pub kind: String,
    pub count: u64,
    pub flops: u64,
    pub modeled_us: f64,
    pub share_pct: f64,
}

/// Per-kind latency breakdown of a recorded log (decode phase), under the
/// given cost params. An empty log yields an empty table.
pub fn breakdown_report(log: &DispatchLog, params: &CostParams) -> Vec<BreakdownRow> {
    let counts = log.decode_counts();
    let flops = log.decode_flops();
    let total: f64 = counts
        .iter()
        .map(|(kind, &c)| {
            c as f64 * params.launch_overhead_us
                + flops.get(kind).copied().unwrap_or(0) as f64 / (params.throughput_gflops * 1e3)
        })
        .sum();
    counts
        .iter()
        .map(|(kind, &c)| {
            let fl = flops.get(kind).copied().unwrap_or(0);
            let us =
                c as f64 * params.launch_overhead_us + fl as f64 / (params.throughput_gflops * 1e3);
            BreakdownRow {
                kind: kind.to_string(),
                count: c,
                flops: fl,
                modeled_us: us,
                share_pct: if total > 0.0 { 100.0 * us / total } else { 0.0 },
            }
        })
        .collect()
}
