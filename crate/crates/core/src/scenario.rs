//! TOML scenario files: calibration overrides, VMs, tasks, transfer streams
//! and timed reconfigurations for a mixed simulation run.
//!
//! Durations are integers in the unit their key names (`_ns`, `_us`, `_ms`).

use std::ops::Range;

use serde::Deserialize;
use thiserror::Error;
use toml::Spanned;

use crate::fabric::ResourceVector;
use crate::io::Direction;
use crate::metrics::export_string;
use crate::sched::{profile, RawTask, RtClass, TaskId};
use crate::sim::{SimTime, TRACE_HEADER};
use crate::snn::TaskShape;
use crate::system::{SwapStep, System, SystemConfig, SystemError};
use crate::virt::{ModuleKind, Priority, ReconfigMode};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{}invalid `{field}`: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Validation {
        field: String,
        line: Option<usize>,
        message: String,
    },
}

impl ScenarioError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ScenarioError::Parse { line, .. } => Some(*line),
            ScenarioError::Validation { line, .. } => *line,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Raw {
    schema_version: Option<Spanned<u32>>,
    seed: Option<u64>,
    duration_ms: Option<u64>,
    sample_period_us: Option<u64>,
    fabric: Option<Spanned<RawFabric>>,
    link: Option<Spanned<RawLink>>,
    energy: Option<Spanned<RawEnergy>>,
    reconfig: Option<Spanned<RawReconfig>>,
    sched: Option<Spanned<RawSched>>,
    #[serde(default)]
    modules: Vec<Spanned<RawModule>>,
    #[serde(default)]
    vms: Vec<Spanned<RawVm>>,
    #[serde(default)]
    tasks: Vec<Spanned<RawTaskDecl>>,
    #[serde(default)]
    transfers: Vec<Spanned<RawTransfer>>,
    #[serde(default)]
    reconfigs: Vec<Spanned<RawReconfigReq>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFabric {
    lut: Option<u64>,
    memory_bytes: Option<u64>,
    io_pins: Option<u64>,
    dsp: Option<u64>,
    neurocore_count: Option<u32>,
    neurons_per_core: Option<u32>,
    /// Fraction of the totals one neurocore occupies.
    core_fraction: Option<f64>,
    bitstream_total_bytes: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    latency_ns: Option<u64>,
    ring_capacity: Option<u32>,
    peak: Option<Vec<RawPeak>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPeak {
    vms: u32,
    gibs: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnergy {
    base_mj: Option<f64>,
    slope_mj: Option<f64>,
    dyn_nj_per_synop: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReconfig {
    port_bytes_per_s: Option<u64>,
    partial_setup_ns: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSched {
    tick_ns: Option<u64>,
    migration_penalty_ns: Option<u64>,
    core_rate: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModule {
    name: String,
    kind: String,
    fraction: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVm {
    name: String,
    fraction: f64,
    #[serde(default)]
    priority: Option<String>,
    #[serde(default)]
    preload: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTaskDecl {
    steps: u64,
    input_rate: u64,
    fan_in: u64,
    #[serde(default)]
    data_bytes: u64,
    #[serde(default)]
    arrival_us: u64,
    /// Relative to arrival. Present means real-time.
    deadline_us: Option<u64>,
    #[serde(default = "one")]
    count: u32,
    #[serde(default)]
    spacing_us: u64,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTransfer {
    vm: String,
    size_bytes: u64,
    #[serde(default = "one")]
    count: u32,
    #[serde(default)]
    direction: Option<String>,
    #[serde(default)]
    start_us: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReconfigReq {
    vm: String,
    module: String,
    mode: String,
    #[serde(default)]
    at_us: u64,
    unload: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleDecl {
    pub name: String,
    pub kind: ModuleKind,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmDecl {
    pub name: String,
    pub fraction: f64,
    pub priority: Priority,
    /// Indices into `Scenario::modules`.
    pub preload: Vec<usize>,
    line: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDecl {
    pub task: RawTask,
    pub count: u32,
    pub spacing: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferDecl {
    pub vm: usize,
    pub size: u64,
    pub count: u32,
    pub direction: Direction,
    pub start: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconfigDecl {
    pub vm: usize,
    pub module: usize,
    pub unload: Option<usize>,
    pub mode: ReconfigMode,
    pub at: SimTime,
    line: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub duration: SimTime,
    pub sample_period: SimTime,
    pub config: SystemConfig,
    pub modules: Vec<ModuleDecl>,
    pub vms: Vec<VmDecl>,
    pub tasks: Vec<TaskDecl>,
    pub transfers: Vec<TransferDecl>,
    pub reconfigs: Vec<ReconfigDecl>,
}

/// Output of a scenario run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub metrics_csv: String,
    pub trace: String,
}

pub fn default_modules() -> Vec<ModuleDecl> {
    vec![
        ModuleDecl {
            name: "lif".into(),
            kind: ModuleKind::LifCore,
            fraction: 1.0 / 32.0,
        },
        ModuleDecl {
            name: "router".into(),
            kind: ModuleKind::Router,
            fraction: 1.0 / 64.0,
        },
        ModuleDecl {
            name: "pooling".into(),
            kind: ModuleKind::Pooling,
            fraction: 1.0 / 64.0,
        },
    ]
}

struct Ctx<'a> {
    text: &'a str,
}

impl Ctx<'_> {
    fn line_of(&self, span: Range<usize>) -> usize {
        let end = span.start.min(self.text.len());
        self.text[..end].matches('\n').count() + 1
    }

    fn invalid(&self, field: impl Into<String>, span: Option<Range<usize>>, msg: impl Into<String>) -> ScenarioError {
        ScenarioError::Validation {
            field: field.into(),
            line: span.map(|s| self.line_of(s)),
            message: msg.into(),
        }
    }
}

fn parse_kind(s: &str) -> Option<ModuleKind> {
    match s {
        "lif_core" | "lif" => Some(ModuleKind::LifCore),
        "router" => Some(ModuleKind::Router),
        "pooling" => Some(ModuleKind::Pooling),
        _ => None,
    }
}

fn fraction_ok(f: f64) -> bool {
    f > 0.0 && f <= 1.0
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let ctx = Ctx { text };
        let raw: Raw = toml::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.span().map(|s| ctx.line_of(s)).unwrap_or(1),
            message: e.message().to_string(),
        })?;

        match &raw.schema_version {
            None => return Err(ctx.invalid("schema_version", None, "missing")),
            Some(v) if *v.get_ref() != SCHEMA_VERSION => {
                return Err(ctx.invalid(
                    "schema_version",
                    Some(v.span()),
                    format!("unsupported version {}, expected {SCHEMA_VERSION}", v.get_ref()),
                ))
            }
            Some(_) => {}
        }
        let seed = raw
            .seed
            .ok_or_else(|| ctx.invalid("seed", None, "missing; every scenario must pin its seed"))?;
        let duration = SimTime::from_millis(raw.duration_ms.unwrap_or(100));
        if duration.0 == 0 {
            return Err(ctx.invalid("duration_ms", None, "must be positive"));
        }
        let sample_period = SimTime::from_micros(raw.sample_period_us.unwrap_or(1_000));
        if sample_period.0 == 0 {
            return Err(ctx.invalid("sample_period_us", None, "must be positive"));
        }

        let mut config = SystemConfig::default();
        if let Some(f) = &raw.fabric {
            let span = Some(f.span());
            let f = f.get_ref();
            let t = &mut config.fabric.total;
            t.lut = f.lut.unwrap_or(t.lut);
            t.memory_bytes = f.memory_bytes.unwrap_or(t.memory_bytes);
            t.io_pins = f.io_pins.unwrap_or(t.io_pins);
            t.dsp = f.dsp.unwrap_or(t.dsp);
            let c = &mut config.fabric;
            c.neurocore_count = f.neurocore_count.unwrap_or(c.neurocore_count);
            c.neurons_per_core = f.neurons_per_core.unwrap_or(c.neurons_per_core);
            c.bitstream_total_bytes = f.bitstream_total_bytes.unwrap_or(c.bitstream_total_bytes);
            let core_fraction = f.core_fraction.unwrap_or(1.0 / 32.0);
            if !fraction_ok(core_fraction) {
                return Err(ctx.invalid("fabric.core_fraction", span, "must be in (0, 1]"));
            }
            c.core_footprint = c.total.fraction(core_fraction);
            c.validate()
                .map_err(|e| ctx.invalid("fabric", span, e.to_string()))?;
        }
        if let Some(l) = &raw.link {
            let span = Some(l.span());
            let l = l.get_ref();
            let m = &mut config.link;
            if let Some(ns) = l.latency_ns {
                m.latency = SimTime(ns);
            }
            m.ring_capacity = l.ring_capacity.unwrap_or(m.ring_capacity);
            if let Some(peaks) = &l.peak {
                m.peak_gibs = peaks.iter().map(|p| (p.vms, p.gibs)).collect();
                if m.peak_gibs.len() != peaks.len() {
                    return Err(ctx.invalid("link.peak", span, "duplicate VM count"));
                }
            }
            m.validate()
                .map_err(|e| ctx.invalid("link", span, e.to_string()))?;
        }
        if let Some(e) = &raw.energy {
            let span = Some(e.span());
            let e = e.get_ref();
            let m = &mut config.energy;
            m.base_mj = e.base_mj.unwrap_or(m.base_mj);
            m.slope_mj = e.slope_mj.unwrap_or(m.slope_mj);
            m.dyn_nj_per_synop = e.dyn_nj_per_synop.unwrap_or(m.dyn_nj_per_synop);
            m.validate().map_err(|msg| ctx.invalid("energy", span, msg))?;
        }
        if let Some(r) = &raw.reconfig {
            let span = Some(r.span());
            let r = r.get_ref();
            let p = &mut config.reconfig;
            p.config_port_bytes_per_s = r.port_bytes_per_s.unwrap_or(p.config_port_bytes_per_s);
            if let Some(ns) = r.partial_setup_ns {
                p.partial_setup = SimTime(ns);
            }
            if p.config_port_bytes_per_s == 0 {
                return Err(ctx.invalid("reconfig.port_bytes_per_s", span, "must be positive"));
            }
        }
        if let Some(s) = &raw.sched {
            let span = Some(s.span());
            let s = s.get_ref();
            let p = &mut config.sched;
            if let Some(ns) = s.tick_ns {
                p.tick = SimTime(ns);
            }
            if let Some(ns) = s.migration_penalty_ns {
                p.migration_penalty = SimTime(ns);
            }
            p.core_rate = s.core_rate.unwrap_or(p.core_rate);
            if p.tick.0 == 0 {
                return Err(ctx.invalid("sched.tick_ns", span, "must be positive"));
            }
            if !(p.core_rate > 0.0 && p.core_rate.is_finite()) {
                return Err(ctx.invalid("sched.core_rate", span, "must be positive"));
            }
        }

        let modules = if raw.modules.is_empty() {
            default_modules()
        } else {
            let mut out = Vec::new();
            for (i, m) in raw.modules.iter().enumerate() {
                let span = Some(m.span());
                let m = m.get_ref();
                let kind = parse_kind(&m.kind).ok_or_else(|| {
                    ctx.invalid(
                        format!("modules[{i}].kind"),
                        span.clone(),
                        format!("unknown kind `{}` (lif_core, router, pooling)", m.kind),
                    )
                })?;
                if !fraction_ok(m.fraction) {
                    return Err(ctx.invalid(format!("modules[{i}].fraction"), span, "must be in (0, 1]"));
                }
                if out.iter().any(|o: &ModuleDecl| o.name == m.name) {
                    return Err(ctx.invalid(format!("modules[{i}].name"), span, "duplicate name"));
                }
                out.push(ModuleDecl {
                    name: m.name.clone(),
                    kind,
                    fraction: m.fraction,
                });
            }
            out
        };
        let module_index = |name: &str| modules.iter().position(|m| m.name == name);

        let mut vms: Vec<VmDecl> = Vec::new();
        for (i, v) in raw.vms.iter().enumerate() {
            let span = Some(v.span());
            let v = v.get_ref();
            if !fraction_ok(v.fraction) {
                return Err(ctx.invalid(format!("vms[{i}].fraction"), span, "must be in (0, 1]"));
            }
            if vms.iter().any(|o| o.name == v.name) {
                return Err(ctx.invalid(format!("vms[{i}].name"), span, "duplicate name"));
            }
            let priority = match v.priority.as_deref() {
                None | Some("batch") => Priority::Batch,
                Some("realtime") => Priority::RealTime,
                Some(other) => {
                    return Err(ctx.invalid(
                        format!("vms[{i}].priority"),
                        span,
                        format!("unknown priority `{other}` (realtime, batch)"),
                    ))
                }
            };
            let mut preload = Vec::new();
            for name in &v.preload {
                preload.push(module_index(name).ok_or_else(|| {
                    ctx.invalid(format!("vms[{i}].preload"), span.clone(), format!("unknown module `{name}`"))
                })?);
            }
            vms.push(VmDecl {
                name: v.name.clone(),
                fraction: v.fraction,
                priority,
                preload,
                line: span.map(|s| ctx.line_of(s)),
            });
        }
        let vm_index = |name: &str| vms.iter().position(|v| v.name == name);

        let mut tasks = Vec::new();
        for (i, t) in raw.tasks.iter().enumerate() {
            let span = Some(t.span());
            let t = t.get_ref();
            for (field, v) in [("steps", t.steps), ("input_rate", t.input_rate), ("fan_in", t.fan_in)] {
                if v == 0 {
                    return Err(ctx.invalid(format!("tasks[{i}].{field}"), span, "must be positive"));
                }
            }
            let arrival = SimTime::from_micros(t.arrival_us);
            tasks.push(TaskDecl {
                task: RawTask {
                    shape: TaskShape {
                        steps: t.steps,
                        input_rate: t.input_rate,
                        fan_in: t.fan_in,
                    },
                    data_size: t.data_bytes,
                    rt_class: match t.deadline_us {
                        Some(d) => RtClass::RealTime {
                            deadline: arrival + SimTime::from_micros(d),
                        },
                        None => RtClass::Batch,
                    },
                    arrival,
                },
                count: t.count,
                spacing: SimTime::from_micros(t.spacing_us),
            });
        }

        let mut transfers = Vec::new();
        for (i, t) in raw.transfers.iter().enumerate() {
            let span = Some(t.span());
            let t = t.get_ref();
            let vm = vm_index(&t.vm).ok_or_else(|| {
                ctx.invalid(format!("transfers[{i}].vm"), span.clone(), format!("unknown vm `{}`", t.vm))
            })?;
            if t.size_bytes == 0 {
                return Err(ctx.invalid(format!("transfers[{i}].size_bytes"), span, "must be positive"));
            }
            let direction = match t.direction.as_deref() {
                None | Some("in") => Direction::In,
                Some("out") => Direction::Out,
                Some(other) => {
                    return Err(ctx.invalid(
                        format!("transfers[{i}].direction"),
                        span,
                        format!("unknown direction `{other}` (in, out)"),
                    ))
                }
            };
            transfers.push(TransferDecl {
                vm,
                size: t.size_bytes,
                count: t.count,
                direction,
                start: SimTime::from_micros(t.start_us),
            });
        }

        let mut reconfigs = Vec::new();
        for (i, r) in raw.reconfigs.iter().enumerate() {
            let span = Some(r.span());
            let r = r.get_ref();
            let vm = vm_index(&r.vm).ok_or_else(|| {
                ctx.invalid(format!("reconfigs[{i}].vm"), span.clone(), format!("unknown vm `{}`", r.vm))
            })?;
            let module = module_index(&r.module).ok_or_else(|| {
                ctx.invalid(format!("reconfigs[{i}].module"), span.clone(), format!("unknown module `{}`", r.module))
            })?;
            let unload = match &r.unload {
                None => None,
                Some(name) => Some(module_index(name).ok_or_else(|| {
                    ctx.invalid(format!("reconfigs[{i}].unload"), span.clone(), format!("unknown module `{name}`"))
                })?),
            };
            let mode = match r.mode.as_str() {
                "full" => ReconfigMode::Full,
                "partial" => ReconfigMode::Partial,
                other => {
                    return Err(ctx.invalid(
                        format!("reconfigs[{i}].mode"),
                        span,
                        format!("unknown mode `{other}` (full, partial)"),
                    ))
                }
            };
            reconfigs.push(ReconfigDecl {
                vm,
                module,
                unload,
                mode,
                at: SimTime::from_micros(r.at_us),
                line: span.map(|s| ctx.line_of(s)),
            });
        }
        // Stable sort keeps file order among simultaneous requests.
        reconfigs.sort_by_key(|r| r.at);

        Ok(Scenario {
            seed,
            duration,
            sample_period,
            config,
            modules,
            vms,
            tasks,
            transfers,
            reconfigs,
        })
    }

    /// Builds the system and runs it to `duration`, sampling metrics every
    /// `sample_period`.
    pub fn run(&self, trace: bool) -> Result<RunOutput, ScenarioError> {
        let sys_err = |field: String, line: Option<usize>, e: SystemError| ScenarioError::Validation {
            field,
            line,
            message: e.to_string(),
        };
        let mut sys = System::new(self.config.clone(), self.seed, trace)
            .map_err(|e| sys_err("config".into(), None, e))?;
        let mut module_ids = Vec::new();
        for (i, m) in self.modules.iter().enumerate() {
            module_ids.push(
                sys.register_module(&m.name, m.kind, m.fraction)
                    .map_err(|e| sys_err(format!("modules[{i}]"), None, e))?,
            );
        }
        let total = self.config.fabric.total;
        let mut vm_ids = Vec::new();
        for (i, v) in self.vms.iter().enumerate() {
            let request: ResourceVector = total.fraction(v.fraction);
            let id = sys
                .create_vm(request, v.priority)
                .map_err(|e| sys_err(format!("vms[{i}]"), v.line, e))?;
            for &m in &v.preload {
                sys.preload_module(id, module_ids[m])
                    .map_err(|e| sys_err(format!("vms[{i}].preload"), v.line, e))?;
            }
            vm_ids.push(id);
        }

        let mut next_id = 0u32;
        for d in &self.tasks {
            for k in 0..d.count {
                let mut raw = d.task;
                let offset = SimTime(d.spacing.0 * k as u64);
                raw.arrival += offset;
                if let RtClass::RealTime { deadline } = raw.rt_class {
                    raw.rt_class = RtClass::RealTime {
                        deadline: deadline + offset,
                    };
                }
                sys.submit_task(profile(TaskId(next_id), &raw, self.config.fabric.neurons_per_core));
                next_id += 1;
            }
        }
        for (i, t) in self.transfers.iter().enumerate() {
            sys.add_stream(vm_ids[t.vm], t.size, t.count, t.direction, t.start)
                .map_err(|e| sys_err(format!("transfers[{i}]"), None, e))?;
        }

        sys.start_sampling(self.sample_period);
        for (i, r) in self.reconfigs.iter().enumerate() {
            if r.at > self.duration {
                break;
            }
            sys.run_until(r.at);
            let vm = vm_ids[r.vm];
            // Requests queue behind any swap the VM already has in flight.
            sys.plan_swaps(
                vm,
                vec![SwapStep {
                    unload: r.unload.map(|m| module_ids[m]),
                    load: module_ids[r.module],
                    mode: r.mode,
                }],
            )
            .map_err(|e| sys_err(format!("reconfigs[{i}]"), r.line, e))?;
        }
        sys.run_until(self.duration);

        let mut trace_text = String::new();
        if trace {
            trace_text.push_str(TRACE_HEADER);
            trace_text.push('\n');
            for l in sys.take_trace() {
                trace_text.push_str(&l);
                trace_text.push('\n');
            }
        }
        Ok(RunOutput {
            metrics_csv: export_string(sys.samples()),
            trace: trace_text,
        })
    }
}

/// A small mixed scenario used as the `run` default and in docs.
pub const EXAMPLE_SCENARIO: &str = r#"schema_version = 1
seed = 42
duration_ms = 200
sample_period_us = 5000

[[vms]]
name = "a"
fraction = 0.125
preload = ["lif"]

[[vms]]
name = "b"
fraction = 0.125
priority = "realtime"
preload = ["lif"]

[[tasks]]
steps = 100
input_rate = 8
fan_in = 256
count = 8
spacing_us = 1000
data_bytes = 65536

[[tasks]]
steps = 50
input_rate = 16
fan_in = 128
deadline_us = 20000
arrival_us = 2000
count = 4
spacing_us = 5000

[[transfers]]
vm = "a"
size_bytes = 1048576
count = 16

[[reconfigs]]
vm = "b"
module = "router"
mode = "partial"
at_us = 30000

[[reconfigs]]
vm = "a"
module = "pooling"
mode = "full"
at_us = 60000
"#;
