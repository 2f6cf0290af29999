//! Hardware configuration of the chiplet system and its primitive cost
//! functions (compute time, transfer time, energy).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HBM2_BANDWIDTH: f64 = 256e9;
pub const SSD_BANDWIDTH: f64 = 15.8e9;
const MB: u64 = 1 << 20;

#[derive(Debug, Error, PartialEq)]
pub enum HwError {
    #[error("unknown channel `{0}` (expected dram_group, dram_attention, nop_edge, hybrid_bond or sram)")]
    UnknownChannel(String),
    #[error(
        "unknown hardware preset `{0}` (expected qwen3-30b-a3b, olmoe-1b-7b or deepseek-moe-16b)"
    )]
    UnknownPreset(String),
    #[error("{n_moe_chiplets} MoE chiplets cannot be split into {n_groups} equal groups")]
    GroupsNotDivisible {
        n_moe_chiplets: usize,
        n_groups: usize,
    },
    #[error("hardware field `{0}` must be strictly positive")]
    NonPositive(&'static str),
    #[error("utilization must be in (0, 1], got {0}")]
    Utilization(f64),
    #[error("power fractions sum to {0}, expected 1")]
    PowerFractions(f64),
    #[error("idle fraction must be in [0, 1], got {0}")]
    IdleFraction(f64),
    #[error("component `{0}` has negative or non-finite active time")]
    NegativeTime(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DramKind {
    Hbm2,
    Ssd,
}

impl DramKind {
    /// Per-channel bandwidth of the memory technology.
    pub fn default_bandwidth(self) -> f64 {
        match self {
            DramKind::Hbm2 => HBM2_BANDWIDTH,
            DramKind::Ssd => SSD_BANDWIDTH,
        }
    }
}

impl fmt::Display for DramKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DramKind::Hbm2 => "hbm2",
            DramKind::Ssd => "ssd",
        })
    }
}

impl FromStr for DramKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hbm2" => Ok(DramKind::Hbm2),
            "ssd" => Ok(DramKind::Ssd),
            other => Err(format!("unknown dram kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DramSpec {
    pub kind: DramKind,
    /// Bandwidth of one stack/channel.
    pub bandwidth_bytes_per_s: f64,
    pub capacity_bytes: u64,
    /// Stacks behind each group's shared I/O.
    pub channels_per_group: usize,
    /// Stacks dedicated to the attention chiplet, modelled as one wider channel.
    pub attention_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SramSpec {
    pub capacity_bytes_per_tile: u64,
    pub bandwidth_bytes_per_s_per_tile: f64,
}

/// 2.5D direct-signaling links of one NoP edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub bandwidth_bytes_per_s: f64,
    pub links_per_edge: usize,
    pub pitch_um: f64,
}

/// 3D hybrid-bonding interface between a logic die and its SRAM die.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridBondSpec {
    pub bandwidth_bytes_per_s: f64,
    pub horizontal_links: usize,
    pub vertical_links: usize,
    pub pitch_um: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerSpec {
    pub total_kw: f64,
    pub attention_fraction: f64,
    /// Shared evenly by all MoE chiplets.
    pub moe_fraction: f64,
    /// Shared evenly by all switches.
    pub switch_fraction: f64,
    /// Shared evenly by all DRAM stacks.
    pub dram_fraction: f64,
    /// Power drawn while idle, relative to active power.
    pub idle_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSpec {
    pub name: String,
    pub n_moe_chiplets: usize,
    pub n_groups: usize,
    pub attention_chiplets: usize,
    pub tiles_per_chiplet: usize,
    pub sas_per_tile: usize,
    pub pes_per_sa: usize,
    pub clock_hz: f64,
    /// Achieved fraction of peak MAC throughput.
    pub utilization: f64,
    pub dram: DramSpec,
    pub sram: SramSpec,
    pub link_2p5d: LinkSpec,
    pub link_3d: HybridBondSpec,
    pub power: PowerSpec,
    /// Documentation only.
    #[serde(default)]
    pub area_mm2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChipletClass {
    Attention,
    Moe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    DramGroup,
    DramAttention,
    NopEdge,
    HybridBond,
    Sram,
}

impl FromStr for Channel {
    type Err = HwError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dram_group" => Ok(Channel::DramGroup),
            "dram_attention" => Ok(Channel::DramAttention),
            "nop_edge" => Ok(Channel::NopEdge),
            "hybrid_bond" => Ok(Channel::HybridBond),
            "sram" => Ok(Channel::Sram),
            other => Err(HwError::UnknownChannel(other.to_string())),
        }
    }
}

/// Components that draw power.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerComponent {
    Attention,
    MoeChiplet,
    Switch,
    Dram,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostQuote {
    pub latency_s: f64,
    pub energy_j: f64,
    pub bytes_moved: u64,
    pub flops: f64,
}

/// Busy time per power component, summed over that component's instances,
/// within a run of length `makespan_s`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Activity {
    pub makespan_s: f64,
    pub busy_s: BTreeMap<PowerComponent, f64>,
}

impl HardwareSpec {
    pub fn preset(name: &str) -> Result<HardwareSpec, HwError> {
        // Table-level figures shared by all three configurations; only area,
        // power and compute geometry differ.
        let (tiles, pes, total_kw, area) = match name {
            "qwen3-30b-a3b" => (100, 576, 3.34, 14175.0),
            "olmoe-1b-7b" => (36, 256, 3.55, 10200.0),
            "deepseek-moe-16b" => (64, 400, 3.19, 11230.0),
            other => return Err(HwError::UnknownPreset(other.to_string())),
        };
        Ok(HardwareSpec {
            name: name.to_string(),
            n_moe_chiplets: 16,
            n_groups: 4,
            attention_chiplets: 1,
            tiles_per_chiplet: tiles,
            sas_per_tile: 16,
            pes_per_sa: pes,
            clock_hz: 1e9,
            utilization: 0.7,
            dram: DramSpec {
                kind: DramKind::Hbm2,
                bandwidth_bytes_per_s: HBM2_BANDWIDTH,
                capacity_bytes: 8192 * MB,
                channels_per_group: 1,
                attention_channels: 2,
            },
            sram: SramSpec {
                capacity_bytes_per_tile: (2.265 * MB as f64) as u64,
                bandwidth_bytes_per_s_per_tile: 32e9,
            },
            link_2p5d: LinkSpec {
                bandwidth_bytes_per_s: 0.125e9,
                links_per_edge: 32,
                pitch_um: 50.0,
            },
            link_3d: HybridBondSpec {
                bandwidth_bytes_per_s: 0.125e9,
                horizontal_links: 64,
                vertical_links: 64,
                pitch_um: 50.0,
            },
            power: PowerSpec {
                total_kw,
                attention_fraction: 0.15,
                moe_fraction: 0.60,
                switch_fraction: 0.05,
                dram_fraction: 0.20,
                idle_fraction: 0.1,
            },
            area_mm2: area,
        })
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["qwen3-30b-a3b", "olmoe-1b-7b", "deepseek-moe-16b"]
    }

    /// Switches the memory technology, resetting the bandwidth to its default.
    pub fn with_dram(mut self, kind: DramKind) -> Self {
        self.dram.kind = kind;
        self.dram.bandwidth_bytes_per_s = kind.default_bandwidth();
        self
    }

    pub fn validate(&self) -> Result<(), HwError> {
        let counts = [
            ("n_moe_chiplets", self.n_moe_chiplets),
            ("n_groups", self.n_groups),
            ("attention_chiplets", self.attention_chiplets),
            ("tiles_per_chiplet", self.tiles_per_chiplet),
            ("sas_per_tile", self.sas_per_tile),
            ("pes_per_sa", self.pes_per_sa),
            ("dram.channels_per_group", self.dram.channels_per_group),
            ("dram.attention_channels", self.dram.attention_channels),
            ("link_2p5d.links_per_edge", self.link_2p5d.links_per_edge),
            ("link_3d.horizontal_links", self.link_3d.horizontal_links),
            ("link_3d.vertical_links", self.link_3d.vertical_links),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(HwError::NonPositive(name));
            }
        }
        let reals = [
            ("clock_hz", self.clock_hz),
            (
                "dram.bandwidth_bytes_per_s",
                self.dram.bandwidth_bytes_per_s,
            ),
            (
                "sram.bandwidth_bytes_per_s_per_tile",
                self.sram.bandwidth_bytes_per_s_per_tile,
            ),
            (
                "link_2p5d.bandwidth_bytes_per_s",
                self.link_2p5d.bandwidth_bytes_per_s,
            ),
            (
                "link_3d.bandwidth_bytes_per_s",
                self.link_3d.bandwidth_bytes_per_s,
            ),
            ("power.total_kw", self.power.total_kw),
        ];
        for (name, v) in reals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(HwError::NonPositive(name));
            }
        }
        if self.dram.capacity_bytes == 0 {
            return Err(HwError::NonPositive("dram.capacity_bytes"));
        }
        if self.sram.capacity_bytes_per_tile == 0 {
            return Err(HwError::NonPositive("sram.capacity_bytes_per_tile"));
        }
        if !self.n_moe_chiplets.is_multiple_of(self.n_groups) {
            return Err(HwError::GroupsNotDivisible {
                n_moe_chiplets: self.n_moe_chiplets,
                n_groups: self.n_groups,
            });
        }
        if !(self.utilization > 0.0 && self.utilization <= 1.0) {
            return Err(HwError::Utilization(self.utilization));
        }
        self.check_power()
    }

    fn check_power(&self) -> Result<(), HwError> {
        let p = &self.power;
        let fractions = [
            p.attention_fraction,
            p.moe_fraction,
            p.switch_fraction,
            p.dram_fraction,
        ];
        let sum: f64 = fractions.iter().sum();
        if fractions.iter().any(|f| *f < 0.0) || (sum - 1.0).abs() > 1e-6 || !sum.is_finite() {
            return Err(HwError::PowerFractions(sum));
        }
        if !(0.0..=1.0).contains(&p.idle_fraction) {
            return Err(HwError::IdleFraction(p.idle_fraction));
        }
        Ok(())
    }

    pub fn chiplets_per_group(&self) -> usize {
        self.n_moe_chiplets / self.n_groups
    }

    pub fn group_of_chiplet(&self, chiplet: usize) -> usize {
        chiplet / self.chiplets_per_group()
    }

    /// Sustained FLOP/s of one chiplet of the given class: two FLOPs per PE
    /// per cycle, derated by `utilization`.
    pub fn peak_flops(&self, class: ChipletClass) -> f64 {
        let per_chiplet = (self.tiles_per_chiplet * self.sas_per_tile * self.pes_per_sa) as f64
            * 2.0
            * self.clock_hz
            * self.utilization;
        match class {
            ChipletClass::Attention => per_chiplet * self.attention_chiplets as f64,
            ChipletClass::Moe => per_chiplet,
        }
    }

    pub fn sram_capacity_per_chiplet(&self) -> u64 {
        self.sram.capacity_bytes_per_tile * self.tiles_per_chiplet as u64
    }

    pub fn bandwidth(&self, channel: Channel) -> f64 {
        match channel {
            Channel::DramGroup => {
                self.dram.bandwidth_bytes_per_s * self.dram.channels_per_group as f64
            }
            Channel::DramAttention => {
                self.dram.bandwidth_bytes_per_s * self.dram.attention_channels as f64
            }
            Channel::NopEdge => {
                self.link_2p5d.bandwidth_bytes_per_s * self.link_2p5d.links_per_edge as f64
            }
            Channel::HybridBond => {
                self.link_3d.bandwidth_bytes_per_s
                    * (self.link_3d.horizontal_links * self.link_3d.vertical_links) as f64
            }
            Channel::Sram => {
                self.sram.bandwidth_bytes_per_s_per_tile * self.tiles_per_chiplet as f64
            }
        }
    }

    fn dram_stacks(&self) -> usize {
        self.n_groups * self.dram.channels_per_group + self.dram.attention_channels
    }

    /// Active power in watts of one instance of a component.
    pub fn instance_power_w(&self, component: PowerComponent) -> f64 {
        let total = self.power.total_kw * 1e3;
        match component {
            PowerComponent::Attention => total * self.power.attention_fraction,
            PowerComponent::MoeChiplet => {
                total * self.power.moe_fraction / self.n_moe_chiplets as f64
            }
            PowerComponent::Switch => total * self.power.switch_fraction / self.n_groups as f64,
            PowerComponent::Dram => total * self.power.dram_fraction / self.dram_stacks() as f64,
        }
    }

    pub fn instances(&self, component: PowerComponent) -> usize {
        match component {
            PowerComponent::Attention => 1,
            PowerComponent::MoeChiplet => self.n_moe_chiplets,
            PowerComponent::Switch => self.n_groups,
            PowerComponent::Dram => self.dram_stacks(),
        }
    }

    fn channel_power_w(&self, channel: Channel) -> f64 {
        let stack = self.instance_power_w(PowerComponent::Dram);
        match channel {
            Channel::DramGroup => stack * self.dram.channels_per_group as f64,
            Channel::DramAttention => stack * self.dram.attention_channels as f64,
            Channel::NopEdge => self.instance_power_w(PowerComponent::Switch),
            // Charged to the owning chiplet.
            Channel::HybridBond | Channel::Sram => 0.0,
        }
    }
}

/// Time for one chiplet of `class` to execute `flops`.
pub fn compute_latency(flops: f64, class: ChipletClass, hw: &HardwareSpec) -> CostQuote {
    if flops <= 0.0 {
        return CostQuote::default();
    }
    let latency_s = flops / hw.peak_flops(class);
    let power = match class {
        ChipletClass::Attention => hw.instance_power_w(PowerComponent::Attention),
        ChipletClass::Moe => hw.instance_power_w(PowerComponent::MoeChiplet),
    };
    CostQuote {
        latency_s,
        energy_j: latency_s * power,
        bytes_moved: 0,
        flops,
    }
}

/// Time to move `bytes` over one channel at its effective bandwidth.
pub fn transfer_latency(bytes: u64, channel: Channel, hw: &HardwareSpec) -> CostQuote {
    if bytes == 0 {
        return CostQuote::default();
    }
    let latency_s = bytes as f64 / hw.bandwidth(channel);
    CostQuote {
        latency_s,
        energy_j: latency_s * hw.channel_power_w(channel),
        bytes_moved: bytes,
        flops: 0.0,
    }
}

/// Like [`transfer_latency`] but with the channel named as in configs.
pub fn transfer_latency_named(
    bytes: u64,
    channel: &str,
    hw: &HardwareSpec,
) -> Result<CostQuote, HwError> {
    Ok(transfer_latency(bytes, channel.parse()?, hw))
}

/// Energy of a run: active time at active power, remaining time of every
/// instance at `idle_fraction` of it.
pub fn energy_of(activity: &Activity, hw: &HardwareSpec) -> Result<f64, HwError> {
    hw.check_power()?;
    let mut energy = 0.0;
    for (&component, &busy) in &activity.busy_s {
        if !(busy >= 0.0 && busy.is_finite()) {
            return Err(HwError::NegativeTime(format!("{component:?}")));
        }
        energy += busy * hw.instance_power_w(component);
    }
    if hw.power.idle_fraction > 0.0 && activity.makespan_s > 0.0 {
        for component in [
            PowerComponent::Attention,
            PowerComponent::MoeChiplet,
            PowerComponent::Switch,
            PowerComponent::Dram,
        ] {
            let capacity = activity.makespan_s * hw.instances(component) as f64;
            let busy = activity.busy_s.get(&component).copied().unwrap_or(0.0);
            let idle = (capacity - busy).max(0.0);
            energy += idle * hw.instance_power_w(component) * hw.power.idle_fraction;
        }
    }
    Ok(energy)
}
