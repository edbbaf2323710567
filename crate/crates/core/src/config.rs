//! Model configuration and the flat `key=value` config file format.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which refinement modules are active in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ModuleSet {
    pub la: bool,
    pub pr: bool,
    pub mr: bool,
}

impl ModuleSet {
    pub const NONE: ModuleSet = ModuleSet { la: false, pr: false, mr: false };
    pub const ALL: ModuleSet = ModuleSet { la: true, pr: true, mr: true };

    pub fn is_empty(&self) -> bool {
        !(self.la || self.pr || self.mr)
    }

    /// Row patterns of the module ablation, baseline first.
    pub fn ablation_rows() -> Vec<ModuleSet> {
        vec![
            ModuleSet::NONE,
            ModuleSet { la: true, pr: false, mr: false },
            ModuleSet { la: false, pr: true, mr: true },
            ModuleSet { la: true, pr: false, mr: true },
            ModuleSet { la: true, pr: true, mr: false },
            ModuleSet::ALL,
        ]
    }
}

impl fmt::Display for ModuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.la {
            parts.push("la");
        }
        if self.pr {
            parts.push("pr");
        }
        if self.mr {
            parts.push("mr");
        }
        if parts.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}", parts.join(","))
        }
    }
}

impl FromStr for ModuleSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = ModuleSet::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "la" => set.la = true,
                "pr" => set.pr = true,
                "mr" => set.mr = true,
                "none" => {}
                "all" => set = ModuleSet::ALL,
                other => return Err(Error::Config(format!("unknown module '{other}'"))),
            }
        }
        Ok(set)
    }
}

/// Architecture hyper-parameters shared by every module.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub resolution: usize,
    pub c4: usize,
    pub c8: usize,
    pub c16: usize,
    /// Decoder / object-embedding width.
    pub c_embed: usize,
    /// Memory embedding width.
    pub c_memory: usize,
    /// Full-resolution stem width.
    pub c_low: usize,
    pub heads: usize,
    pub pool_kernels: Vec<usize>,
    pub rfb_kernels: Vec<usize>,
    /// Output widths of the three refinement decoder blocks.
    pub refine_channels: [usize; 3],
    /// Fixed click radius in dense-map pixels; `None` uses `max(1, round(D / 50))`.
    pub click_radius: Option<usize>,
    pub modules: ModuleSet,
    pub bank_capacity: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            c4: 32,
            c8: 64,
            c16: 128,
            c_embed: 128,
            c_memory: 64,
            c_low: 16,
            heads: 4,
            pool_kernels: vec![2, 4, 8],
            rfb_kernels: vec![3, 5, 7],
            refine_channels: [64, 32, 32],
            click_radius: None,
            modules: ModuleSet::ALL,
            bank_capacity: 6,
        }
    }
}

impl ModelConfig {
    /// Small configuration for unit tests and gradient checks.
    pub fn tiny(resolution: usize) -> Self {
        Self {
            resolution,
            c4: 8,
            c8: 8,
            c16: 16,
            c_embed: 16,
            c_memory: 8,
            c_low: 4,
            heads: 2,
            pool_kernels: vec![1, 2],
            rfb_kernels: vec![3, 5, 7],
            refine_channels: [8, 8, 8],
            click_radius: None,
            modules: ModuleSet::ALL,
            bank_capacity: 3,
        }
    }

    pub fn with_modules(&self, modules: ModuleSet) -> Self {
        Self { modules, ..self.clone() }
    }

    /// Side of the dense prompt map and of the decoder masks.
    pub fn dense_side(&self) -> usize {
        self.resolution / 4
    }

    pub fn embed_side(&self) -> usize {
        self.resolution / 16
    }

    pub fn click_radius(&self) -> usize {
        self.click_radius.unwrap_or_else(|| ((self.dense_side() as f64 / 50.0).round() as usize).max(1))
    }

    /// Upscaled mask-feature width inside the decoder.
    pub fn c_upscale(&self) -> usize {
        (self.c_embed / 8).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r == 0 || r % 16 != 0 {
            return Err(Error::Config(format!("resolution {r} must be a positive multiple of 16")));
        }
        let widths = [self.c4, self.c8, self.c16, self.c_embed, self.c_memory, self.c_low, self.heads];
        if widths.iter().any(|&c| c == 0) || self.refine_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("all channel widths and the head count must be positive".into()));
        }
        for (name, c) in [("c16", self.c16), ("c_embed", self.c_embed), ("c_memory", self.c_memory)] {
            if c % 4 != 0 {
                return Err(Error::Config(format!("{name}={c} must be a multiple of 4 for positional encodings")));
            }
        }
        if self.c_embed % 8 != 0 {
            return Err(Error::Config("c_embed must be a multiple of 8".into()));
        }
        if self.c16 % self.heads != 0 || (self.c_embed / 2) % self.heads != 0 || self.c_embed % self.heads != 0 {
            return Err(Error::Config("attention widths must divide evenly across heads".into()));
        }
        let side = r / 8;
        if self.pool_kernels.is_empty() {
            return Err(Error::Config("at least one pooling kernel is required".into()));
        }
        for &k in &self.pool_kernels {
            if k == 0 || side % k != 0 {
                return Err(Error::Config(format!("pool kernel {k} does not divide the local feature side {side}")));
            }
        }
        if self.rfb_kernels.is_empty() || self.rfb_kernels.iter().any(|&n| n % 2 == 0) {
            return Err(Error::Config("RFB kernels must be odd and non-empty".into()));
        }
        if self.bank_capacity == 0 {
            return Err(Error::Config("bank capacity must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let join = |v: &[usize]| v.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",");
        let mut m = BTreeMap::new();
        m.insert("resolution".into(), self.resolution.to_string());
        m.insert("c4".into(), self.c4.to_string());
        m.insert("c8".into(), self.c8.to_string());
        m.insert("c16".into(), self.c16.to_string());
        m.insert("c_embed".into(), self.c_embed.to_string());
        m.insert("c_memory".into(), self.c_memory.to_string());
        m.insert("c_low".into(), self.c_low.to_string());
        m.insert("heads".into(), self.heads.to_string());
        m.insert("pool_kernels".into(), join(&self.pool_kernels));
        m.insert("rfb_kernels".into(), join(&self.rfb_kernels));
        m.insert("refine_channels".into(), join(&self.refine_channels));
        if let Some(r) = self.click_radius {
            m.insert("click_radius".into(), r.to_string());
        }
        m.insert("modules".into(), self.modules.to_string());
        m.insert("bank_capacity".into(), self.bank_capacity.to_string());
        m
    }

    /// Apply recognized keys; unknown keys are left for other consumers.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            match k.as_str() {
                "resolution" => self.resolution = parse_num(k, v)?,
                "c4" => self.c4 = parse_num(k, v)?,
                "c8" => self.c8 = parse_num(k, v)?,
                "c16" => self.c16 = parse_num(k, v)?,
                "c_embed" => self.c_embed = parse_num(k, v)?,
                "c_memory" => self.c_memory = parse_num(k, v)?,
                "c_low" => self.c_low = parse_num(k, v)?,
                "heads" => self.heads = parse_num(k, v)?,
                "pool_kernels" => self.pool_kernels = parse_list(k, v)?,
                "rfb_kernels" => self.rfb_kernels = parse_list(k, v)?,
                "refine_channels" => {
                    let l = parse_list(k, v)?;
                    if l.len() != 3 {
                        return Err(Error::Config("refine_channels needs exactly 3 values".into()));
                    }
                    self.refine_channels = [l[0], l[1], l[2]];
                }
                "click_radius" => self.click_radius = Some(parse_num(k, v)?),
                "modules" => self.modules = v.parse()?,
                "bank_capacity" => self.bank_capacity = parse_num(k, v)?,
                _ => {}
            }
        }
        self.validate()
    }
}

pub(crate) fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_num(key, s)).collect()
}

/// Parse flat `key=value` text. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", no + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn format_kv(kv: &BTreeMap<String, String>) -> String {
    kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}
