//! Attribute domains and the three progressive rules, each required to hold
//! along every row and every column of the completed 3x3 matrix.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{ForgeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attribute {
    ShapeType,
    EntityCount,
    SizeLevel,
    ShadeLevel,
}

pub const ATTRIBUTES: [Attribute; 4] = [
    Attribute::ShapeType,
    Attribute::EntityCount,
    Attribute::SizeLevel,
    Attribute::ShadeLevel,
];

impl Attribute {
    /// Inclusive value domain, as (min, max).
    pub fn domain(self) -> (u8, u8) {
        match self {
            Attribute::ShapeType => (0, 3),
            Attribute::EntityCount => (1, 9),
            Attribute::SizeLevel => (0, 2),
            Attribute::ShadeLevel => (0, 2),
        }
    }

    pub fn domain_size(self) -> usize {
        let (lo, hi) = self.domain();
        (hi - lo + 1) as usize
    }

    pub fn short(self) -> &'static str {
        match self {
            Attribute::ShapeType => "shape",
            Attribute::EntityCount => "count",
            Attribute::SizeLevel => "size",
            Attribute::ShadeLevel => "shade",
        }
    }

    pub fn from_short(s: &str) -> Option<Self> {
        match s {
            "shape" | "shape-type" => Some(Attribute::ShapeType),
            "count" | "entity-count" => Some(Attribute::EntityCount),
            "size" | "size-level" => Some(Attribute::SizeLevel),
            "shade" | "shade-level" => Some(Attribute::ShadeLevel),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        ATTRIBUTES.iter().position(|&a| a == self).unwrap() as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        ATTRIBUTES.get(c as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RuleKind {
    Constant,
    ArithmeticProgression,
    DistributeThree,
}

pub const RULES: [RuleKind; 3] = [
    RuleKind::Constant,
    RuleKind::ArithmeticProgression,
    RuleKind::DistributeThree,
];

impl RuleKind {
    pub fn short(self) -> &'static str {
        match self {
            RuleKind::Constant => "const",
            RuleKind::ArithmeticProgression => "ap",
            RuleKind::DistributeThree => "d3",
        }
    }

    pub fn from_short(s: &str) -> Option<Self> {
        match s {
            "const" | "constant" => Some(RuleKind::Constant),
            "ap" | "arithmetic-progression" | "progression" => {
                Some(RuleKind::ArithmeticProgression)
            }
            "d3" | "distribute-three" | "distribute3" => Some(RuleKind::DistributeThree),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        RULES.iter().position(|&r| r == self).unwrap() as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        RULES.get(c as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RuleSpec {
    pub attribute: Attribute,
    pub rule: RuleKind,
}

impl RuleSpec {
    pub fn parse_list(s: &str) -> Result<Vec<RuleSpec>> {
        let mut specs = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (a, r) = part.split_once(':').ok_or_else(|| {
                ForgeError::InvalidConfig(format!("rule '{part}' is not attr:rule"))
            })?;
            let attribute = Attribute::from_short(a.trim())
                .ok_or_else(|| ForgeError::InvalidConfig(format!("unknown attribute '{a}'")))?;
            let rule = RuleKind::from_short(r.trim())
                .ok_or_else(|| ForgeError::InvalidConfig(format!("unknown rule '{r}'")))?;
            specs.push(RuleSpec { attribute, rule });
        }
        specs.sort_by_key(|r| r.attribute);
        Ok(specs)
    }
}

/// Symbolic attribute values of one panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PanelAttrs {
    pub shape: u8,
    pub count: u8,
    pub size: u8,
    pub shade: u8,
}

impl PanelAttrs {
    pub fn get(&self, attr: Attribute) -> u8 {
        match attr {
            Attribute::ShapeType => self.shape,
            Attribute::EntityCount => self.count,
            Attribute::SizeLevel => self.size,
            Attribute::ShadeLevel => self.shade,
        }
    }

    pub fn set(&mut self, attr: Attribute, v: u8) {
        match attr {
            Attribute::ShapeType => self.shape = v,
            Attribute::EntityCount => self.count = v,
            Attribute::SizeLevel => self.size = v,
            Attribute::ShadeLevel => self.shade = v,
        }
    }
}

/// The metadata vocabulary is every attribute x rule pair, in fixed order.
pub const META_VOCAB_SIZE: usize = 12;

pub fn meta_vocab() -> Vec<RuleSpec> {
    let mut v = Vec::with_capacity(META_VOCAB_SIZE);
    for &attribute in &ATTRIBUTES {
        for &rule in &RULES {
            v.push(RuleSpec { attribute, rule });
        }
    }
    v
}

pub fn vocab_index(spec: &RuleSpec) -> usize {
    spec.attribute.code() as usize * RULES.len() + spec.rule.code() as usize
}

fn is_ap_triple(a: i16, b: i16, c: i16) -> bool {
    let d = b - a;
    d != 0 && c - b == d
}

/// Check one rule over the completed 3x3 value grid (row-major, cell 9 is
/// the candidate) along both rows and columns.
pub fn grid_satisfies(grid: &[PanelAttrs; 9], spec: &RuleSpec) -> bool {
    let v = |r: usize, c: usize| grid[r * 3 + c].get(spec.attribute) as i16;
    match spec.rule {
        RuleKind::Constant => {
            let first = v(0, 0);
            (0..3).all(|r| (0..3).all(|c| v(r, c) == first))
        }
        RuleKind::ArithmeticProgression => {
            (0..3).all(|r| is_ap_triple(v(r, 0), v(r, 1), v(r, 2)))
                && (0..3).all(|c| is_ap_triple(v(0, c), v(1, c), v(2, c)))
        }
        RuleKind::DistributeThree => {
            let set_of = |vals: [i16; 3]| {
                let mut s = vals;
                s.sort_unstable();
                (s[0] != s[1] && s[1] != s[2]).then_some(s)
            };
            let Some(base) = set_of([v(0, 0), v(0, 1), v(0, 2)]) else {
                return false;
            };
            (0..3).all(|r| set_of([v(r, 0), v(r, 1), v(r, 2)]) == Some(base))
                && (0..3).all(|c| set_of([v(0, c), v(1, c), v(2, c)]) == Some(base))
        }
    }
}

/// Generate a 3x3 value grid satisfying `spec` along rows and columns.
pub(crate) fn generate_grid(spec: &RuleSpec, rng: &mut ChaCha8Rng) -> Result<[u8; 9]> {
    let (lo, hi) = spec.attribute.domain();
    match spec.rule {
        RuleKind::Constant => {
            let v = rng.gen_range(lo..=hi);
            Ok([v; 9])
        }
        RuleKind::ArithmeticProgression => {
            // value(r,c) = a + s*c + t*r, steps nonzero, all cells in domain
            let mut candidates = Vec::new();
            for s in [-2i16, -1, 1, 2] {
                for t in [-2i16, -1, 1, 2] {
                    for a in lo as i16..=hi as i16 {
                        let in_domain = (0..3).all(|r: i16| {
                            (0..3).all(|c: i16| {
                                let v = a + s * c + t * r;
                                v >= lo as i16 && v <= hi as i16
                            })
                        });
                        if in_domain {
                            candidates.push((a, s, t));
                        }
                    }
                }
            }
            let Some(&(a, s, t)) = candidates.choose(rng) else {
                return Err(ForgeError::Unsatisfiable {
                    attribute: spec.attribute,
                    rule: spec.rule,
                    reason: format!(
                        "domain of {} values cannot hold a progression in both directions",
                        spec.attribute.domain_size()
                    ),
                });
            };
            let mut grid = [0u8; 9];
            for r in 0..3i16 {
                for c in 0..3i16 {
                    grid[(r * 3 + c) as usize] = (a + s * c + t * r) as u8;
                }
            }
            Ok(grid)
        }
        RuleKind::DistributeThree => {
            // Latin square over three distinct values: random value triple,
            // random row permutation, rows cyclically shifted.
            let mut values: Vec<u8> = (lo..=hi).collect();
            values.shuffle(rng);
            let vals = [values[0], values[1], values[2]];
            let mut order = [0usize, 1, 2];
            order.shuffle(rng);
            let shift = if rng.gen_bool(0.5) { 1 } else { 2 };
            let mut grid = [0u8; 9];
            for r in 0..3 {
                for c in 0..3 {
                    grid[r * 3 + c] = vals[order[(c + r * shift) % 3]];
                }
            }
            Ok(grid)
        }
    }
}
