//! Behavior events, the behavior-type registry, and the category map used by
//! group statistics.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One post-click interaction.
///
/// Serialized as the compact array `[item_id, behavior, timestamp, location_id, price]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "EventTuple", into = "EventTuple")]
pub struct BehaviorEvent {
    pub item_id: u32,
    /// 1-based index into the [`BehaviorRegistry`]; 0 is "unknown".
    pub behavior: u8,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
    pub location_id: u32,
    pub price: f64,
}

type EventTuple = (u32, u8, i64, u32, f64);

impl From<EventTuple> for BehaviorEvent {
    fn from((item_id, behavior, timestamp, location_id, price): EventTuple) -> Self {
        Self {
            item_id,
            behavior,
            timestamp,
            location_id,
            price,
        }
    }
}

impl From<BehaviorEvent> for EventTuple {
    fn from(e: BehaviorEvent) -> Self {
        (e.item_id, e.behavior, e.timestamp, e.location_id, e.price)
    }
}

impl BehaviorEvent {
    pub fn validate(&self, registry: &BehaviorRegistry) -> Result<()> {
        if self.timestamp <= 0 {
            return Err(Error::invalid(format!("non-positive timestamp {}", self.timestamp)));
        }
        if self.behavior == 0 || self.behavior as usize > registry.len() {
            return Err(Error::invalid(format!("behavior code {} not in registry", self.behavior)));
        }
        if !(self.price >= 0.0) || !self.price.is_finite() {
            return Err(Error::invalid(format!("invalid price {}", self.price)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Strong,
    Weak,
    Negative,
    Payment,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Strong,
        Category::Weak,
        Category::Negative,
        Category::Payment,
    ];

    /// Slot in the statistics count vector.
    pub fn index(self) -> usize {
        match self {
            Category::Strong => 0,
            Category::Weak => 1,
            Category::Negative => 2,
            Category::Payment => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Strong => "strong",
            Category::Weak => "weak",
            Category::Negative => "negative",
            Category::Payment => "payment",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown category {s:?}")))
    }
}

/// Ordered list of behavior-type names; codes are 1-based positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorRegistry {
    names: Vec<String>,
}

impl BehaviorRegistry {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() || names.len() > u8::MAX as usize {
            return Err(Error::invalid("registry must hold 1..=255 behavior types"));
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn code(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| n == name).map(|i| i as u8 + 1)
    }

    pub fn name(&self, code: u8) -> Option<&str> {
        (code as usize)
            .checked_sub(1)
            .and_then(|i| self.names.get(i))
            .map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

pub const DEFAULT_BEHAVIORS: [(&str, Category); 7] = [
    ("click", Category::Weak),
    ("browse_dishes", Category::Weak),
    ("view_comments", Category::Weak),
    ("add_to_cart", Category::Strong),
    ("add_to_favorite", Category::Strong),
    ("order", Category::Payment),
    ("dislike", Category::Negative),
];

impl Default for BehaviorRegistry {
    fn default() -> Self {
        Self {
            names: DEFAULT_BEHAVIORS.iter().map(|(n, _)| n.to_string()).collect(),
        }
    }
}

/// Behavior code → interest category. Unmapped codes count as weak interest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryMap {
    by_code: Vec<Category>,
}

impl CategoryMap {
    pub fn from_pairs(registry: &BehaviorRegistry, pairs: &[(String, Category)]) -> Result<Self> {
        let mut by_code = vec![Category::Weak; registry.len() + 1];
        for (name, cat) in pairs {
            let code = registry
                .code(name)
                .ok_or_else(|| Error::invalid(format!("behavior type {name:?} not in registry")))?;
            by_code[code as usize] = *cat;
        }
        Ok(Self { by_code })
    }

    #[inline]
    pub fn category(&self, code: u8) -> Category {
        self.by_code
            .get(code as usize)
            .copied()
            .unwrap_or(Category::Weak)
    }

    /// Parses `behavior_type<TAB>category` lines; blank lines and `#` comments
    /// are skipped.
    pub fn parse(registry: &BehaviorRegistry, text: &str, origin: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut seen = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (name, cat) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected behavior_type<TAB>category".into()))?;
            let cat: Category = cat.trim().parse().map_err(|e: Error| parse_err(e.to_string()))?;
            if seen.insert(name.to_string(), i + 1).is_some() {
                return Err(parse_err(format!("duplicate behavior type {name:?}")));
            }
            if registry.code(name).is_none() {
                return Err(parse_err(format!("behavior type {name:?} not in registry")));
            }
            pairs.push((name.to_string(), cat));
        }
        Self::from_pairs(registry, &pairs)
    }

    pub fn load(registry: &BehaviorRegistry, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(registry, &text, path)
    }

    pub fn to_text(&self, registry: &BehaviorRegistry) -> String {
        let mut out = String::new();
        for (i, name) in registry.names().iter().enumerate() {
            out.push_str(&format!("{name}\t{}\n", self.by_code[i + 1]));
        }
        out
    }
}

impl CategoryMap {
    pub fn default_for(registry: &BehaviorRegistry) -> Self {
        let pairs: Vec<(String, Category)> = DEFAULT_BEHAVIORS
            .iter()
            .filter(|(n, _)| registry.code(n).is_some())
            .map(|(n, c)| (n.to_string(), *c))
            .collect();
        Self::from_pairs(registry, &pairs).expect("default names are registered")
    }
}
