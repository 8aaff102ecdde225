//! Semantic label taxonomy and global stability maps.
//!
//! Every label belongs to one of four temporal categories. Each category
//! carries a stability value in `[0, 1]`; a stability map is the per-pixel
//! lookup of that value through a semantic mask.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::raster::{Raster, StabilityMap};

/// Per-pixel label ids.
pub type SemanticMask = Raster<u8>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Volatile,
    Dynamic,
    ShortTerm,
    LongTerm,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Volatile,
        Category::Dynamic,
        Category::ShortTerm,
        Category::LongTerm,
    ];

    pub fn default_stability(self) -> f64 {
        match self {
            Category::Volatile | Category::Dynamic => 0.1,
            Category::ShortTerm => 0.5,
            Category::LongTerm => 1.0,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Volatile => "Volatile",
            Category::Dynamic => "Dynamic",
            Category::ShortTerm => "ShortTerm",
            Category::LongTerm => "LongTerm",
        })
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match norm.as_str() {
            "volatile" => Ok(Category::Volatile),
            "dynamic" => Ok(Category::Dynamic),
            "shortterm" => Ok(Category::ShortTerm),
            "longterm" => Ok(Category::LongTerm),
            _ => Err(Error::Config(format!("unknown category `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Label {
    pub name: String,
    pub category: Category,
}

/// Immutable mapping from label ids to names, categories and stability values.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTaxonomy {
    labels: BTreeMap<u8, Label>,
    stability: [f64; 4],
}

/// Label ids of the built-in synthetic taxonomy.
pub mod synthetic_labels {
    pub const SKY: u8 = 1;
    pub const TREE: u8 = 2;
    pub const BUILDING: u8 = 3;
    pub const CAR: u8 = 4;
    pub const ROAD: u8 = 5;
    pub const ALL: [u8; 5] = [SKY, TREE, BUILDING, CAR, ROAD];
}

const SYNTHETIC_TAXONOMY: &str = "\
1 sky Volatile
2 tree ShortTerm
3 building LongTerm
4 car Dynamic
5 road LongTerm
";

const REFERENCE_TAXONOMY: &str = include_str!("../data/reference_taxonomy.txt");

impl LabelTaxonomy {
    /// Parse `id name category [stability]` lines; `#` starts a comment.
    ///
    /// A stability column overrides the value of that label's category for
    /// the whole taxonomy; conflicting overrides are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut labels = BTreeMap::new();
        let mut overrides: [Option<f64>; 4] = [None; 4];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 3 {
                return Err(at(format!("expected `id name category`, got `{line}`")));
            }
            if fields.len() > 4 {
                return Err(at(format!("too many fields in `{line}`")));
            }
            let id: u8 = fields[0]
                .parse()
                .map_err(|_| at(format!("bad label id `{}`", fields[0])))?;
            let category: Category = fields[2].parse().map_err(|e| at(format!("{e}")))?;
            if let Some(s) = fields.get(3) {
                let v: f64 = s.parse().map_err(|_| at(format!("bad stability `{s}`")))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(at(format!("stability {v} outside [0, 1]")));
                }
                match overrides[category.index()] {
                    Some(prev) if prev != v => {
                        return Err(at(format!(
                            "conflicting stability for {category}: {prev} vs {v}"
                        )))
                    }
                    _ => overrides[category.index()] = Some(v),
                }
            }
            let label = Label {
                name: fields[1].to_string(),
                category,
            };
            if labels.insert(id, label).is_some() {
                return Err(at(format!("duplicate label id {id}")));
            }
        }
        let mut stability = Category::ALL.map(Category::default_stability);
        for (s, o) in stability.iter_mut().zip(overrides) {
            if let Some(v) = o {
                *s = v;
            }
        }
        Ok(Self { labels, stability })
    }

    /// Five-label taxonomy used by the synthetic scenes.
    pub fn synthetic() -> Self {
        Self::parse(SYNTHETIC_TAXONOMY).expect("built-in taxonomy parses")
    }

    /// Broad outdoor/indoor taxonomy grouped into the four categories.
    pub fn reference() -> Self {
        Self::parse(REFERENCE_TAXONOMY).expect("reference taxonomy parses")
    }

    pub fn label(&self, id: u8) -> Option<&Label> {
        self.labels.get(&id)
    }

    pub fn category(&self, id: u8) -> Option<Category> {
        self.labels.get(&id).map(|l| l.category)
    }

    pub fn id_of(&self, name: &str) -> Option<u8> {
        self.labels
            .iter()
            .find(|(_, l)| l.name == name)
            .map(|(&id, _)| id)
    }

    pub fn labels(&self) -> impl Iterator<Item = (u8, &Label)> {
        self.labels.iter().map(|(&id, l)| (id, l))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn category_stability(&self, c: Category) -> f64 {
        self.stability[c.index()]
    }

    pub fn set_category_stability(&mut self, c: Category, v: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("stability {v} outside [0, 1]")));
        }
        self.stability[c.index()] = v;
        Ok(())
    }

    pub fn stability(&self, id: u8) -> Option<f64> {
        self.category(id).map(|c| self.category_stability(c))
    }

    pub fn stability_by_name(&self, name: &str) -> Option<f64> {
        self.id_of(name).and_then(|id| self.stability(id))
    }
}

/// Per-pixel stability lookup.
pub fn stability_map(mask: &SemanticMask, tax: &LabelTaxonomy) -> Result<StabilityMap> {
    let mut lut = [None; 256];
    for (id, _) in tax.labels() {
        lut[id as usize] = tax.stability(id);
    }
    let mut data = Vec::with_capacity(mask.len());
    for (i, &id) in mask.data().iter().enumerate() {
        match lut[id as usize] {
            Some(s) => data.push(s),
            None => {
                return Err(Error::Label {
                    id,
                    x: i % mask.width(),
                    y: i / mask.width(),
                })
            }
        }
    }
    Raster::new(mask.width(), mask.height(), data)
}

/// Per-pixel category, `None` where the label is unknown.
pub fn category_map(mask: &SemanticMask, tax: &LabelTaxonomy) -> Raster<Option<Category>> {
    mask.map(|id| tax.category(id))
}
