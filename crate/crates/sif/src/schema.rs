//! Feature schema: field declarations, semantic groups, and the derived
//! sub-token partition everything downstream consumes.

use crate::error::{Result, SifError};
use serde::Deserialize;
use std::fmt;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    User,
    Item,
    Ctx,
    Cross,
    /// Dedicated singleton group (e.g. an item-ID field kept apart so its
    /// identity signal is not diluted by a shared codebook).
    Custom(String),
}

impl Group {
    pub fn parse(s: &str) -> Group {
        match s {
            "user" => Group::User,
            "item" => Group::Item,
            "ctx" => Group::Ctx,
            "cross" => Group::Cross,
            other => Group::Custom(other.to_string()),
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::User => write!(f, "user"),
            Group::Item => write!(f, "item"),
            Group::Ctx => write!(f, "ctx"),
            Group::Cross => write!(f, "cross"),
            Group::Custom(s) => write!(f, "{}", s),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FieldKind {
    Categorical { cardinality: u32 },
    Numeric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldSpec {
    pub name: String,
    pub group: Group,
    pub kind: FieldKind,
    /// Per-field raw embedding width d_e.
    pub embed_dim: usize,
}

pub const DEFAULT_EMBED_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSchema {
    pub fields: Vec<FieldSpec>,
    /// Sub-token granularity B: target field count per sub-token.
    pub sub_token_granularity: usize,
    /// Sub-token dimension d_0.
    pub sub_token_dim: usize,
    /// RVQ levels M.
    pub rvq_levels: usize,
    /// Codebook size V per level.
    pub codebook_size: usize,
}

/// One sub-token slot (g, k): a contiguous span of fields within a group.
#[derive(Clone, Debug, PartialEq)]
pub struct SubTokenSlot {
    pub group: Group,
    pub index_in_group: usize,
    /// Index span into `FeatureSchema::fields` (start, end exclusive).
    pub field_range: (usize, usize),
    /// Input width of this slot's projection: sum of member embed_dims.
    pub raw_width: usize,
}

impl FeatureSchema {
    pub fn new(
        fields: Vec<FieldSpec>,
        sub_token_granularity: usize,
        sub_token_dim: usize,
        rvq_levels: usize,
        codebook_size: usize,
    ) -> Result<Self> {
        let s = FeatureSchema {
            fields,
            sub_token_granularity,
            sub_token_dim,
            rvq_levels,
            codebook_size,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if self.fields.is_empty() {
            return Err(SifError::Schema("schema has no fields".into()));
        }
        if self.sub_token_granularity == 0 {
            return Err(SifError::Schema("sub_token_granularity must be >= 1".into()));
        }
        if self.sub_token_dim == 0 || self.rvq_levels == 0 {
            return Err(SifError::Schema("sub_token_dim and rvq_levels must be >= 1".into()));
        }
        let v = self.codebook_size;
        if v < 1 || !v.is_power_of_two() || v.trailing_zeros() > 16 {
            return Err(SifError::Schema(format!(
                "codebook_size must be a power of two in [1, 65536], got {}",
                v
            )));
        }
        let mut names = std::collections::BTreeSet::new();
        for f in &self.fields {
            if f.embed_dim == 0 {
                return Err(SifError::Schema(format!("field {}: embed_dim must be >= 1", f.name)));
            }
            if let FieldKind::Categorical { cardinality } = f.kind {
                if cardinality < 2 {
                    return Err(SifError::Schema(format!(
                        "field {}: categorical cardinality must be >= 2",
                        f.name
                    )));
                }
            }
            if !names.insert(f.name.clone()) {
                return Err(SifError::Schema(format!("duplicate field name {}", f.name)));
            }
        }
        // custom groups must be singletons
        for g in self.group_order() {
            if let Group::Custom(ref name) = g {
                let count = self.fields.iter().filter(|f| f.group == g).count();
                if count != 1 {
                    return Err(SifError::Schema(format!(
                        "custom group {} must hold exactly one field, has {}",
                        name, count
                    )));
                }
            }
        }
        Ok(())
    }

    /// Canonical group order: built-in groups in fixed order (those present),
    /// then custom singleton groups by first appearance.
    pub fn group_order(&self) -> Vec<Group> {
        let mut order = Vec::new();
        for g in [Group::User, Group::Item, Group::Ctx, Group::Cross] {
            if self.fields.iter().any(|f| f.group == g) {
                order.push(g);
            }
        }
        for f in &self.fields {
            if matches!(f.group, Group::Custom(_)) && !order.contains(&f.group) {
                order.push(f.group.clone());
            }
        }
        order
    }

    /// Field indices of a group, in declaration order.
    pub fn group_fields(&self, g: &Group) -> Vec<usize> {
        self.fields
            .iter()
            .enumerate()
            .filter(|(_, f)| f.group == *g)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_groups(&self) -> usize {
        self.group_order().len()
    }

    /// Total sub-token count T = sum over groups of ceil(|F_g| / B).
    pub fn num_slots(&self) -> usize {
        self.group_order()
            .iter()
            .map(|g| sub_token_count(self.group_fields(g).len(), self.sub_token_granularity))
            .sum()
    }

    /// Stable 64-bit hash of the schema content (FNV-1a over a canonical
    /// byte encoding). Persisted in every file header to catch mismatches.
    pub fn hash(&self) -> u64 {
        let mut h = Fnv64::new();
        h.bytes(b"sif-schema-v1");
        h.u64(self.sub_token_granularity as u64);
        h.u64(self.sub_token_dim as u64);
        h.u64(self.rvq_levels as u64);
        h.u64(self.codebook_size as u64);
        for f in &self.fields {
            h.bytes(f.name.as_bytes());
            h.bytes(f.group.to_string().as_bytes());
            match f.kind {
                FieldKind::Categorical { cardinality } => {
                    h.bytes(b"cat");
                    h.u64(cardinality as u64);
                }
                FieldKind::Numeric => h.bytes(b"num"),
            }
            h.u64(f.embed_dim as u64);
        }
        h.finish()
    }
}

fn sub_token_count(n_fields: usize, b: usize) -> usize {
    n_fields.div_ceil(b)
}

/// Derives the ordered sub-token slot list: group-major, k-ascending, with
/// each group's fields split in declaration order into near-equal contiguous
/// chunks (sizes differing by at most one).
pub fn derive_partition(schema: &FeatureSchema) -> Result<Vec<SubTokenSlot>> {
    let b = schema.sub_token_granularity;
    if b == 0 {
        return Err(SifError::Schema("sub_token_granularity must be >= 1".into()));
    }
    let mut slots = Vec::new();
    for g in schema.group_order() {
        let fields = schema.group_fields(&g);
        if fields.is_empty() {
            return Err(SifError::Schema(format!("group {} has no fields", g)));
        }
        // declaration order means group fields form contiguous runs in the
        // per-group list, but not necessarily in the global field list; the
        // slot stores the span within the group's own ordering.
        let k_g = sub_token_count(fields.len(), b);
        let base = fields.len() / k_g;
        let extra = fields.len() % k_g;
        let mut cursor = 0usize;
        for k in 0..k_g {
            let size = base + usize::from(k < extra);
            let members = &fields[cursor..cursor + size];
            let raw_width = members.iter().map(|&i| schema.fields[i].embed_dim).sum();
            slots.push(SubTokenSlot {
                group: g.clone(),
                index_in_group: k,
                field_range: (cursor, cursor + size),
                raw_width,
            });
            cursor += size;
        }
        debug_assert_eq!(cursor, fields.len());
    }
    Ok(slots)
}

/// Global field indices of a slot's members.
pub fn slot_fields(schema: &FeatureSchema, slot: &SubTokenSlot) -> Vec<usize> {
    let group_fields = schema.group_fields(&slot.group);
    group_fields[slot.field_range.0..slot.field_range.1].to_vec()
}

/// Serialized token size in bits: T x M x log2(V).
pub fn token_bits(schema: &FeatureSchema) -> Result<usize> {
    let slots = derive_partition(schema)?;
    Ok(slots.len() * schema.rvq_levels * (schema.codebook_size.trailing_zeros() as usize))
}

// --- schema file ------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    sub_token_granularity: usize,
    sub_token_dim: usize,
    rvq_levels: usize,
    codebook_size: usize,
    fields: Vec<SchemaFileField>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFileField {
    name: String,
    group: String,
    kind: String,
    cardinality: Option<u32>,
    embed_dim: Option<usize>,
}

/// Parses the schema config (TOML, strict: unknown keys are errors).
pub fn parse_schema(text: &str) -> Result<FeatureSchema> {
    let file: SchemaFile =
        toml::from_str(text).map_err(|e| SifError::Schema(format!("parse: {}", e)))?;
    let mut fields = Vec::with_capacity(file.fields.len());
    for f in file.fields {
        let kind = match f.kind.as_str() {
            "categorical" => {
                let cardinality = f.cardinality.ok_or_else(|| {
                    SifError::Schema(format!("field {}: categorical needs cardinality", f.name))
                })?;
                FieldKind::Categorical { cardinality }
            }
            "numeric" => {
                if f.cardinality.is_some() {
                    return Err(SifError::Schema(format!(
                        "field {}: numeric fields take no cardinality",
                        f.name
                    )));
                }
                FieldKind::Numeric
            }
            other => {
                return Err(SifError::Schema(format!(
                    "field {}: unknown kind {:?}",
                    f.name, other
                )))
            }
        };
        fields.push(FieldSpec {
            name: f.name,
            group: Group::parse(&f.group),
            kind,
            embed_dim: f.embed_dim.unwrap_or(DEFAULT_EMBED_DIM),
        });
    }
    FeatureSchema::new(
        fields,
        file.sub_token_granularity,
        file.sub_token_dim,
        file.rvq_levels,
        file.codebook_size,
    )
}

pub fn load_schema(path: &Path) -> Result<FeatureSchema> {
    let text = std::fs::read_to_string(path)?;
    parse_schema(&text)
}

// --- FNV-1a 64 --------------------------------------------------------------

struct Fnv64(u64);

impl Fnv64 {
    fn new() -> Self {
        Fnv64(0xcbf29ce484222325)
    }
    fn bytes(&mut self, b: &[u8]) {
        for &x in b {
            self.0 ^= x as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn finish(&self) -> u64 {
        self.0
    }
}
