use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GroupKind {
    Binary,
    Categorical { values: Vec<String> },
}

/// Half-open pixel rectangle `rows.0..rows.1` x `cols.0..cols.1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl Region {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.rows.0..self.rows.1).contains(&r) && (self.cols.0..self.cols.1).contains(&c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    #[default]
    Solid,
    /// Every other row of the region, starting with its first row.
    AlternateRows,
}

/// One attribute group and how it is drawn.
///
/// A binary group paints `colors[0]` when set; a categorical group paints
/// `colors[v]` for its active value `v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeGroup {
    pub name: String,
    #[serde(flatten)]
    pub kind: GroupKind,
    pub region: Region,
    #[serde(default)]
    pub pattern: Pattern,
    pub colors: Vec<[f32; 3]>,
}

impl AttributeGroup {
    pub fn slots(&self) -> usize {
        match &self.kind {
            GroupKind::Binary => 1,
            GroupKind::Categorical { values } => values.len(),
        }
    }

    /// Number of distinct settings of this group.
    pub fn arity(&self) -> usize {
        match &self.kind {
            GroupKind::Binary => 2,
            GroupKind::Categorical { values } => values.len(),
        }
    }

    pub fn paints(&self, r: usize, c: usize) -> bool {
        self.region.contains(r, c)
            && match self.pattern {
                Pattern::Solid => true,
                Pattern::AlternateRows => (r - self.region.rows.0).is_multiple_of(2),
            }
    }
}

/// Ordered attribute groups; the encoded vector concatenates their slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub groups: Vec<AttributeGroup>,
}

/// Encoded attribute description: binary slots and one-hot categorical groups.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttributeVector {
    bits: Vec<u8>,
}

impl AttributeVector {
    pub fn from_bits(bits: Vec<u8>) -> Self {
        Self { bits }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn to_reals<R: crate::autograd::Real>(&self) -> Vec<R> {
        self.bits
            .iter()
            .map(|&b| if b == 1 { R::one() } else { R::zero() })
            .collect()
    }
}

/// Integer class shared by every sample with an identical attribute vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SemanticId(pub usize);

// The palette is pulled towards mid grey so that illumination and pixel noise
// are comparable to attribute contrast; full-contrast colours make retrieval
// on unseen ids trivially perfect.
const MUTED_GREY: f32 = 0.45;
const MUTED_CONTRAST: f32 = 0.35;
const RED: [f32; 3] = [0.9, 0.15, 0.15];

impl AttributeSchema {
    /// Six binary groups and two 4-way colour groups (14 slots) on a 16x8 canvas.
    pub fn default_desk() -> Self {
        let binary = |name: &str, rows, cols, pattern, color| AttributeGroup {
            name: name.into(),
            kind: GroupKind::Binary,
            region: Region { rows, cols },
            pattern,
            colors: vec![color],
        };
        let categorical =
            |name: &str, values: &[&str], rows, cols, colors: Vec<[f32; 3]>| AttributeGroup {
                name: name.into(),
                kind: GroupKind::Categorical {
                    values: values.iter().map(|s| s.to_string()).collect(),
                },
                region: Region { rows, cols },
                pattern: Pattern::Solid,
                colors,
            };
        let mut schema = Self {
            groups: vec![
                binary("hat", (0, 2), (2, 6), Pattern::Solid, RED),
                binary(
                    "long_hair",
                    (2, 6),
                    (1, 2),
                    Pattern::Solid,
                    [0.25, 0.15, 0.05],
                ),
                categorical(
                    "top_color",
                    &["red", "green", "blue", "yellow"],
                    (2, 8),
                    (2, 6),
                    vec![
                        [0.9, 0.2, 0.2],
                        [0.2, 0.8, 0.2],
                        [0.2, 0.3, 0.9],
                        [0.95, 0.9, 0.2],
                    ],
                ),
                binary(
                    "striped_top",
                    (3, 8),
                    (2, 6),
                    Pattern::AlternateRows,
                    [1.0, 1.0, 1.0],
                ),
                binary(
                    "backpack",
                    (3, 10),
                    (6, 8),
                    Pattern::Solid,
                    [0.1, 0.1, 0.35],
                ),
                binary("handbag", (9, 12), (0, 2), Pattern::Solid, [0.6, 0.3, 0.1]),
                categorical(
                    "bottom_color",
                    &["black", "white", "denim", "khaki"],
                    (8, 14),
                    (2, 6),
                    vec![
                        [0.05, 0.05, 0.05],
                        [0.95, 0.95, 0.95],
                        [0.25, 0.35, 0.6],
                        [0.7, 0.6, 0.4],
                    ],
                ),
                binary("boots", (14, 16), (2, 6), Pattern::Solid, [0.15, 0.1, 0.05]),
            ],
        };
        for c in schema
            .groups
            .iter_mut()
            .flat_map(|g| g.colors.iter_mut())
            .flatten()
        {
            *c = MUTED_GREY + MUTED_CONTRAST * (*c - MUTED_GREY);
        }
        schema
    }

    /// Encoded length (`attributeSize`).
    pub fn attribute_size(&self) -> usize {
        self.groups.iter().map(AttributeGroup::slots).sum()
    }

    /// Slot names, `group` for binary slots and `group=value` for one-hot slots.
    pub fn slot_names(&self) -> Vec<String> {
        self.groups
            .iter()
            .flat_map(|g| match &g.kind {
                GroupKind::Binary => vec![g.name.clone()],
                GroupKind::Categorical { values } => {
                    values.iter().map(|v| format!("{}={}", g.name, v)).collect()
                }
            })
            .collect()
    }

    /// Number of realizable attribute vectors, saturating.
    pub fn combinations(&self) -> u128 {
        self.groups
            .iter()
            .fold(1u128, |acc, g| acc.saturating_mul(g.arity() as u128))
    }

    /// Checks group shapes, colours and that every region fits a `height x width` canvas.
    pub fn validate(&self, height: usize, width: usize) -> Result<(), DataError> {
        let mut names = HashMap::new();
        for (i, g) in self.groups.iter().enumerate() {
            let bad = |reason: String| DataError::InvalidSchema { group: i, reason };
            if names.insert(g.name.as_str(), i).is_some() {
                return Err(bad(format!("duplicate group name {}", g.name)));
            }
            if let GroupKind::Categorical { values } = &g.kind {
                if values.len() < 2 {
                    return Err(bad("categorical group needs at least 2 values".into()));
                }
            }
            let want = match g.kind {
                GroupKind::Binary => 1,
                GroupKind::Categorical { .. } => g.slots(),
            };
            if g.colors.len() != want {
                return Err(bad(format!(
                    "expected {want} colors, got {}",
                    g.colors.len()
                )));
            }
            let r = g.region;
            if r.rows.0 >= r.rows.1 || r.cols.0 >= r.cols.1 || r.rows.1 > height || r.cols.1 > width
            {
                return Err(bad(format!("region {r:?} outside {height}x{width} canvas")));
            }
        }
        Ok(())
    }

    /// Checks an encoded vector, naming the first offending group.
    pub fn check(&self, v: &AttributeVector) -> Result<(), DataError> {
        if v.len() != self.attribute_size() {
            return Err(DataError::AttributeWidth {
                expected: self.attribute_size(),
                got: v.len(),
            });
        }
        let mut off = 0;
        for (i, g) in self.groups.iter().enumerate() {
            let slots = &v.bits()[off..off + g.slots()];
            if slots.iter().any(|&b| b > 1) {
                return Err(DataError::InvalidAttributes {
                    group: i,
                    reason: "slot value not in {0,1}".into(),
                });
            }
            if let GroupKind::Categorical { .. } = g.kind {
                let hot = slots.iter().filter(|&&b| b == 1).count();
                if hot != 1 {
                    return Err(DataError::InvalidAttributes {
                        group: i,
                        reason: format!("one-hot group has {hot} active slots"),
                    });
                }
            }
            off += g.slots();
        }
        Ok(())
    }

    /// Per-group setting: `0/1` for binary groups, the active index for categorical ones.
    pub fn decode(&self, v: &AttributeVector) -> Result<Vec<usize>, DataError> {
        self.check(v)?;
        let mut off = 0;
        Ok(self
            .groups
            .iter()
            .map(|g| {
                let slots = &v.bits()[off..off + g.slots()];
                off += g.slots();
                match g.kind {
                    GroupKind::Binary => slots[0] as usize,
                    GroupKind::Categorical { .. } => slots.iter().position(|&b| b == 1).unwrap(),
                }
            })
            .collect())
    }

    /// Inverse of [`decode`](Self::decode).
    pub fn encode(&self, settings: &[usize]) -> Result<AttributeVector, DataError> {
        if settings.len() != self.groups.len() {
            return Err(DataError::InvalidArgument(format!(
                "{} settings for {} groups",
                settings.len(),
                self.groups.len()
            )));
        }
        let mut bits = Vec::with_capacity(self.attribute_size());
        for (i, (g, &s)) in self.groups.iter().zip(settings).enumerate() {
            if s >= g.arity() {
                return Err(DataError::InvalidAttributes {
                    group: i,
                    reason: format!("setting {s} out of range"),
                });
            }
            match g.kind {
                GroupKind::Binary => bits.push(s as u8),
                GroupKind::Categorical { .. } => {
                    bits.extend((0..g.slots()).map(|k| (k == s) as u8))
                }
            }
        }
        Ok(AttributeVector::from_bits(bits))
    }
}

/// Assigns ids `0..U` to the `U` distinct vectors in first-occurrence order.
pub fn assign_semantic_ids(
    schema: &AttributeSchema,
    vectors: &[AttributeVector],
) -> Result<Vec<SemanticId>, DataError> {
    let mut seen: HashMap<&AttributeVector, SemanticId> = HashMap::new();
    let mut out = Vec::with_capacity(vectors.len());
    for v in vectors {
        schema.check(v)?;
        let next = SemanticId(seen.len());
        out.push(*seen.entry(v).or_insert(next));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schema_has_fourteen_slots() {
        let s = AttributeSchema::default_desk();
        assert_eq!(s.attribute_size(), 14);
        assert_eq!(s.combinations(), 64 * 16);
        s.validate(16, 8).unwrap();
        let binaries = s
            .groups
            .iter()
            .filter(|g| g.kind == GroupKind::Binary)
            .count();
        assert_eq!(binaries, 6);
    }

    #[test]
    fn ids_follow_first_occurrence() {
        let s = AttributeSchema::default_desk();
        let v = s.encode(&[1, 0, 2, 0, 0, 1, 3, 0]).unwrap();
        let w = s.encode(&[0, 0, 2, 0, 0, 1, 3, 0]).unwrap();
        let ids = assign_semantic_ids(&s, &[v.clone(), v.clone(), w.clone()]).unwrap();
        assert_eq!(ids, vec![SemanticId(0), SemanticId(0), SemanticId(1)]);
        let ids = assign_semantic_ids(&s, &[w, v]).unwrap();
        assert_eq!(ids, vec![SemanticId(0), SemanticId(1)]);
    }

    #[test]
    fn invalid_vector_names_group() {
        let s = AttributeSchema::default_desk();
        let mut bits = s.encode(&[0; 8]).unwrap().bits().to_vec();
        bits[3] = 1; // second hot slot in top_color (slots 2..6)
        let err = assign_semantic_ids(&s, &[AttributeVector::from_bits(bits)]).unwrap_err();
        assert!(
            matches!(err, DataError::InvalidAttributes { group: 2, .. }),
            "{err}"
        );
    }

    #[test]
    fn encode_decode_inverse() {
        let s = AttributeSchema::default_desk();
        let settings = vec![1, 1, 3, 0, 1, 0, 2, 1];
        assert_eq!(s.decode(&s.encode(&settings).unwrap()).unwrap(), settings);
    }

    #[test]
    fn rejects_single_value_categorical() {
        let mut s = AttributeSchema::default_desk();
        s.groups[2].kind = GroupKind::Categorical {
            values: vec!["only".into()],
        };
        s.groups[2].colors.truncate(1);
        assert!(matches!(
            s.validate(16, 8),
            Err(DataError::InvalidSchema { group: 2, .. })
        ));
    }
}
