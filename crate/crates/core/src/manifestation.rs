//! Manifestation vectors: 35 binary clinical attributes with grouped
//! exclusivity semantics.
//!
//! The schema (which attributes exist, how they group, which groups are
//! one-of) is data loaded from a TOML file — see `assets/schema.toml`, the
//! embedded default — so the attribute catalogue can be swapped without
//! touching code. The bit layout is canonical: groups in file order, option
//! bits in option order.

use crate::error::{Error, Result};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::fmt;

/// Total attribute dimensions. The vector representation is a fixed 35-bit
/// word; schemas must lay out exactly this many options.
pub const DIM: usize = 35;

const DEFAULT_SCHEMA_TOML: &str = include_str!("../assets/schema.toml");

// ── vector ──────────────────────────────────────────────────────────────────

/// A 35-dimensional binary attribute vector, packed into one word. Hamming
/// distance is an XOR/popcount; the packed word doubles as the exact
/// deduplication key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ManifestationVector {
    bits: u64,
}

/// Key under which duplicate manifestations collide (bit-exact equality).
pub type DedupKey = u64;

impl fmt::Debug for ManifestationVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ManifestationVector({:035b})", self.bits)
    }
}

impl ManifestationVector {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Build from a dense 0/1 slice; any other length is a contract error.
    pub fn from_bools(bits: &[bool]) -> Result<Self> {
        if bits.len() != DIM {
            return Err(Error::Contract(format!(
                "manifestation vector needs {DIM} dimensions, got {}",
                bits.len()
            )));
        }
        let mut word = 0u64;
        for (i, &b) in bits.iter().enumerate() {
            if b {
                word |= 1 << i;
            }
        }
        Ok(Self { bits: word })
    }

    /// Build from the set of active dimension indices.
    pub fn from_indices(indices: &[usize]) -> Result<Self> {
        let mut word = 0u64;
        for &i in indices {
            if i >= DIM {
                return Err(Error::Contract(format!(
                    "manifestation bit {i} outside 0..{DIM}"
                )));
            }
            word |= 1 << i;
        }
        Ok(Self { bits: word })
    }

    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < DIM);
        self.bits >> i & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        debug_assert!(i < DIM);
        if value {
            self.bits |= 1 << i;
        } else {
            self.bits &= !(1 << i);
        }
    }

    pub fn count_ones(&self) -> u32 {
        self.bits.count_ones()
    }

    /// Number of differing dimensions.
    pub fn hamming(&self, other: &Self) -> u32 {
        (self.bits ^ other.bits).count_ones()
    }

    pub fn dedup_key(&self) -> DedupKey {
        self.bits
    }

    /// Dense f64 0/1 expansion, the encoder input layout.
    pub fn to_dense(&self) -> Vec<f64> {
        (0..DIM).map(|i| if self.get(i) { 1.0 } else { 0.0 }).collect()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..DIM).filter(|&i| self.get(i)).collect()
    }
}

// ── schema ──────────────────────────────────────────────────────────────────

/// One attribute family occupying a contiguous bit range.
#[derive(Debug, Clone)]
pub struct SchemaGroup {
    pub name: String,
    pub options: Vec<String>,
    /// One-of group: at most one active option.
    pub exclusive: bool,
    /// First bit index of this group in the canonical layout.
    pub offset: usize,
}

/// The full attribute catalogue. Constructed from TOML; immutable after.
#[derive(Debug, Clone)]
pub struct ManifestationSchema {
    groups: Vec<SchemaGroup>,
}

#[derive(Deserialize)]
struct SchemaFile {
    group: Vec<SchemaGroupFile>,
}

#[derive(Deserialize)]
struct SchemaGroupFile {
    name: String,
    exclusive: bool,
    options: Vec<String>,
}

/// A violation found by [`ManifestationSchema::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub group: String,
    pub active: Vec<String>,
}

impl ManifestationSchema {
    /// The embedded default schema (mass, calcification and miscellaneous
    /// attribute families totalling 35 dimensions).
    pub fn default_schema() -> Self {
        Self::from_toml_str(DEFAULT_SCHEMA_TOML)
            .expect("embedded schema asset is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let parsed: SchemaFile = toml::from_str(text)
            .map_err(|e| Error::Parse(format!("schema file: {e}")))?;
        let mut groups = Vec::with_capacity(parsed.group.len());
        let mut offset = 0usize;
        for g in parsed.group {
            if g.options.is_empty() {
                return Err(Error::Parse(format!("schema group '{}' has no options", g.name)));
            }
            if groups.iter().any(|x: &SchemaGroup| x.name == g.name) {
                return Err(Error::Parse(format!("duplicate schema group '{}'", g.name)));
            }
            let len = g.options.len();
            groups.push(SchemaGroup {
                name: g.name,
                options: g.options,
                exclusive: g.exclusive,
                offset,
            });
            offset += len;
        }
        if offset != DIM {
            return Err(Error::Parse(format!(
                "schema lays out {offset} dimensions, the vector format requires {DIM}"
            )));
        }
        Ok(Self { groups })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn groups(&self) -> &[SchemaGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&SchemaGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Bit index of `(group, option)`.
    pub fn bit(&self, group: &str, option: &str) -> Option<usize> {
        let g = self.group(group)?;
        let oi = g.options.iter().position(|o| o == option)?;
        Some(g.offset + oi)
    }

    /// Dimension labels in bit order: `(group name, option name)` pairs.
    pub fn dimension_labels(&self) -> Vec<(String, String)> {
        self.groups
            .iter()
            .flat_map(|g| g.options.iter().map(move |o| (g.name.clone(), o.clone())))
            .collect()
    }

    /// Check grouped exclusivity: every violation names the group and its
    /// simultaneously-active options. All-zero groups are legal everywhere.
    pub fn validate(&self, v: &ManifestationVector) -> Vec<Violation> {
        let mut violations = Vec::new();
        for g in &self.groups {
            if !g.exclusive {
                continue;
            }
            let active: Vec<String> = g
                .options
                .iter()
                .enumerate()
                .filter(|(i, _)| v.get(g.offset + i))
                .map(|(_, name)| name.clone())
                .collect();
            if active.len() > 1 {
                violations.push(Violation { group: g.name.clone(), active });
            }
        }
        violations
    }

    /// Parse a structured record — keys are group names, values an option
    /// name (one-of groups) or a list of option names — into a vector.
    /// Unknown groups or options are parse errors naming the offender.
    pub fn parse_record(&self, record: &BTreeMap<String, Vec<String>>) -> Result<ManifestationVector> {
        let mut v = ManifestationVector::zero();
        for (group_name, options) in record {
            let Some(group) = self.group(group_name) else {
                return Err(Error::Parse(format!("unknown manifestation group '{group_name}'")));
            };
            if group.exclusive && options.len() > 1 {
                return Err(Error::Parse(format!(
                    "group '{group_name}' admits one option, record lists {}",
                    options.len()
                )));
            }
            for opt in options {
                let Some(bit) = self.bit(group_name, opt) else {
                    return Err(Error::Parse(format!(
                        "unknown option '{opt}' in group '{group_name}'"
                    )));
                };
                v.set(bit, true);
            }
        }
        Ok(v)
    }

    /// Inverse of [`Self::parse_record`]: group → active option names, with
    /// all-zero groups omitted.
    pub fn serialize_record(&self, v: &ManifestationVector) -> BTreeMap<String, Vec<String>> {
        let mut record = BTreeMap::new();
        for g in &self.groups {
            let active: Vec<String> = g
                .options
                .iter()
                .enumerate()
                .filter(|(i, _)| v.get(g.offset + i))
                .map(|(_, name)| name.clone())
                .collect();
            if !active.is_empty() {
                record.insert(g.name.clone(), active);
            }
        }
        record
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::HashMap;

    fn schema() -> ManifestationSchema {
        ManifestationSchema::default_schema()
    }

    #[test]
    fn default_schema_has_expected_structure() {
        let s = schema();
        assert_eq!(s.groups().len(), 9);
        let sizes: Vec<usize> = s.groups().iter().map(|g| g.options.len()).collect();
        assert_eq!(sizes, vec![4, 4, 3, 3, 3, 3, 3, 3, 9]);
        assert_eq!(s.groups().iter().filter(|g| g.exclusive).count(), 8);
        assert!(!s.group("miscellaneous").unwrap().exclusive);
        assert_eq!(sizes.iter().sum::<usize>(), DIM);
        // Offsets are cumulative in file order.
        assert_eq!(s.group("mass edge").unwrap().offset, 4);
        assert_eq!(s.group("miscellaneous").unwrap().offset, 26);
    }

    #[test]
    fn all_zero_vector_is_valid() {
        assert!(schema().validate(&ManifestationVector::zero()).is_empty());
    }

    #[test]
    fn two_bits_in_one_exclusive_group_is_a_violation() {
        let s = schema();
        let mut v = ManifestationVector::zero();
        v.set(s.bit("mass shape", "irregular").unwrap(), true);
        v.set(s.bit("mass shape", "round").unwrap(), true);
        let violations = s.validate(&v);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].group, "mass shape");
        assert_eq!(violations[0].active, vec!["irregular", "round"]);
    }

    #[test]
    fn multiple_miscellaneous_bits_are_fine() {
        let s = schema();
        let mut v = ManifestationVector::zero();
        v.set(s.bit("miscellaneous", "duct sign").unwrap(), true);
        v.set(s.bit("miscellaneous", "halo sign").unwrap(), true);
        v.set(s.bit("miscellaneous", "nipple retraction").unwrap(), true);
        assert!(s.validate(&v).is_empty());
    }

    #[test]
    fn wrong_length_is_contract_error() {
        assert!(matches!(
            ManifestationVector::from_bools(&[true; 34]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            ManifestationVector::from_bools(&[false; 36]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn hamming_known_cases() {
        let v = ManifestationVector::from_indices(&[0, 1, 2]).unwrap();
        assert_eq!(v.hamming(&v), 0);
        let mut w = v;
        w.set(7, true);
        assert_eq!(v.hamming(&w), 1);
        let a = ManifestationVector::from_indices(&[0, 1, 2]).unwrap();
        let b = ManifestationVector::from_indices(&[3, 4]).unwrap();
        assert_eq!(a.hamming(&b), 5);
    }

    #[test]
    fn dedup_key_collides_exactly_on_equality() {
        let mut rng = rng::root(77);
        let mut seen: HashMap<DedupKey, ManifestationVector> = HashMap::new();
        for _ in 0..1000 {
            let bits: Vec<bool> = (0..DIM).map(|_| rng.gen_bool(0.3)).collect();
            let v = ManifestationVector::from_bools(&bits).unwrap();
            if let Some(prev) = seen.get(&v.dedup_key()) {
                assert_eq!(*prev, v, "key collision across distinct vectors");
            }
            seen.insert(v.dedup_key(), v);
        }
        // Brute-force cross-check: equal keys ⇔ equal vectors.
        let keys: Vec<_> = seen.iter().collect();
        for (i, (ka, va)) in keys.iter().enumerate() {
            for (kb, vb) in &keys[i + 1..] {
                assert_eq!(*ka == *kb, *va == *vb);
            }
        }
    }

    #[test]
    fn parse_record_roundtrip_and_errors() {
        let s = schema();
        let mut record = BTreeMap::new();
        record.insert("mass shape".to_string(), vec!["round".to_string()]);
        let v = s.parse_record(&record).unwrap();
        assert_eq!(v.active_indices(), vec![s.bit("mass shape", "round").unwrap()]);

        // Empty record → all-zero vector.
        let empty = BTreeMap::new();
        assert_eq!(s.parse_record(&empty).unwrap(), ManifestationVector::zero());

        // A record touching every group round-trips.
        let mut full = BTreeMap::new();
        full.insert("mass shape".into(), vec!["irregular".into()]);
        full.insert("mass edge".into(), vec!["spiculated".into()]);
        full.insert("mass density".into(), vec!["high".into()]);
        full.insert("mass size".into(), vec!["2-5cm".into()]);
        full.insert("calcification shape".into(), vec!["branching".into()]);
        full.insert("calcification size".into(), vec!["tiny".into()]);
        full.insert("calcification density".into(), vec!["high".into()]);
        full.insert("calcification distribution".into(), vec!["clustered".into()]);
        full.insert(
            "miscellaneous".into(),
            vec!["duct sign".into(), "abnormal lymph node shadow".into()],
        );
        let v = s.parse_record(&full).unwrap();
        assert_eq!(s.serialize_record(&v), full);

        // Unknown names are parse errors mentioning the offending token.
        let mut bad = BTreeMap::new();
        bad.insert("mass contour".to_string(), vec!["round".to_string()]);
        match s.parse_record(&bad) {
            Err(Error::Parse(msg)) => assert!(msg.contains("mass contour")),
            other => panic!("expected parse error, got {other:?}"),
        }
        let mut bad_opt = BTreeMap::new();
        bad_opt.insert("mass shape".to_string(), vec!["rhomboid".to_string()]);
        match s.parse_record(&bad_opt) {
            Err(Error::Parse(msg)) => assert!(msg.contains("rhomboid")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn schema_requires_exactly_thirty_five_dimensions() {
        let short = r#"
            [[group]]
            name = "only"
            exclusive = false
            options = ["a", "b"]
        "#;
        assert!(matches!(
            ManifestationSchema::from_toml_str(short),
            Err(Error::Parse(_))
        ));
    }

    proptest! {
        #[test]
        fn hamming_is_a_metric(a in 0u64..(1 << DIM), b in 0u64..(1 << DIM), c in 0u64..(1 << DIM)) {
            let va = ManifestationVector { bits: a };
            let vb = ManifestationVector { bits: b };
            let vc = ManifestationVector { bits: c };
            // identity, symmetry, triangle inequality
            prop_assert_eq!(va.hamming(&vb) == 0, va == vb);
            prop_assert_eq!(va.hamming(&vb), vb.hamming(&va));
            prop_assert!(va.hamming(&vc) <= va.hamming(&vb) + vb.hamming(&vc));
        }

        #[test]
        fn serialize_parse_roundtrip(choices in proptest::collection::vec(0usize..1024, 9)) {
            // Build a schema-valid vector constructively: one choice per
            // exclusive group (len = absent), any subset of the free group.
            let s = schema();
            let mut v = ManifestationVector::zero();
            for (g, pick) in s.groups().iter().zip(&choices) {
                if g.exclusive {
                    let slot = pick % (g.options.len() + 1);
                    if slot < g.options.len() {
                        v.set(g.offset + slot, true);
                    }
                } else {
                    for (i, _) in g.options.iter().enumerate() {
                        v.set(g.offset + i, (pick >> i) & 1 == 1);
                    }
                }
            }
            prop_assert!(s.validate(&v).is_empty());
            let rec = s.serialize_record(&v);
            prop_assert_eq!(s.parse_record(&rec).unwrap(), v);
        }
    }
}
