//! Garment design space: nine dimensions, fifty-one attributes.
//!
//! The canonical schema ships as `data/design_space.json` and is compiled into
//! the crate. Dimension order is fixed and determines the one-hot block
//! offsets `[0, 7, 10, 17, 20, 27, 30, 39, 42]`.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DIMENSION_COUNT: usize = 9;
pub const ONE_HOT_LEN: usize = 51;

pub const SCHEMA_VERSION: u32 = 1;

const CANONICAL_JSON: &str = include_str!("../data/design_space.json");

/// Dimension indices in canonical order.
pub mod dim {
    pub const TYPE: usize = 0;
    pub const SLEEVE_LENGTH: usize = 1;
    pub const COLLAR_SHAPE: usize = 2;
    pub const WEARING_STYLE: usize = 3;
    pub const PATTERN_STYLE: usize = 4;
    pub const PATTERN_ARRANGEMENT: usize = 5;
    pub const MATERIAL: usize = 6;
    pub const COLOR_CATEGORY: usize = 7;
    pub const SPECIFIC_COLORS: usize = 8;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    #[serde(default)]
    pub tags: Vec<String>,
    /// Display color, only meaningful for the Specific Colors dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb: Option<[u8; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub attributes: Vec<Attribute>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZoneMode {
    /// Score = share of the brushed area that falls inside the zone.
    Local,
    /// Score = share of the zone covered by the brush (area weighting).
    Global,
}

/// Normalized rectangle `[x_min, y_min, x_max, y_max]` in `[0, 1]` image units.
pub type NormRect = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub dimension: String,
    pub mode: ZoneMode,
    pub weight: f64,
    pub rects: Vec<NormRect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub image_width: u32,
    pub image_height: u32,
    pub zones: Vec<Zone>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawSpace {
    schema_version: u32,
    dimensions: Vec<Dimension>,
    layout: Layout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpace {
    schema_version: u32,
    dimensions: Vec<Dimension>,
    layout: Layout,
    offsets: [usize; DIMENSION_COUNT],
    /// Zone index per dimension, in dimension order.
    zone_of: [usize; DIMENSION_COUNT],
}

impl DesignSpace {
    /// The schema compiled into the crate.
    pub fn canonical() -> &'static DesignSpace {
        static SPACE: OnceLock<DesignSpace> = OnceLock::new();
        SPACE.get_or_init(|| {
            DesignSpace::from_json(CANONICAL_JSON).expect("bundled design_space.json is valid")
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawSpace = serde_json::from_str(text)?;
        Self::validate(raw)
    }

    pub fn to_json(&self) -> String {
        let raw = RawSpace {
            schema_version: self.schema_version,
            dimensions: self.dimensions.clone(),
            layout: self.layout.clone(),
        };
        serde_json::to_string_pretty(&raw).expect("design space serializes")
    }

    fn validate(raw: RawSpace) -> Result<Self> {
        if raw.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported schema_version {}",
                raw.schema_version
            )));
        }
        if raw.dimensions.len() != DIMENSION_COUNT {
            return Err(Error::Schema(format!(
                "expected {DIMENSION_COUNT} dimensions, found {}",
                raw.dimensions.len()
            )));
        }
        let mut offsets = [0usize; DIMENSION_COUNT];
        let mut total = 0;
        for (d, dimension) in raw.dimensions.iter().enumerate() {
            if dimension.attributes.is_empty() {
                return Err(Error::Schema(format!("dimension `{}` is empty", dimension.name)));
            }
            let clash = raw.dimensions[..d]
                .iter()
                .any(|other| other.name.eq_ignore_ascii_case(&dimension.name));
            if clash {
                return Err(Error::Schema(format!("duplicate dimension `{}`", dimension.name)));
            }
            for (a, attribute) in dimension.attributes.iter().enumerate() {
                let dup = dimension.attributes[..a]
                    .iter()
                    .any(|other| other.name.eq_ignore_ascii_case(&attribute.name));
                if dup {
                    return Err(Error::Schema(format!(
                        "duplicate attribute `{}` in `{}`",
                        attribute.name, dimension.name
                    )));
                }
            }
            offsets[d] = total;
            total += dimension.attributes.len();
        }
        if total != ONE_HOT_LEN {
            return Err(Error::Schema(format!(
                "attribute counts sum to {total}, expected {ONE_HOT_LEN}"
            )));
        }

        let mut zone_of = [usize::MAX; DIMENSION_COUNT];
        for (z, zone) in raw.layout.zones.iter().enumerate() {
            let d = raw
                .dimensions
                .iter()
                .position(|dim| dim.name.eq_ignore_ascii_case(&zone.dimension))
                .ok_or_else(|| Error::Schema(format!("zone for unknown dimension `{}`", zone.dimension)))?;
            if zone_of[d] != usize::MAX {
                return Err(Error::Schema(format!("two zones for `{}`", zone.dimension)));
            }
            if !(0.0..=1.0).contains(&zone.weight) {
                return Err(Error::Schema(format!("zone weight {} outside [0,1]", zone.weight)));
            }
            for r in &zone.rects {
                let ok = r.iter().all(|v| (0.0..=1.0).contains(v)) && r[0] < r[2] && r[1] < r[3];
                if !ok {
                    return Err(Error::Schema(format!("bad zone rect {r:?}")));
                }
            }
            if zone.rects.is_empty() {
                return Err(Error::Schema(format!("zone `{}` has no rects", zone.dimension)));
            }
            zone_of[d] = z;
        }
        if let Some(d) = zone_of.iter().position(|&z| z == usize::MAX) {
            return Err(Error::Schema(format!(
                "no layout zone for `{}`",
                raw.dimensions[d].name
            )));
        }
        if raw.layout.image_width == 0 || raw.layout.image_height == 0 {
            return Err(Error::Schema("layout image dims must be positive".into()));
        }

        Ok(Self {
            schema_version: raw.schema_version,
            dimensions: raw.dimensions,
            layout: raw.layout,
            offsets,
            zone_of,
        })
    }

    pub fn schema_version(&self) -> u32 {
        self.schema_version
    }

    pub fn dimensions(&self) -> &[Dimension] {
        &self.dimensions
    }

    pub fn dimension(&self, d: usize) -> &Dimension {
        &self.dimensions[d]
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn zone(&self, d: usize) -> &Zone {
        &self.layout.zones[self.zone_of[d]]
    }

    pub fn offsets(&self) -> &[usize; DIMENSION_COUNT] {
        &self.offsets
    }

    pub fn attribute_count(&self, d: usize) -> usize {
        self.dimensions[d].attributes.len()
    }

    pub fn attribute(&self, id: AttributeId) -> &Attribute {
        &self.dimensions[id.dimension].attributes[id.attribute]
    }

    pub fn attribute_name(&self, id: AttributeId) -> &str {
        &self.attribute(id).name
    }

    pub fn dimension_index(&self, name: &str) -> Option<usize> {
        self.dimensions
            .iter()
            .position(|d| d.name.eq_ignore_ascii_case(name.trim()))
    }

    pub fn find_attribute(&self, d: usize, name: &str) -> Option<AttributeId> {
        self.dimensions[d]
            .attributes
            .iter()
            .position(|a| a.name.eq_ignore_ascii_case(name.trim()))
            .map(|a| AttributeId::new_unchecked(d, a))
    }

    /// Resolves `"Dimension:Attribute"` by name.
    pub fn lookup(&self, qualified: &str) -> Result<AttributeId> {
        let (dim_name, attr_name) = qualified
            .split_once(':')
            .ok_or_else(|| Error::UnknownAttribute(qualified.to_string()))?;
        let d = self
            .dimension_index(dim_name)
            .ok_or_else(|| Error::UnknownDimension(dim_name.to_string()))?;
        self.find_attribute(d, attr_name)
            .ok_or_else(|| Error::UnknownAttribute(qualified.to_string()))
    }

    pub fn qualified_name(&self, id: AttributeId) -> String {
        format!("{}:{}", self.dimensions[id.dimension].name, self.attribute_name(id))
    }

    /// Flat one-hot index of an attribute.
    pub fn flat_index(&self, id: AttributeId) -> usize {
        self.offsets[id.dimension] + id.attribute
    }

    /// All attributes in canonical order.
    pub fn all_attributes(&self) -> impl Iterator<Item = AttributeId> + '_ {
        (0..DIMENSION_COUNT)
            .flat_map(move |d| (0..self.attribute_count(d)).map(move |a| AttributeId::new_unchecked(d, a)))
    }

    /// Attributes carrying `tag`.
    pub fn tagged<'a>(&'a self, tag: &'a str) -> impl Iterator<Item = AttributeId> + 'a {
        self.all_attributes()
            .filter(move |&id| self.attribute(id).tags.iter().any(|t| t.eq_ignore_ascii_case(tag)))
    }
}

/// One attribute within one dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AttributeId {
    pub dimension: usize,
    pub attribute: usize,
}

impl AttributeId {
    pub fn new(dimension: usize, attribute: usize) -> Result<Self> {
        let space = DesignSpace::canonical();
        if dimension >= DIMENSION_COUNT {
            return Err(Error::UnknownDimension(dimension.to_string()));
        }
        if attribute >= space.attribute_count(dimension) {
            return Err(Error::UnknownAttribute(format!("{dimension}.{attribute}")));
        }
        Ok(Self { dimension, attribute })
    }

    pub(crate) const fn new_unchecked(dimension: usize, attribute: usize) -> Self {
        Self { dimension, attribute }
    }

    pub fn is_valid(&self) -> bool {
        self.dimension < DIMENSION_COUNT
            && self.attribute < DesignSpace::canonical().attribute_count(self.dimension)
    }

    pub fn name(&self) -> &'static str {
        DesignSpace::canonical().attribute_name(*self)
    }

    pub fn dimension_name(&self) -> &'static str {
        &DesignSpace::canonical().dimension(self.dimension).name
    }
}

impl fmt::Display for AttributeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.dimension, self.attribute)
    }
}

impl FromStr for AttributeId {
    type Err = Error;

    /// Accepts `"2.3"` (indices) or `"Collar Shape:Round"` (names).
    fn from_str(s: &str) -> Result<Self> {
        if let Some((d, a)) = s.split_once('.') {
            if let (Ok(d), Ok(a)) = (d.trim().parse(), a.trim().parse()) {
                return AttributeId::new(d, a);
            }
        }
        DesignSpace::canonical().lookup(s)
    }
}

/// A complete design entity: one attribute per dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct DesignVector([usize; DIMENSION_COUNT]);

impl DesignVector {
    pub fn new(indices: [usize; DIMENSION_COUNT]) -> Result<Self> {
        let space = DesignSpace::canonical();
        for (d, &a) in indices.iter().enumerate() {
            if a >= space.attribute_count(d) {
                return Err(Error::UnknownAttribute(format!("{d}.{a}")));
            }
        }
        Ok(Self(indices))
    }

    pub fn from_names(names: [&str; DIMENSION_COUNT]) -> Result<Self> {
        let space = DesignSpace::canonical();
        let mut indices = [0; DIMENSION_COUNT];
        for (d, name) in names.iter().enumerate() {
            indices[d] = space
                .find_attribute(d, name)
                .ok_or_else(|| Error::UnknownAttribute(format!("{}:{name}", space.dimension(d).name)))?
                .attribute;
        }
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize; DIMENSION_COUNT] {
        &self.0
    }

    pub fn attribute(&self, d: usize) -> AttributeId {
        AttributeId::new_unchecked(d, self.0[d])
    }

    pub fn attributes(&self) -> impl Iterator<Item = AttributeId> + '_ {
        (0..DIMENSION_COUNT).map(|d| self.attribute(d))
    }

    pub fn contains(&self, id: AttributeId) -> bool {
        id.dimension < DIMENSION_COUNT && self.0[id.dimension] == id.attribute
    }

    pub fn names(&self) -> [&'static str; DIMENSION_COUNT] {
        std::array::from_fn(|d| self.attribute(d).name())
    }

    /// Number of dimensions in which the two vectors differ.
    pub fn differing_dimensions(&self, other: &DesignVector) -> usize {
        self.0.iter().zip(other.0.iter()).filter(|(a, b)| a != b).count()
    }
}

impl TryFrom<Vec<usize>> for DesignVector {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        let arr: [usize; DIMENSION_COUNT] = v
            .try_into()
            .map_err(|v: Vec<usize>| Error::Schema(format!("design vector needs 9 entries, got {}", v.len())))?;
        DesignVector::new(arr)
    }
}

impl From<DesignVector> for Vec<usize> {
    fn from(v: DesignVector) -> Self {
        v.0.to_vec()
    }
}

/// 51-bit one-hot encoding of a [`DesignVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OneHot51([u8; ONE_HOT_LEN]);

impl OneHot51 {
    pub fn bits(&self) -> &[u8; ONE_HOT_LEN] {
        &self.0
    }

    pub fn ones(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| (b == 1).then_some(i))
            .collect()
    }

    /// Inverse of [`encode_one_hot`]. Fails unless every block holds exactly one bit.
    pub fn decode(&self) -> Result<DesignVector> {
        let space = DesignSpace::canonical();
        let mut indices = [0; DIMENSION_COUNT];
        for d in 0..DIMENSION_COUNT {
            let start = space.offsets()[d];
            let block = &self.0[start..start + space.attribute_count(d)];
            let set: Vec<usize> = block
                .iter()
                .enumerate()
                .filter_map(|(i, &b)| (b != 0).then_some(i))
                .collect();
            match set.as_slice() {
                [a] => indices[d] = *a,
                _ => {
                    return Err(Error::Schema(format!(
                        "one-hot block {d} has {} set bits",
                        set.len()
                    )))
                }
            }
        }
        Ok(DesignVector(indices))
    }

    /// Hamming distance between two encodings.
    pub fn hamming(&self, other: &OneHot51) -> usize {
        self.0.iter().zip(other.0.iter()).filter(|(a, b)| a != b).count()
    }
}

pub fn encode_one_hot(v: &DesignVector) -> OneHot51 {
    let space = DesignSpace::canonical();
    let mut bits = [0u8; ONE_HOT_LEN];
    for id in v.attributes() {
        bits[space.flat_index(id)] = 1;
    }
    OneHot51(bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn canonical_shape() {
        let space = DesignSpace::canonical();
        let counts: Vec<usize> = (0..9).map(|d| space.attribute_count(d)).collect();
        assert_eq!(counts, vec![7, 3, 7, 3, 7, 3, 9, 3, 9]);
        assert_eq!(counts.iter().sum::<usize>(), 51);
        assert_eq!(space.offsets(), &[0, 7, 10, 17, 20, 27, 30, 39, 42]);
        let names: Vec<&str> = space.dimensions().iter().map(|d| d.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "Type",
                "Sleeve Length",
                "Collar Shape",
                "Wearing Style",
                "Pattern Style",
                "Pattern Arrangement",
                "Material",
                "Color Category",
                "Specific Colors"
            ]
        );
    }

    #[test]
    fn one_hot_block_starts() {
        let v = DesignVector::new([0; 9]).unwrap();
        let hot = encode_one_hot(&v);
        assert_eq!(hot.bits().len(), 51);
        assert_eq!(hot.ones(), vec![0, 7, 10, 17, 20, 27, 30, 39, 42]);
    }

    #[test]
    fn one_hot_golden_vector() {
        // Hand-computed: T-shirt 0+4, Short 7+1, Round 10+3, Pullover 17+1, Pure 20+0,
        // Focus 27+1, Cotton 30+5, Monochromatic 39+0, Black 42+7.
        let v = DesignVector::from_names([
            "T-shirt",
            "Short",
            "Round",
            "Pullover",
            "Pure",
            "Focus",
            "Cotton",
            "Monochromatic",
            "Black",
        ])
        .unwrap();
        assert_eq!(encode_one_hot(&v).ones(), vec![4, 8, 13, 18, 20, 28, 35, 39, 49]);
    }

    #[test]
    fn one_hot_round_trip_random() {
        let space = DesignSpace::canonical();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let idx: [usize; 9] = std::array::from_fn(|d| rng.gen_range(0..space.attribute_count(d)));
            let v = DesignVector::new(idx).unwrap();
            assert_eq!(encode_one_hot(&v).decode().unwrap(), v);
        }
    }

    #[test]
    fn attribute_parsing() {
        let id: AttributeId = "Collar Shape:V".parse().unwrap();
        assert_eq!(id, AttributeId::new(2, 2).unwrap());
        assert_eq!("2.2".parse::<AttributeId>().unwrap(), id);
        assert!("9.0".parse::<AttributeId>().is_err());
        assert!("Collar Shape:Zigzag".parse::<AttributeId>().is_err());
        // "Hoodie" exists both as a type and as a collar shape.
        assert_eq!("type:hoodie".parse::<AttributeId>().unwrap(), AttributeId::new(0, 5).unwrap());
        assert_eq!(
            "Collar Shape:Hoodie".parse::<AttributeId>().unwrap(),
            AttributeId::new(2, 6).unwrap()
        );
    }

    #[test]
    fn design_vector_rejects_out_of_range() {
        assert!(DesignVector::new([7, 0, 0, 0, 0, 0, 0, 0, 0]).is_err());
        assert!(serde_json::from_str::<DesignVector>("[0,0,0]").is_err());
        let v: DesignVector = serde_json::from_str("[4,1,3,1,0,1,5,0,7]").unwrap();
        assert_eq!(v.attribute(8).name(), "Black");
    }

    #[test]
    fn schema_rejects_bad_files() {
        let mut raw: serde_json::Value = serde_json::from_str(CANONICAL_JSON).unwrap();
        raw["dimensions"][0]["attributes"][1]["name"] = "shirt".into();
        assert!(matches!(
            DesignSpace::from_json(&raw.to_string()),
            Err(Error::Schema(_))
        ));

        let mut raw: serde_json::Value = serde_json::from_str(CANONICAL_JSON).unwrap();
        raw["dimensions"].as_array_mut().unwrap().pop();
        assert!(DesignSpace::from_json(&raw.to_string()).is_err());

        let round = DesignSpace::from_json(&DesignSpace::canonical().to_json()).unwrap();
        assert_eq!(&round, DesignSpace::canonical());
    }

    #[test]
    fn decode_rejects_malformed_blocks() {
        let mut bits = *encode_one_hot(&DesignVector::new([0; 9]).unwrap()).bits();
        bits[1] = 1;
        assert!(OneHot51(bits).decode().is_err());
    }
}
