//! Ordinal skintone scales, the five-way grouping used in reports, and the
//! reference palettes that anchor both.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScaleError {
    #[error("scale index {index} outside 1..={num_scales}")]
    OutOfRange { index: u8, num_scales: u8 },
    #[error("palette must list at least two scales, got {0}")]
    TooFewScales(usize),
    #[error("palette is not ordered light to dark: scale {0} is lighter than scale {1}")]
    NotLightToDark(usize, usize),
    #[error("invalid palette line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("reading palette: {0}")]
    Io(#[from] std::io::Error),
}

/// A 1-based position on an ordinal light-to-dark scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SkinToneScale(u8);

impl SkinToneScale {
    pub fn new(index: u8, num_scales: u8) -> Result<Self, ScaleError> {
        if index == 0 || index > num_scales {
            return Err(ScaleError::OutOfRange { index, num_scales });
        }
        Ok(Self(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    /// Zero-based position, for indexing bins and logits.
    pub fn offset(self) -> usize {
        usize::from(self.0 - 1)
    }

    pub fn from_offset(offset: usize) -> Self {
        Self(offset as u8 + 1)
    }

    pub fn distance(self, other: Self) -> u8 {
        self.0.abs_diff(other.0)
    }
}

impl fmt::Display for SkinToneScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The five reporting groups over the 10-point Monk scale, two scales each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SkinToneGroup {
    Light,
    Yellow,
    Tan,
    Brown,
    Dark,
}

impl SkinToneGroup {
    pub const ALL: [SkinToneGroup; 5] = [
        SkinToneGroup::Light,
        SkinToneGroup::Yellow,
        SkinToneGroup::Tan,
        SkinToneGroup::Brown,
        SkinToneGroup::Dark,
    ];

    /// Monk 1-2 Light, 3-4 Yellow, 5-6 Tan, 7-8 Brown, 9-10 Dark.
    pub fn from_monk(scale: SkinToneScale) -> Result<Self, ScaleError> {
        match scale.index() {
            1 | 2 => Ok(Self::Light),
            3 | 4 => Ok(Self::Yellow),
            5 | 6 => Ok(Self::Tan),
            7 | 8 => Ok(Self::Brown),
            9 | 10 => Ok(Self::Dark),
            index => Err(ScaleError::OutOfRange { index, num_scales: 10 }),
        }
    }

    pub fn position(self) -> usize {
        self as usize
    }

    /// The two Monk scales covered by the group.
    pub fn monk_scales(self) -> [u8; 2] {
        let lo = self.position() as u8 * 2 + 1;
        [lo, lo + 1]
    }

    /// Midpoint of the group's Monk range, used as the expected scale when a
    /// prompt only names the group.
    pub fn midpoint(self) -> f64 {
        let [lo, hi] = self.monk_scales();
        (f64::from(lo) + f64::from(hi)) / 2.0
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Light => "Light",
            Self::Yellow => "Yellow",
            Self::Tan => "Tan",
            Self::Brown => "Brown",
            Self::Dark => "Dark",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for SkinToneGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub type Rgb = [u8; 3];

/// BT.601 luma of an RGB triple.
pub fn luma(rgb: Rgb) -> f64 {
    0.299 * f64::from(rgb[0]) + 0.587 * f64::from(rgb[1]) + 0.114 * f64::from(rgb[2])
}

/// Reference colors, one per scale, ordered light to dark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalePalette {
    names: Vec<String>,
    colors: Vec<Rgb>,
}

/// Slack allowed when checking that luma does not increase from one scale to
/// the next. The published Monk swatch for scale 3 is 1.7 luma units lighter
/// than scale 2.
pub const LUMA_TOLERANCE: f64 = 2.0;

const MONK_HEX: [&str; 10] = [
    "f6ede4", "f3e7db", "f7ead0", "eadaba", "d7bd96", "a07e56", "825c43", "604134", "3a312a",
    "292420",
];

impl ScalePalette {
    pub fn new(names: Vec<String>, colors: Vec<Rgb>) -> Result<Self, ScaleError> {
        if colors.len() < 2 || names.len() != colors.len() {
            return Err(ScaleError::TooFewScales(colors.len().min(names.len())));
        }
        for i in 1..colors.len() {
            if luma(colors[i]) > luma(colors[i - 1]) + LUMA_TOLERANCE {
                return Err(ScaleError::NotLightToDark(i + 1, i));
            }
        }
        Ok(Self { names, colors })
    }

    /// The published Monk Skin Tone reference swatches.
    pub fn monk() -> Self {
        let colors = MONK_HEX.iter().map(|h| parse_hex(h).expect("static hex")).collect();
        let names = (1..=10).map(|i| format!("monk {i:02}")).collect();
        Self { names, colors }
    }

    /// Three-class white / brown / black palette. Each reference is the mean of
    /// the Monk swatches the class spans (1-3, 4-7, 8-10).
    pub fn three_class() -> Self {
        let monk = Self::monk();
        let mean = |range: std::ops::RangeInclusive<usize>| {
            let n = range.clone().count() as f64;
            let mut acc = [0.0f64; 3];
            for i in range {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += f64::from(monk.colors[i - 1][c]);
                }
            }
            acc.map(|v| (v / n).round() as u8)
        };
        Self {
            names: vec!["white".into(), "brown".into(), "black".into()],
            colors: vec![mean(1..=3), mean(4..=7), mean(8..=10)],
        }
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn num_scales(&self) -> u8 {
        self.colors.len() as u8
    }

    pub fn colors(&self) -> &[Rgb] {
        &self.colors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn color(&self, scale: SkinToneScale) -> Rgb {
        self.colors[scale.offset()]
    }

    /// Nearest reference color in RGB Euclidean distance; ties go to the
    /// lighter (lower) scale.
    pub fn nearest(&self, rgb: [f64; 3]) -> SkinToneScale {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.colors.iter().enumerate() {
            let d: f64 = (0..3).map(|k| (rgb[k] - f64::from(c[k])).powi(2)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        SkinToneScale::from_offset(best)
    }

    /// Parses the palette config: one `name = #rrggbb` entry per line, light
    /// to dark. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, ScaleError> {
        let mut names = Vec::new();
        let mut colors = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, hex) = line.split_once('=').ok_or_else(|| ScaleError::Parse {
                line: i + 1,
                reason: "expected `name = #rrggbb`".into(),
            })?;
            let hex = hex.trim().trim_start_matches('#');
            let rgb = parse_hex(hex).ok_or_else(|| ScaleError::Parse {
                line: i + 1,
                reason: format!("bad hex color {hex:?}"),
            })?;
            names.push(name.trim().to_string());
            colors.push(rgb);
        }
        Self::new(names, colors)
    }

    pub fn load(path: &Path) -> Result<Self, ScaleError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_config_string(&self) -> String {
        let mut out = String::from("# scale reference colors, light to dark\n");
        for (name, c) in self.names.iter().zip(&self.colors) {
            out.push_str(&format!("{name} = #{:02x}{:02x}{:02x}\n", c[0], c[1], c[2]));
        }
        out
    }
}

fn parse_hex(hex: &str) -> Option<Rgb> {
    if hex.len() != 6 {
        return None;
    }
    let v = u32::from_str_radix(hex, 16).ok()?;
    Some([(v >> 16) as u8, (v >> 8) as u8, v as u8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_mapping_is_total_over_monk() {
        let expected = [
            SkinToneGroup::Light,
            SkinToneGroup::Light,
            SkinToneGroup::Yellow,
            SkinToneGroup::Yellow,
            SkinToneGroup::Tan,
            SkinToneGroup::Tan,
            SkinToneGroup::Brown,
            SkinToneGroup::Brown,
            SkinToneGroup::Dark,
            SkinToneGroup::Dark,
        ];
        for (i, g) in expected.iter().enumerate() {
            let s = SkinToneScale::new(i as u8 + 1, 10).unwrap();
            assert_eq!(SkinToneGroup::from_monk(s).unwrap(), *g);
            assert!(g.monk_scales().contains(&s.index()));
        }
        assert_eq!(SkinToneGroup::Dark.midpoint(), 9.5);
        assert_eq!(SkinToneGroup::Light.midpoint(), 1.5);
    }

    #[test]
    fn scale_bounds() {
        assert!(SkinToneScale::new(0, 10).is_err());
        assert!(SkinToneScale::new(11, 10).is_err());
        assert_eq!(SkinToneScale::new(3, 3).unwrap().offset(), 2);
    }

    #[test]
    fn monk_palette_is_light_to_dark() {
        let p = ScalePalette::monk();
        assert_eq!(p.len(), 10);
        assert!(ScalePalette::new(p.names().to_vec(), p.colors().to_vec()).is_ok());
        let three = ScalePalette::three_class();
        assert!(ScalePalette::new(three.names().to_vec(), three.colors().to_vec()).is_ok());
    }

    #[test]
    fn palette_config_round_trip() {
        let p = ScalePalette::monk();
        let parsed = ScalePalette::parse(&p.to_config_string()).unwrap();
        assert_eq!(parsed, p);
        assert!(ScalePalette::parse("a = #000000\nb = #ffffff\n").is_err());
        assert!(ScalePalette::parse("a = #zzzzzz\n").is_err());
    }

    #[test]
    fn nearest_breaks_ties_low() {
        let p = ScalePalette::new(
            vec!["a".into(), "b".into()],
            vec![[200, 200, 200], [100, 100, 100]],
        )
        .unwrap();
        assert_eq!(p.nearest([150.0, 150.0, 150.0]).index(), 1);
        assert_eq!(p.nearest([149.0, 150.0, 150.0]).index(), 2);
    }
}
