use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    /// One ellipse, one class.
    Disc,
    /// Outer ellipse (class 0) containing an inner one (class 1).
    Nested,
    /// Irregular radial polygon, one class.
    Blob,
}

impl ObjectKind {
    pub fn num_classes(self) -> usize {
        match self {
            ObjectKind::Nested => 2,
            ObjectKind::Disc | ObjectKind::Blob => 1,
        }
    }
}

/// Closed interval sampled uniformly.
pub type Range = (f64, f64);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeRegime {
    pub kind: ObjectKind,
    /// Equivalent radius as a fraction of the image side.
    pub radius: Range,
    /// Major over minor axis ratio.
    pub elongation: Range,
    /// Orientation of the major axis in radians.
    pub angle: Range,
    /// Maximum offset of the centre from the image centre, as a fraction of the side.
    pub jitter: f64,
    /// Inner radius over outer radius for nested objects.
    #[serde(default = "default_inner")]
    pub inner_ratio: Range,
    /// Amplitude of the radial harmonics of a blob outline.
    #[serde(default)]
    pub irregularity: f64,
    /// Number of small unlabelled distractor discs.
    #[serde(default)]
    pub distractors: (usize, usize),
    /// Distractor radius as a fraction of the side.
    #[serde(default = "default_distractor_radius")]
    pub distractor_radius: Range,
}

fn default_inner() -> Range {
    (0.4, 0.6)
}

fn default_distractor_radius() -> Range {
    (0.03, 0.06)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleRegime {
    /// Base intensity of the background, then of each nested region.
    pub levels: Vec<f64>,
    /// Intensity of distractors relative to the first object level.
    #[serde(default = "one")]
    pub distractor_level: f64,
    pub gain: Range,
    pub bias: Range,
    pub gamma: Range,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Amplitude of a smooth multiplicative field.
    pub bias_field: f64,
    pub texture_amp: f64,
    /// Texture frequency in cycles per image side.
    pub texture_freq: f64,
    /// Gaussian blur of region edges, in pixels.
    #[serde(default)]
    pub blur: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub image_size: usize,
    pub num_classes: usize,
    pub shape: ShapeRegime,
    pub style: StyleRegime,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

fn check_range(name: &str, r: Range, lo: f64, hi: f64) -> Result<()> {
    if !(r.0.is_finite() && r.1.is_finite()) || r.0 > r.1 || r.0 < lo || r.1 > hi {
        return Err(Error::InvalidSpec(format!(
            "{name} range ({}, {}) must be ordered within [{lo}, {hi}]",
            r.0, r.1
        )));
    }
    Ok(())
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("domain name {:?} is not a plain directory name", self.name));
        }
        if self.image_size < 8 {
            return bad(format!("image size {} too small", self.image_size));
        }
        if self.num_classes != self.shape.kind.num_classes() {
            return bad(format!(
                "{:?} objects have {} classes, spec says {}",
                self.shape.kind,
                self.shape.kind.num_classes(),
                self.num_classes
            ));
        }
        if self.train + self.test == 0 {
            return bad("domain has no samples".into());
        }
        let s = &self.shape;
        check_range("radius", s.radius, 0.0, 0.5)?;
        if s.radius.0 <= 0.0 {
            return bad("radius must be positive".into());
        }
        check_range("elongation", s.elongation, 1.0, 20.0)?;
        check_range("angle", s.angle, -std::f64::consts::TAU, std::f64::consts::TAU)?;
        check_range("inner ratio", s.inner_ratio, 0.0, 1.0)?;
        check_range("distractor radius", s.distractor_radius, 0.0, 0.5)?;
        if !(0.0..=0.5).contains(&s.jitter) {
            return bad(format!("jitter {} outside [0, 0.5]", s.jitter));
        }
        if !(0.0..1.0).contains(&s.irregularity) {
            return bad(format!("irregularity {} outside [0, 1)", s.irregularity));
        }
        if s.distractors.0 > s.distractors.1 {
            return bad("distractor count range is reversed".into());
        }
        let st = &self.style;
        if st.levels.len() != self.num_classes + 1 {
            return bad(format!(
                "need {} intensity levels, got {}",
                self.num_classes + 1,
                st.levels.len()
            ));
        }
        check_range("gain", st.gain, 0.0, 100.0)?;
        check_range("bias", st.bias, -100.0, 100.0)?;
        check_range("gamma", st.gamma, 0.0, 100.0)?;
        if st.gamma.0 <= 0.0 {
            return bad("gamma must be positive".into());
        }
        for (n, v) in [
            ("noise", st.noise),
            ("bias field", st.bias_field),
            ("texture amplitude", st.texture_amp),
            ("texture frequency", st.texture_freq),
            ("blur", st.blur),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{n} must be finite and non-negative"));
            }
        }
        if st.bias_field >= 1.0 {
            return bad("bias field amplitude must be below 1".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::default_benchmark;

    #[test]
    fn default_specs_validate() {
        for d in default_benchmark(0).domains() {
            d.validate().unwrap();
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let base = default_benchmark(0).source;
        let mut s = base.clone();
        s.style.gamma = (0.0, 1.0);
        assert!(matches!(s.validate(), Err(Error::InvalidSpec(_))));
        let mut s = base.clone();
        s.style.noise = -0.1;
        assert!(s.validate().is_err());
        let mut s = base.clone();
        s.shape.radius = (0.3, 0.2);
        assert!(s.validate().is_err());
        let mut s = base.clone();
        s.num_classes += 1;
        assert!(s.validate().is_err());
        let mut s = base;
        s.name = "a/b".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let spec = default_benchmark(3).targets[2].spec.clone();
        let text = toml::to_string(&spec).unwrap();
        assert_eq!(DomainSpec::from_toml(&text).unwrap(), spec);
        let extra = format!("bogus = 1\n{text}");
        assert!(matches!(DomainSpec::from_toml(&extra), Err(Error::InvalidSpec(_))));
    }
}
