//! Synthetic multi-domain segmentation benchmark with separate style and
//! shape shift axes, plus Dice / HD95 and source pretraining.

mod generate;
pub mod io;
mod metrics;
mod pretrain;
mod spec;

pub use generate::{
    batch_images, batch_targets, dequantize, generate_domain, generate_sample, normalize, quantize, sub_seed, Dataset,
    LabeledSample, Split,
};
pub use metrics::{dice, hd95, mean_std, percentile, squared_edt, Mask, MetricResult};
pub use pretrain::{
    augment_sample, class_priors, evaluate_model, predict_masks, pretrain_source, supervised_loss, AugmentConfig,
    EpochLog, PretrainConfig, PretrainOutcome,
};
pub use spec::{DomainSpec, ObjectKind, Range, ShapeRegime, StyleRegime};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shift {
    Style,
    Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetDomain {
    pub shift: Shift,
    pub spec: DomainSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub source: DomainSpec,
    /// Ordered by increasing severity within each shift kind.
    pub targets: Vec<TargetDomain>,
}

impl BenchmarkSpec {
    pub fn domains(&self) -> impl Iterator<Item = &DomainSpec> {
        std::iter::once(&self.source).chain(self.targets.iter().map(|t| &t.spec))
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = std::collections::BTreeSet::new();
        for d in self.domains() {
            d.validate()?;
            if !names.insert(d.name.as_str()) {
                return Err(Error::InvalidSpec(format!("duplicate domain {}", d.name)));
            }
            if d.image_size != self.source.image_size || d.num_classes != self.source.num_classes {
                return Err(Error::InvalidSpec(format!(
                    "{} differs from the source in size or classes",
                    d.name
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidSpec(e.to_string()))
    }

    /// The last target of the given kind.
    pub fn strongest(&self, shift: Shift) -> Option<&DomainSpec> {
        self.targets.iter().rev().find(|t| t.shift == shift).map(|t| &t.spec)
    }
}

fn source_spec(seed: u64) -> DomainSpec {
    DomainSpec {
        name: "source".into(),
        image_size: 64,
        num_classes: 2,
        shape: ShapeRegime {
            kind: ObjectKind::Nested,
            radius: (0.2, 0.26),
            elongation: (1.0, 1.25),
            angle: (-0.3, 0.3),
            jitter: 0.06,
            inner_ratio: (0.45, 0.6),
            irregularity: 0.0,
            distractors: (1, 3),
            distractor_radius: (0.03, 0.06),
        },
        style: StyleRegime {
            levels: vec![0.25, 0.55, 0.8],
            distractor_level: 1.0,
            gain: (0.95, 1.05),
            bias: (-0.03, 0.03),
            gamma: (0.9, 1.1),
            noise: 0.04,
            bias_field: 0.1,
            texture_amp: 0.0,
            texture_freq: 6.0,
            blur: 1.0,
        },
        train: 40,
        test: 16,
        seed,
    }
}

/// One source and five targets: two style-dominant shifts, then three shape
/// shifts of increasing severity that also carry a mild style change.
pub fn default_benchmark(seed: u64) -> BenchmarkSpec {
    let source = source_spec(seed);
    let target = |name: &str, k: u64| DomainSpec {
        name: name.into(),
        seed: seed.wrapping_add(1000 * k),
        ..source.clone()
    };
    let mild_style = |mut d: DomainSpec| {
        d.style.noise = 0.06;
        d.style.bias_field = 0.2;
        d
    };

    let mut texture = target("style-texture", 1);
    texture.style.texture_amp = 0.06;
    texture.style.texture_freq = 5.0;
    texture.style.noise = 0.05;

    let mut contrast = target("style-contrast", 2);
    contrast.style.levels = vec![0.28, 0.53, 0.74];
    contrast.style.gamma = (1.3, 1.5);
    contrast.style.bias_field = 0.2;
    contrast.style.noise = 0.06;

    let mut mild = mild_style(target("shape-mild", 3));
    mild.shape.elongation = (2.3, 2.8);
    mild.shape.radius = (0.16, 0.22);

    let mut moderate = mild_style(target("shape-moderate", 4));
    moderate.shape.elongation = (2.7, 3.3);
    moderate.shape.radius = (0.14, 0.2);
    moderate.shape.jitter = 0.14;

    let mut severe = mild_style(target("shape-severe", 5));
    severe.shape.elongation = (3.4, 4.2);
    severe.shape.radius = (0.12, 0.17);
    severe.shape.jitter = 0.16;
    severe.shape.inner_ratio = (0.3, 0.5);

    BenchmarkSpec {
        source,
        targets: vec![
            TargetDomain {
                shift: Shift::Style,
                spec: texture,
            },
            TargetDomain {
                shift: Shift::Style,
                spec: contrast,
            },
            TargetDomain {
                shift: Shift::Shape,
                spec: mild,
            },
            TargetDomain {
                shift: Shift::Shape,
                spec: moderate,
            },
            TargetDomain {
                shift: Shift::Shape,
                spec: severe,
            },
        ],
    }
}
