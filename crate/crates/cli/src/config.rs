//! Pipeline configuration file: one TOML document with a section per
//! subcommand. Command-line flags override file values.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use vessel::dataset::ConditionSampling;
use vessel::mms::MmsSpec;
use vessel::objective::Variant;
use vessel::tracer::TracerConfig;
use vessel::trainer::{StudyConfig, TrainConfig};
use vessel::{DomainBounds, OperatingCondition};

use crate::Usage;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub bounds: DomainBounds,
    pub data: DataSection,
    pub train: TrainConfig,
    pub study: StudySection,
    pub eval: EvalSection,
    pub tracer: TracerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub conditions: usize,
    pub points: usize,
    pub seed: u64,
    pub sampling: ConditionSampling,
    pub spec: MmsSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            conditions: 24,
            points: 10_000,
            seed: 7,
            sampling: ConditionSampling::LatinHypercube,
            spec: MmsSpec::default(),
        }
    }
}

/// Study grid; the per-run training settings come from `[train]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub reserve: Option<OperatingCondition>,
    pub residual_test_points: usize,
    pub workers: usize,
}

impl Default for StudySection {
    fn default() -> Self {
        let d = StudyConfig::default();
        Self {
            sizes: d.sizes,
            seeds: d.seeds,
            variants: d.variants,
            reserve: d.reserve,
            residual_test_points: d.residual_test_points,
            workers: d.workers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub residual_points: usize,
    pub seed: u64,
    pub profile_r: f64,
    pub profile_theta: f64,
    pub profile_points: usize,
    /// Neighbours for inverse-distance reference interpolation.
    pub reference_k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            residual_points: 5000,
            seed: 0,
            profile_r: 0.5,
            profile_theta: 0.0,
            profile_points: 101,
            reference_k: 8,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| Usage(format!("config {}: {e}", path.display())).into())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn study_config(&self) -> StudyConfig {
        StudyConfig {
            sizes: self.study.sizes.clone(),
            seeds: self.study.seeds.clone(),
            variants: self.study.variants.clone(),
            train: self.train.clone(),
            reserve: self.study.reserve,
            residual_test_points: self.study.residual_test_points,
            workers: self.study.workers,
        }
    }

    /// Range checks that do not depend on any input file.
    pub fn validate(&self) -> anyhow::Result<()> {
        let usage = |e: vessel::Error| anyhow::Error::from(Usage(e.to_string()));
        self.bounds.validate().map_err(usage)?;
        self.data.spec.validate(&self.bounds).map_err(usage)?;
        self.train.validate().map_err(usage)?;
        if self.data.conditions == 0 || self.data.points == 0 {
            return Err(Usage("data.conditions and data.points must be positive".into()).into());
        }
        if let Some(c) = &self.study.reserve {
            self.bounds.check_condition(c).map_err(usage)?;
        }
        if self.eval.residual_points == 0
            || self.eval.profile_points < 2
            || self.eval.reference_k == 0
        {
            return Err(Usage(
                "eval needs residual_points > 0, profile_points >= 2 and reference_k > 0".into(),
            )
            .into());
        }
        Ok(())
    }
}
