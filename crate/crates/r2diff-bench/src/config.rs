//! TOML experiment configuration for `sweep`: which datasets, schedules and
//! models to load, and the condition grid to evaluate.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use r2diff_core::{DistanceWeights, FamilyKind, InitMode};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub params: ParamsSection,
    #[serde(rename = "family")]
    pub families: Vec<FamilySection>,
    #[serde(rename = "condition")]
    pub conditions: Vec<ConditionSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    /// Held-out episodes per family, regenerated from the dataset seed.
    pub episodes: usize,
    pub infer_seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamsSection {
    pub w_r: f64,
    pub w_g: f64,
    /// Retrieval rank recorded in report rows (the rank the tuned schedule
    /// was computed with).
    pub rank: usize,
}

impl Default for ParamsSection {
    fn default() -> Self {
        ParamsSection {
            w_r: 0.01,
            w_g: 0.0,
            rank: 1,
        }
    }
}

impl ParamsSection {
    pub fn weights(&self) -> Result<DistanceWeights> {
        Ok(DistanceWeights::new(self.w_r, self.w_g)?)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySection {
    pub name: String,
    pub dataset: PathBuf,
    /// Schedule label -> exported schedule file.
    pub schedules: BTreeMap<String, PathBuf>,
    /// Schedule label -> model checkpoint trained under that schedule.
    pub models: BTreeMap<String, PathBuf>,
}

impl FamilySection {
    pub fn kind(&self) -> Result<FamilyKind> {
        Ok(FamilyKind::from_name(&self.name)?)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSection {
    pub id: String,
    /// rand | ret-ste | ret-mse | ret-cheat
    pub mode: String,
    /// Which schedule label (and matching model) to use.
    pub schedule: String,
    pub n_start: usize,
    /// Overrides params.rank in the report row.
    pub rank: Option<usize>,
}

impl ConditionSection {
    pub fn init_mode(&self) -> Result<InitMode> {
        Ok(InitMode::from_tag(&self.mode)?)
    }
}

impl ExperimentConfig {
    /// Parse a config file, resolving artifact paths relative to its
    /// directory, and validate cross-references.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot open config {}", path.display()))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for fam in &mut cfg.families {
            fam.dataset = base.join(&fam.dataset);
            for p in fam.schedules.values_mut() {
                *p = base.join(&*p);
            }
            for p in fam.models.values_mut() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() || self.conditions.is_empty() {
            bail!("config needs at least one [[family]] and one [[condition]]");
        }
        if self.experiment.episodes == 0 {
            bail!("experiment.episodes must be > 0");
        }
        let mut ids = std::collections::BTreeSet::new();
        for c in &self.conditions {
            if !ids.insert(&c.id) {
                bail!("duplicate condition id '{}'", c.id);
            }
            c.init_mode()
                .with_context(|| format!("condition '{}'", c.id))?;
            for fam in &self.families {
                if !fam.schedules.contains_key(&c.schedule) {
                    bail!(
                        "condition '{}' references schedule '{}' missing from family '{}'",
                        c.id,
                        c.schedule,
                        fam.name
                    );
                }
                if !fam.models.contains_key(&c.schedule) {
                    bail!(
                        "condition '{}' needs a model for schedule '{}' in family '{}'",
                        c.id,
                        c.schedule,
                        fam.name
                    );
                }
            }
        }
        for fam in &self.families {
            fam.kind().with_context(|| format!("family '{}'", fam.name))?;
        }
        self.params.weights()?;
        Ok(())
    }
}
