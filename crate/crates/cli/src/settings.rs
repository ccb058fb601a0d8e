//! All configurable parameters of the CLI in one tree, so one config file
//! can drive every subcommand. Pipeline keys sit at the top level
//! (`reg.steps_per_level`, `seg.epochs`, `style`), phantom keys under
//! `phantom.` and `family.`.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use mirrorseg::config::{apply_pairs, parse_pairs};
use mirrorseg::phantom::{FamilySpec, PhantomSpec};
use mirrorseg::pipeline::PipelineConfig;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Settings {
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
    pub phantom: PhantomSpec,
    pub family: FamilySpec,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let base = Settings::default();
        let Some(path) = path else { return Ok(base) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let pairs = parse_pairs(&text)?;
        Ok(apply_pairs(&base, &pairs).with_context(|| format!("applying config {}", path.display()))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_and_top_level_keys() {
        let pairs = parse_pairs("reg.steps_per_level = 7\nstyle = ist\nphantom.dims.nx = 20\nfamily.test = 1\n").unwrap();
        let s: Settings = apply_pairs(&Settings::default(), &pairs).unwrap();
        assert_eq!(s.pipeline.reg.steps_per_level, 7);
        assert_eq!(s.pipeline.style, mirrorseg::pipeline::StyleMode::Ist);
        assert_eq!(s.phantom.dims.nx, 20);
        assert_eq!(s.family.test, 1);
    }
}
