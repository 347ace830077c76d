//! One JSON file configures every subcommand through its own section;
//! flags override the file, which overrides the defaults.

use std::path::Path;

use gem_core::eigenmodel::ColorSource;
use gem_core::fit::FitConfig;
use gem_core::refine::RefineConfig;
use gem_core::regressor::RegressorConfig;
use gem_core::render::RenderConfig;
use gem_core::synth::SynthSpec;
use serde::{Deserialize, Serialize};

use crate::{usage, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub distill: DistillConfig,
    pub refine: RefineConfig,
    pub fit: FitConfig,
    pub regress: RegressorConfig,
    pub view: ViewConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct DistillConfig {
    pub components: [usize; 4],
    pub color_source: ColorSource,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            components: [10; 4],
            color_source: ColorSource::Average,
        }
    }
}

/// Rendering settings shared by `render`, `traverse`, `fit` and `serve`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct ViewConfig {
    pub background: [f64; 3],
    /// Image side of the default camera.
    pub image_size: usize,
    pub render: RenderConfig,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            image_size: 256,
            render: RenderConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
    }
}

/// Prints the fully resolved settings of a run to stderr.
pub fn echo(command: &str, resolved: &impl Serialize) {
    let value = serde_json::json!({ "command": command, "config": resolved });
    eprintln!("resolved config: {value}");
}

/// Expands `--components` (one count for all modalities, or four).
pub fn components(values: &[usize]) -> CliResult<[usize; 4]> {
    match values {
        [m] => Ok([*m; 4]),
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        _ => Err(usage(format!("--components takes 1 or 4 counts, got {}", values.len()))),
    }
}

pub fn background(values: &[f64]) -> CliResult<[f64; 3]> {
    match values {
        [r, g, b] if values.iter().all(|v| (0.0..=1.0).contains(v)) => Ok([*r, *g, *b]),
        _ => Err(usage("--background takes three values in [0, 1]")),
    }
}
