use anyhow::{Context, Result};

use crate::config::RunConfig;

pub const NAMES: [&str; 5] = ["fig1", "fig2", "fig3", "fig4", "fig5"];

const FIG1: &str = r#"
regime = "lazy"
seed = 1
output_dir = "fig1"

[grid]
step = 0.05
steps = 400

[model]
gammas = [0.05]
activation = "relu"
input_dim = 5
points = [10]

[solver]
mc_samples = 100000

[ensemble]
size = 500
widths = [100]

[thresholds]
gate = ["nvar_train"]
"#;

const FIG2: &str = r#"
regime = "two_layer"
seed = 3
output_dir = "fig2"

[grid]
step = 0.05
steps = 120

[model]
gammas = [0.5, 1.0, 2.0]
activation = "tanh"
test_overlap = 0.5

[ensemble]
size = 1000
widths = [256]

[thresholds]
gate = ["nvar_delta", "nvar_f_star", "nvar_k"]
"#;

// the window covers two decades of decay of the loss for the largest coupling
const FIG3: &str = r#"
regime = "whitened"
seed = 3
output_dir = "fig3"

[grid]
step = 0.05
steps = 61

[model]
gammas = [0.5, 2.0]
points = [2, 8, 32, 128]

[ensemble]
size = 500
widths = [256]

[thresholds]
max_abs_z = inf
min_pass_fraction = 0.0
window = [0.0, 0.75]
max_relative_deviation = 0.10
gate = ["loss"]
"#;

const FIG4: &str = r#"
regime = "deep_linear"
seed = 9
output_dir = "fig4"

[grid]
step = 0.025
steps = 24

[model]
gammas = [0.5, 1.0, 2.0]
depth = 4

[ensemble]
size = 500
widths = [512]

[thresholds]
gate = ["nvar_delta", "nvar_h1", "nvar_h2", "nvar_h3"]
"#;

const FIG5: &str = r#"
regime = "eos"
seed = 5
output_dir = "fig5"

[grid]
step = 0.2
steps = 60

[model]
gammas = [1.0, 3.0, 6.0]

[ensemble]
size = 500
widths = [500]

[thresholds]
max_abs_z = inf
min_pass_fraction = 0.0
max_relative_deviation = 0.05
gate = ["mean_k"]
"#;

pub fn preset_toml(name: &str) -> Option<&'static str> {
    match name {
        "fig1" => Some(FIG1),
        "fig2" => Some(FIG2),
        "fig3" => Some(FIG3),
        "fig4" => Some(FIG4),
        "fig5" => Some(FIG5),
        _ => None,
    }
}

pub fn preset(name: &str) -> Result<RunConfig> {
    let text = preset_toml(name).with_context(|| format!("unknown preset {name:?}, expected one of {}", NAMES.join(", ")))?;
    RunConfig::from_toml(text).with_context(|| format!("preset {name}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses() {
        for name in NAMES {
            let cfg = preset(name).unwrap();
            assert_eq!(cfg.output_dir, name);
        }
        assert!(preset("fig9").is_err());
    }
}
