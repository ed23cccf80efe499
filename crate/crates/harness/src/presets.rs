//! Built-in experiment presets.

const PRESETS: &[(&str, &str)] = &[
    ("calibration", include_str!("../presets/calibration.toml")),
    ("reuse_sweep", include_str!("../presets/reuse_sweep.toml")),
    ("beta_sweep", include_str!("../presets/beta_sweep.toml")),
    ("reset_sweep", include_str!("../presets/reset_sweep.toml")),
    ("reward_sweep", include_str!("../presets/reward_sweep.toml")),
    ("difficulty", include_str!("../presets/difficulty.toml")),
    ("full_scale", include_str!("../presets/full_scale.toml")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, src)| *src)
}

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}
