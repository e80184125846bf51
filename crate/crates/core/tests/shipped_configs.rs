//! The JSON documents under `configs/` are generated from the preset
//! builders; these checks keep them in sync.

use std::path::{Path, PathBuf};

use dcmg::{presets, MicrogridConfig};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> MicrogridConfig {
    MicrogridConfig::from_path(&configs_dir().join(name)).expect("shipped config parses")
}

#[test]
fn shipped_configs_match_presets() {
    assert_eq!(load("two_node.json"), presets::two_node());
    assert_eq!(load("four_ring.json"), presets::four_ring());
    assert_eq!(load("six_dgu_scenario.json"), presets::six_dgu_scenario());
    assert_eq!(
        load("six_dgu_collapse.json"),
        presets::six_dgu_collapse_base().scale_line_resistances(120.0)
    );
}

/// Maintenance helper: rewrite the shipped configs from the presets.
/// `cargo test -p dcmg --test shipped_configs regenerate -- --ignored`
#[test]
#[ignore]
fn regenerate() {
    for (name, config) in [
        ("two_node.json", presets::two_node()),
        ("four_ring.json", presets::four_ring()),
        ("six_dgu_scenario.json", presets::six_dgu_scenario()),
        (
            "six_dgu_collapse.json",
            presets::six_dgu_collapse_base().scale_line_resistances(120.0),
        ),
    ] {
        let text = config.to_json().unwrap();
        std::fs::write(configs_dir().join(name), text + "\n").unwrap();
    }
}

#[test]
fn shipped_configs_round_trip() {
    for name in [
        "two_node.json",
        "four_ring.json",
        "six_dgu_scenario.json",
        "six_dgu_collapse.json",
    ] {
        let config = load(name);
        let text = config.to_json().unwrap();
        assert_eq!(MicrogridConfig::from_json(&text).unwrap(), config, "{name}");
    }
}
