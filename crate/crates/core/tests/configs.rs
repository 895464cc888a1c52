use std::path::PathBuf;

use hsiman_core::kv::KvText;
use hsiman_core::network::ManConfig;
use hsiman_core::trainer::TrainConfig;

fn config_text(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn variant_files_match_builtin_widths() {
    for (file, name) in [("man_tiny.kv", "tiny"), ("man_s.kv", "S"), ("man_m.kv", "M"), ("man_l.kv", "L")] {
        let expected = ManConfig::variant(name, 31).unwrap();
        let parsed = ManConfig::from_kv(&KvText::parse(&config_text(file)).unwrap()).unwrap();
        assert_eq!(parsed, expected, "{file} should read\n{}", expected.to_kv());
    }
}

#[test]
fn desk_schedule_file_matches_builtin() {
    let expected = TrainConfig::desk_scale();
    let parsed = TrainConfig::from_kv(&KvText::parse(&config_text("train_desk.kv")).unwrap()).unwrap();
    assert_eq!(parsed, expected, "train_desk.kv should read\n{}", expected.to_kv());
}
