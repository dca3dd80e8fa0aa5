use std::fs;
use std::path::PathBuf;

use distill_lab::distill::DistillVariant;
use distill_lab::oracle::Condition;
use distill_lab_harness::parse_config;

fn configs() -> Vec<PathBuf> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "conf"))
        .collect();
    files.sort();
    files
}

#[test]
fn shipped_configs_parse_and_round_trip() {
    let files = configs();
    assert!(files.len() >= 3, "{files:?}");
    for path in files {
        let text = fs::read_to_string(&path).unwrap();
        let cfg = parse_config(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let again = parse_config(&cfg.to_text()).unwrap();
        assert_eq!(cfg, again, "{}", path.display());
        assert_eq!(cfg.hash(), again.hash());
    }
}

#[test]
fn two_mode_config_matches_the_benchmark() {
    let text =
        fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/two_mode.conf")).unwrap();
    let cfg = parse_config(&text).unwrap();
    assert_eq!(cfg.distill.variants, DistillVariant::ALL.to_vec());
    assert_eq!(cfg.sweep.seeds, 0..100);
    assert_eq!(cfg.condition(), Some(Condition::Label(0)));
    let oracle = cfg.oracle().unwrap();
    let bench = distill_lab::bench::two_mode().unwrap();
    assert_eq!(
        oracle.mixture(Condition::Label(0)).unwrap(),
        bench.mixture(Condition::Label(0)).unwrap()
    );
}

#[test]
fn errors_carry_line_numbers() {
    let text = "[condition.label:0]\ncomponent = 1, 0, 1\n\n[distill]\nsteps = 10\nsteps = 20\nwobble = 1\nlr = fast\n";
    let errs = parse_config(text).unwrap_err();
    let lines: Vec<usize> = errs.0.iter().map(|e| e.line).collect();
    assert_eq!(lines, vec![6, 7, 8]);
    let shown = errs.to_string();
    assert!(shown.contains("line 6: duplicate key `steps`"), "{shown}");
    assert!(shown.contains("line 7: unknown key `wobble`"), "{shown}");
}

#[test]
fn view_conditions_parse() {
    let text = "[condition.view:1:2]\ncomponent = 1, 0, 0, 0.1\n[distill]\ncondition = view:1:2\n";
    let cfg = parse_config(text).unwrap();
    assert_eq!(cfg.condition(), Some(Condition::View { object: 1, view: 2 }));
    assert_eq!(parse_config(&cfg.to_text()).unwrap(), cfg);
}
