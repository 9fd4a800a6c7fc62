//! Extrapolation outputs from a synthetic entropy table.

use std::fs;

use han_rdm::oracle::cft_entropy;
use han_rdm::pipeline::{cmd_extrapolate, cmd_report, RunConfig};
use han_rdm::spectral::EntropyOrder;

const CONFIG: &str = r#"
seed = 1
[model]
chain = 8
subsystems = [1, 2]
dtau = [0.4, 0.3, 0.2]
k = [2, 3, 4, 5, 6]
[estimator]
renyi_orders = [2.0]
"#;

fn setup() -> (tempfile::TempDir, RunConfig) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::from_toml(CONFIG).unwrap();
    cfg.paths.reports = dir.path().join("reports");
    fs::create_dir_all(&cfg.paths.reports).unwrap();
    let mut csv = String::from("# synthetic\nl,dtau,k,n,value,error\n");
    for l in [1usize, 2] {
        for n in [1.0, 2.0] {
            for dtau in [0.4, 0.3, 0.2] {
                for k in 2..=6 {
                    let s = 0.4 + 0.1 * l as f64 - 0.05 * n + 0.3 * dtau * dtau - 0.2 * (-0.8 * k as f64).exp();
                    csv.push_str(&format!("{l},{dtau},{k},{n},{s:e},1e-3\n"));
                }
            }
        }
    }
    fs::write(cfg.report("entropies.csv"), csv).unwrap();
    (dir, cfg)
}

#[test]
fn plots_are_well_formed_xml() {
    let (_dir, cfg) = setup();
    let ex = cmd_extrapolate(&cfg).unwrap();
    assert_eq!(ex.fits.len(), 4);
    let mut svgs = 0;
    for entry in fs::read_dir(&cfg.paths.reports).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "svg") {
            let text = fs::read_to_string(&path).unwrap();
            roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            svgs += 1;
        }
    }
    assert_eq!(svgs, 6);
}

#[test]
fn synthetic_limits_are_recovered() {
    let (_dir, cfg) = setup();
    let ex = cmd_extrapolate(&cfg).unwrap();
    for f in &ex.fits {
        let want = 0.4 + 0.1 * f.l as f64 - 0.05 * f.order.as_f64();
        assert!((f.s - want).abs() < 1e-6, "{f:?}");
    }
    assert_eq!(ex.exact.len(), 2);
    let report = cmd_report(&cfg).unwrap();
    assert!(report.contains("von_neumann"));
}

#[test]
fn entropy_vs_l_carries_cft_values() {
    let (_dir, cfg) = setup();
    cmd_extrapolate(&cfg).unwrap();
    let table = fs::read_to_string(cfg.report("entropy_vs_l.csv")).unwrap();
    for line in table.lines().skip(2) {
        let f: Vec<&str> = line.split(',').collect();
        let l: usize = f[0].parse().unwrap();
        let cft: f64 = f[3].parse().unwrap();
        assert!((cft - cft_entropy(8, l, EntropyOrder::VonNeumann, None).unwrap()).abs() < 1e-15);
    }
    let svg = fs::read_to_string(cfg.report("entropy_vs_l.svg")).unwrap();
    assert!(svg.contains("stroke-dasharray") && svg.contains("CFT"));
}
