//! Frozen outputs of the mask refinement pipeline.
//!
//! Regenerate with `RFEDIT_BLESS=1 cargo test -p rfedit-core --test mask_goldens`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rfedit_core::mask::{mask_refine, Mask, MaskConfig};
use rfedit_core::LatentState;
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
struct Golden {
    delta_v: LatentState,
    config: MaskConfig,
    output: Mask,
}

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mask_goldens.json")
}

fn cases() -> BTreeMap<String, (LatentState, MaskConfig)> {
    let saturation =
        LatentState::grid(6, 6, 3, (0..108).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let degenerate = LatentState::grid(5, 5, 2, vec![0.0; 50]).unwrap();
    let (h, w) = (12, 12);
    let hotspot: Vec<f64> = (0..h * w)
        .flat_map(|s| {
            let (y, x) = (s / w, s % w);
            let base = 0.05 * ((s as f64) * 1.3).sin();
            let hot = if y >= 8 && x >= 8 { 3.0 } else { 0.0 };
            [base + hot, base - 0.5 * hot]
        })
        .collect();
    BTreeMap::from([
        (
            "union_saturation".to_string(),
            (
                saturation,
                MaskConfig::with_base(Mask::filled(6, 6, 1.0).unwrap()),
            ),
        ),
        (
            "degenerate_delta".to_string(),
            (
                degenerate,
                MaskConfig::with_base(Mask::filled(5, 5, 0.0).unwrap()),
            ),
        ),
        (
            "disk_exterior_hotspot".to_string(),
            (
                LatentState::grid(h, w, 2, hotspot).unwrap(),
                MaskConfig::with_base(Mask::disk(h, w, 4.0, 4.0, 2.5)),
            ),
        ),
    ])
}

#[test]
fn goldens_are_bit_exact() {
    if std::env::var_os("RFEDIT_BLESS").is_some() {
        let goldens: BTreeMap<String, Golden> = cases()
            .into_iter()
            .map(|(name, (delta_v, config))| {
                let output = mask_refine(&delta_v, &config).unwrap();
                (
                    name,
                    Golden {
                        delta_v,
                        config,
                        output,
                    },
                )
            })
            .collect();
        std::fs::write(
            fixture_path(),
            serde_json::to_string_pretty(&goldens).unwrap(),
        )
        .unwrap();
    }
    let goldens: BTreeMap<String, Golden> =
        serde_json::from_str(&std::fs::read_to_string(fixture_path()).unwrap()).unwrap();
    assert_eq!(goldens.len(), 3);
    for (name, g) in &goldens {
        let got = mask_refine(&g.delta_v, &g.config).unwrap();
        let bits = |m: &Mask| m.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&got), bits(&g.output), "{name}");
    }
    assert!(goldens["union_saturation"]
        .output
        .values()
        .iter()
        .all(|&v| v == 1.0));
    assert!(goldens["degenerate_delta"]
        .output
        .values()
        .iter()
        .all(|&v| v == 0.5));
}

#[test]
fn hotspot_outside_the_disk_extends_the_mask() {
    let (dv, cfg) = cases().remove("disk_exterior_hotspot").unwrap();
    let out = mask_refine(&dv, &cfg).unwrap();
    let w = out.w();
    for (s, (o, b)) in out.values().iter().zip(cfg.base.values()).enumerate() {
        assert!(o >= b);
        if s / w >= 8 && s % w >= 8 {
            assert!(*o > b + 0.5, "site {s}: {o}");
        }
    }
}
