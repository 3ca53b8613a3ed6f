use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use epicorr::panel::{load_panel, save_panel, LoadOptions};
use epicorr::pipeline::{
    run_from_matrices, run_pipeline, PipelineConfig, RunManifest, MANIFEST_FILE, PARTIAL_MARKER,
};
use epicorr::synth::{synth_panel, total_incidence, SynthConfig};
use epicorr::Error;

fn bundled() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic_panel.csv")
}

/// Full-size panel, light clustering and ensemble settings.
fn quick_config(out: &Path) -> PipelineConfig {
    PipelineConfig {
        input: bundled(),
        seed: 3,
        n_restarts: 20,
        wishart_samples: 50,
        output_dir: out.to_path_buf(),
        ..PipelineConfig::default()
    }
}

fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

fn count(manifest: &RunManifest, stage: &str, prefix: &str) -> usize {
    manifest.stage(stage).map_or(0, |s| {
        s.outputs.iter().filter(|p| p.starts_with(prefix)).count()
    })
}

#[test]
fn bundled_panel_is_the_default_synthetic_panel() {
    let loaded = load_panel(bundled(), &LoadOptions::default()).unwrap();
    assert_eq!(loaded, synth_panel(&SynthConfig::default()).unwrap());
    assert_eq!((loaded.n_regions(), loaded.n_days()), (32, 1021));
}

#[test]
fn default_run_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let manifest = run_pipeline(&quick_config(&out)).unwrap();

    assert_eq!(manifest.summary.n_epochs, 62);
    assert_eq!(manifest.summary.n_returns, 1020);
    assert_eq!(manifest.summary.k, 4);
    assert_eq!(manifest.summary.n_spectra, 4);
    assert_eq!(count(&manifest, "epochs", "04_epochs/epoch_"), 62);
    assert_eq!(count(&manifest, "figures", "figures/fig3_"), 62);
    assert_eq!(count(&manifest, "figures", "figures/fig4_"), 4);
    assert_eq!(count(&manifest, "figures", "figures/fig6_"), 4);
    assert_eq!(count(&manifest, "figures", "figures/fig1_"), 32);
    assert!(!out.join(PARTIAL_MARKER).exists());

    let on_disk: RunManifest =
        serde_json::from_slice(&fs::read(out.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk.stages, manifest.stages);
    assert_eq!(on_disk.config, manifest.config);
    assert!(on_disk.timings.is_empty());
    assert_eq!(manifest.timings.len(), 7);
    for stage in &manifest.stages {
        for file in &stage.outputs {
            assert!(out.join(file).is_file(), "{file} listed but missing");
        }
    }

    let symbolic = fs::read_to_string(out.join("06_symbolic/symbolic_dynamics.csv")).unwrap();
    let lines: Vec<&str> = symbolic.lines().collect();
    assert_eq!(lines.len(), 63);
    assert_eq!(lines[0], "Epoch,Cluster 1,Cluster 2,Cluster 3,Cluster 4");
    assert!(lines[1].starts_with("t=0-15 days,"));
    assert!(lines[62].starts_with("t=976-991 days,"));

    // The config echoed in the manifest reproduces the config.
    let mut again = PipelineConfig::default();
    for (k, v) in &manifest.config {
        again.set(k, v).unwrap();
    }
    assert_eq!(again, quick_config(&out));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config(&dir.path().join("run"));
    run_pipeline(&config).unwrap();
    let first = read_tree(&config.output_dir);
    fs::remove_dir_all(&config.output_dir).unwrap();
    run_pipeline(&config).unwrap();
    assert_eq!(first, read_tree(&config.output_dir));
}

#[test]
fn window_longer_than_series_fails_at_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = PipelineConfig {
        window: 5000,
        overlap: 10,
        ..quick_config(&out)
    };
    let err = run_pipeline(&config).unwrap_err();
    assert_eq!(err.stage(), Some("epochs"));
    let Error::Stage { source, .. } = &err else {
        unreachable!()
    };
    assert!(matches!(**source, Error::Plan(_)));

    let marker = fs::read_to_string(out.join(PARTIAL_MARKER)).unwrap();
    assert!(marker.contains("epochs"));
    // Earlier stages' outputs are kept.
    assert!(out.join("03_returns/returns.csv").is_file());
    assert!(!out.join(MANIFEST_FILE).exists());
}

#[test]
fn missing_input_fails_at_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let config = PipelineConfig {
        input: dir.path().join("nope.csv"),
        ..quick_config(&dir.path().join("run"))
    };
    assert_eq!(run_pipeline(&config).unwrap_err().stage(), Some("ingest"));
}

#[test]
fn downstream_stages_rerun_from_saved_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let full = quick_config(&dir.path().join("full"));
    run_pipeline(&full).unwrap();
    let original = read_tree(&full.output_dir);
    let matrices = full.output_dir.join("04_epochs/matrices.json");
    let clustering = full.output_dir.join("05_clustering/clustering.json");

    let downstream = |tree: &BTreeMap<PathBuf, Vec<u8>>| -> BTreeMap<PathBuf, Vec<u8>> {
        tree.iter()
            .filter(|(p, _)| {
                let p = p.to_string_lossy();
                p.starts_with("05_")
                    || p.starts_with("06_")
                    || p.starts_with("07_")
                    || p.contains("fig5")
                    || p.contains("fig6")
            })
            .map(|(p, b)| (p.clone(), b.clone()))
            .collect()
    };

    for saved in [None, Some(clustering.as_path())] {
        let resumed = PipelineConfig {
            output_dir: dir.path().join(if saved.is_some() {
                "resume_b"
            } else {
                "resume_a"
            }),
            ..full.clone()
        };
        let manifest = run_from_matrices(&resumed, &matrices, saved).unwrap();
        assert_eq!(manifest.summary.n_epochs, 62);
        let mut tree = downstream(&read_tree(&resumed.output_dir));
        let mut expected = downstream(&original);
        if saved.is_some() {
            // A reused clustering is read, not rewritten.
            expected.retain(|p, _| !p.starts_with("05_clustering"));
        }
        // Centroid heatmaps carry region names only in the full run.
        tree.retain(|p, _| !p.to_string_lossy().contains("fig4"));
        assert_eq!(tree, expected);
    }
}

#[test]
fn every_config_field_shows_in_the_echo() {
    let base = PipelineConfig::default().echo();
    let changes = [
        ("input", "other.csv"),
        ("layout", "regions_as_rows"),
        ("skip_columns", "pop"),
        ("drop_regions", "Total"),
        ("clip_negative_to_zero", "true"),
        ("bands", "0.1:0.12:0.13"),
        ("filter_mode", "cosine_taper"),
        ("returns_guard", "0.001"),
        ("absolute_returns", "true"),
        ("zero_variance", "neutralize"),
        ("window", "40"),
        ("overlap", "20"),
        ("k", "3"),
        ("n_restarts", "10"),
        ("seed", "99"),
        ("tol", "0.01"),
        ("max_iter", "50"),
        ("k_scan", "2-6"),
        ("bins_empirical", "20"),
        ("bins_wishart", "10"),
        ("bins_mp", "9"),
        ("wishart_samples", "100"),
        ("mp_q", "2"),
        ("output_dir", "elsewhere"),
        ("incidence", "inc.csv"),
        ("figures", "false"),
    ];
    assert_eq!(changes.len(), PipelineConfig::KEYS.len());
    for (key, value) in changes {
        let mut config = PipelineConfig::default();
        config.set(key, value).unwrap();
        let echo = config.echo();
        assert_ne!(echo, base, "changing {key} left the echo unchanged");
        assert_eq!(
            echo.iter().filter(|(k, v)| base[*k] != **v).count(),
            1,
            "{key}"
        );
    }
}

#[test]
fn strip_overlay_is_optional() {
    let dir = tempfile::tempdir().unwrap();
    let panel = synth_panel(&SynthConfig {
        n_regions: 6,
        n_days: 200,
        ..SynthConfig::default()
    })
    .unwrap();
    let input = dir.path().join("panel.csv");
    save_panel(&panel, &input).unwrap();
    let incidence = dir.path().join("incidence.csv");
    let mut text = String::from("date,total\n");
    for (d, v) in panel.dates().iter().zip(total_incidence(&panel)) {
        text.push_str(&format!("{d},{v}\n"));
    }
    fs::write(&incidence, text).unwrap();

    let base = PipelineConfig {
        input,
        n_restarts: 5,
        wishart_samples: 20,
        k: 2,
        ..PipelineConfig::default()
    };
    let without = PipelineConfig {
        output_dir: dir.path().join("plain"),
        ..base.clone()
    };
    let with = PipelineConfig {
        output_dir: dir.path().join("overlay"),
        incidence: Some(incidence),
        ..base
    };
    run_pipeline(&without).unwrap();
    run_pipeline(&with).unwrap();
    let plain = fs::read_to_string(without.output_dir.join("figures/fig5_symbolic.svg")).unwrap();
    let overlay = fs::read_to_string(with.output_dir.join("figures/fig5_symbolic.svg")).unwrap();
    assert!(!plain.contains("incidence"));
    assert!(overlay.contains("incidence"));
}

#[test]
fn figures_can_be_disabled() {
    let dir = tempfile::tempdir().unwrap();
    let config = PipelineConfig {
        figures: false,
        ..quick_config(&dir.path().join("run"))
    };
    let manifest = run_pipeline(&config).unwrap();
    assert!(manifest.stage("figures").is_none());
    assert!(!config.output_dir.join("figures").exists());
}
