//! Experiment harnesses: data efficiency and robustness sweeps, plus
//! the CSV/JSON metrics writers.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bev::BevSpec;
use crate::fusion::CropBounds;
use crate::geometry::AugmentRanges;
use crate::nn::Checkpoint;
use crate::pretrain::EncoderConfig;
use crate::seed::rng_for;
use crate::sim::{inject_localization_error, inject_time_delay, render_frame, Frame, Scenario};
use crate::Error;

use super::finetune::{evaluate_model, finetune, model_from_checkpoint, FinetuneOutput, MetricsReport};
use super::{DetectConfig, FinetuneConfig, InitMode};

/// Everything needed to rebuild the model geometry for a run.
#[derive(Debug, Clone)]
pub struct PipelineSetup {
    pub enc: EncoderConfig,
    pub spec: BevSpec,
    pub crop: CropBounds,
    pub z_center: f64,
    pub z_scale: f64,
}

/// One measured table row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HarnessRow {
    pub experiment: String,
    pub model: String,
    pub seed: u64,
    /// Label fraction, noise sigma, or delay, depending on the sweep.
    pub level: f64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Serialize)]
pub struct DataEfficiencyResult {
    pub rows: Vec<HarnessRow>,
    /// One entry per (fraction, threshold) where the pretrained mean
    /// fell below scratch.
    pub flags: Vec<String>,
}

/// Finetune scratch vs pretrained at every (fraction, seed) cell.
/// Cells run in parallel; each owns its model state and seeds, so the
/// table is deterministic regardless of scheduling.
#[allow(clippy::too_many_arguments)]
pub fn data_efficiency_harness(
    train: &[Frame],
    test: &[Frame],
    setup: &PipelineSetup,
    pretrained: &Checkpoint,
    fractions: &[f64],
    seeds: &[u64],
    base_ft: &FinetuneConfig,
    detect: &DetectConfig,
    augment: &AugmentRanges,
) -> Result<DataEfficiencyResult, Error> {
    let mut cells = Vec::new();
    for &fraction in fractions {
        for &seed in seeds {
            for init in [InitMode::Scratch, InitMode::FromCheckpoint] {
                cells.push((fraction, seed, init));
            }
        }
    }
    let rows: Vec<HarnessRow> = cells
        .par_iter()
        .map(|&(fraction, seed, init)| -> Result<HarnessRow, Error> {
            let ft = FinetuneConfig { label_fraction: fraction, seed, init, ..*base_ft };
            let ckpt = match init {
                InitMode::Scratch => None,
                InitMode::FromCheckpoint => Some(pretrained),
            };
            let out = finetune(
                train,
                test,
                &setup.enc,
                setup.spec,
                setup.crop,
                setup.z_center,
                setup.z_scale,
                &ft,
                detect,
                augment,
                ckpt,
                serde_json::json!({"experiment": "data_efficiency", "fraction": fraction, "seed": seed}),
            )?;
            Ok(HarnessRow {
                experiment: "data_efficiency".into(),
                model: match init {
                    InitMode::Scratch => "scratch".into(),
                    InitMode::FromCheckpoint => "pretrained".into(),
                },
                seed,
                level: fraction,
                metrics: out.metrics,
            })
        })
        .collect::<Result<_, _>>()?;
    let flags = monotone_flags(&rows, fractions, detect);
    Ok(DataEfficiencyResult { rows, flags })
}

/// Mean AP over seeds for one (model, level, threshold-index) cell.
pub fn mean_ap(rows: &[HarnessRow], model: &str, level: f64, threshold_index: usize) -> Option<f64> {
    let values: Vec<f64> = rows
        .iter()
        .filter(|r| r.model == model && r.level == level)
        .filter_map(|r| r.metrics.overall[threshold_index])
        .collect();
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

fn monotone_flags(rows: &[HarnessRow], fractions: &[f64], detect: &DetectConfig) -> Vec<String> {
    let mut flags = Vec::new();
    for (t, thr) in detect.iou_thresholds.iter().enumerate() {
        for &f in fractions {
            if let (Some(scratch), Some(pre)) =
                (mean_ap(rows, "scratch", f, t), mean_ap(rows, "pretrained", f, t))
            {
                if pre < scratch {
                    flags.push(format!(
                        "AP@{thr}: pretrained ({pre:.4}) below scratch ({scratch:.4}) at fraction {f}"
                    ));
                }
            }
        }
    }
    flags
}

/// Convenience wrapper for harness callers: one finetune cell.
#[allow(clippy::too_many_arguments)]
pub fn finetune_cell(
    train: &[Frame],
    test: &[Frame],
    setup: &PipelineSetup,
    ft: &FinetuneConfig,
    detect: &DetectConfig,
    augment: &AugmentRanges,
    ckpt: Option<&Checkpoint>,
    echo: serde_json::Value,
) -> Result<FinetuneOutput, Error> {
    finetune(
        train,
        test,
        &setup.enc,
        setup.spec,
        setup.crop,
        setup.z_center,
        setup.z_scale,
        ft,
        detect,
        augment,
        ckpt,
        echo,
    )
}

/// Frames for the localization-noise sweep: rendered clean, then poses
/// perturbed with the given sigma.
fn noisy_frames(
    scenarios: &[Scenario],
    sigma_xy: f64,
    sigma_yaw: f64,
    seed: u64,
) -> Result<Vec<Frame>, Error> {
    let mut frames = Vec::new();
    for (s, scenario) in scenarios.iter().enumerate() {
        for i in 0..scenario.n_frames() {
            let frame = render_frame(scenario, scenario.frame_time(i), 0)?;
            let mut rng = rng_for(seed, &format!("robust/loc/{s}/{i}"));
            frames.push(inject_localization_error(&frame, sigma_xy, sigma_yaw, &mut rng)?);
        }
    }
    Ok(frames)
}

/// Frames for the delay sweep. Only times `t >= min_time` are used so
/// every delay level scores the same frame set.
fn delayed_frames(scenarios: &[Scenario], delay: f64, min_time: f64) -> Result<Vec<Frame>, Error> {
    let mut frames = Vec::new();
    for scenario in scenarios {
        for i in 0..scenario.n_frames() {
            let t = scenario.frame_time(i);
            if t < min_time {
                continue;
            }
            frames.push(inject_time_delay(scenario, t, delay, 0)?);
        }
    }
    Ok(frames)
}

/// Evaluate trained models on test scenarios re-rendered under each
/// perturbation level. Localization noise and time delay are swept
/// independently (the other perturbation held at zero).
#[allow(clippy::too_many_arguments)]
pub fn robustness_harness(
    scenarios: &[Scenario],
    setup: &PipelineSetup,
    models: &[(String, Checkpoint)],
    sigma_xy: &[f64],
    sigma_yaw: &[f64],
    delays: &[f64],
    detect: &DetectConfig,
    noise_seed: u64,
) -> Result<Vec<HarnessRow>, Error> {
    let max_delay = delays.iter().cloned().fold(0.0, f64::max);
    let mut rows = Vec::new();
    for (name, ckpt) in models {
        let model = model_from_checkpoint(ckpt, &setup.enc, setup.spec, setup.crop, setup.z_center, setup.z_scale)?;
        for &sigma in sigma_xy {
            let frames = noisy_frames(scenarios, sigma, 0.0, noise_seed)?;
            let (metrics, _) = evaluate_model(&model, &frames, detect)?;
            rows.push(HarnessRow {
                experiment: "robust_loc_xy".into(),
                model: name.clone(),
                seed: noise_seed,
                level: sigma,
                metrics,
            });
        }
        for &sigma in sigma_yaw {
            let frames = noisy_frames(scenarios, 0.0, sigma, noise_seed)?;
            let (metrics, _) = evaluate_model(&model, &frames, detect)?;
            rows.push(HarnessRow {
                experiment: "robust_loc_yaw".into(),
                model: name.clone(),
                seed: noise_seed,
                level: sigma,
                metrics,
            });
        }
        for &delay in delays {
            let frames = delayed_frames(scenarios, delay, max_delay)?;
            let (metrics, _) = evaluate_model(&model, &frames, detect)?;
            rows.push(HarnessRow {
                experiment: "robust_delay".into(),
                model: name.clone(),
                seed: noise_seed,
                level: delay,
                metrics,
            });
        }
    }
    Ok(rows)
}

fn fmt_ap(ap: Option<f64>) -> String {
    match ap {
        Some(v) => format!("{v:.6}"),
        None => String::new(),
    }
}

/// Metrics CSV: experiment, model, seed, level, then AP per threshold
/// overall and per range bucket. Undefined APs (no ground truths) print
/// as empty fields.
pub fn write_rows_csv(path: &Path, detect: &DetectConfig, rows: &[HarnessRow]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::fs::File::create(path)?;
    let mut header = vec!["experiment".to_string(), "model".into(), "seed".into(), "level".into(), "n_frames".into()];
    for thr in &detect.iou_thresholds {
        header.push(format!("ap{thr}"));
    }
    for thr in &detect.iou_thresholds {
        for (lo, hi) in &detect.range_buckets {
            header.push(format!("ap{thr}_{lo:.0}_{hi:.0}m"));
        }
    }
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        let mut cells = vec![
            row.experiment.clone(),
            row.model.clone(),
            row.seed.to_string(),
            format!("{}", row.level),
            row.metrics.n_frames.to_string(),
        ];
        for ap in &row.metrics.overall {
            cells.push(fmt_ap(*ap));
        }
        for per in &row.metrics.per_bucket {
            for ap in per {
                cells.push(fmt_ap(*ap));
            }
        }
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// JSON summary with the config echo and a content hash of the inputs.
pub fn write_summary_json(
    path: &Path,
    experiment: &str,
    config_echo: &serde_json::Value,
    inputs_hash: &str,
    rows: &[HarnessRow],
    flags: &[String],
) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let summary = serde_json::json!({
        "experiment": experiment,
        "config_echo": config_echo,
        "inputs_hash": inputs_hash,
        "flags": flags,
        "rows": rows,
    });
    std::fs::write(path, serde_json::to_vec_pretty(&summary)?)
}

/// SHA-256 over the concatenated bytes of the input files, hex-encoded.
pub fn content_hash(paths: &[&Path]) -> std::io::Result<String> {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for p in paths {
        hasher.update(std::fs::read(p)?);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_scenario, ScenarioConfig, ScenarioFamily, SensorConfig};

    fn sensor(max_range: f64) -> SensorConfig {
        SensorConfig {
            mount_height: 1.8,
            elevation_angles: (0..6).map(|i| -0.3 + 0.06 * i as f64).collect(),
            azimuth_step: 0.08,
            max_range,
            dropout_prob: 0.0,
        }
    }

    fn setup() -> PipelineSetup {
        PipelineSetup {
            enc: EncoderConfig { max_points_per_pillar: 8, pillar_feature_dim: 6, bev_channels: 6, conv_blocks: 1 },
            spec: BevSpec::new(-32.0, 32.0, -32.0, 32.0, 4.0).unwrap(),
            crop: CropBounds { x_min: -32.0, x_max: 32.0, y_min: -32.0, y_max: 32.0, z_min: -3.0, z_max: 5.0 },
            z_center: 0.0,
            z_scale: 4.0,
        }
    }

    fn scenarios(seed: u64) -> Vec<Scenario> {
        let cfg = ScenarioConfig {
            n_coop_agents: 1,
            n_objects: 3,
            area_bounds: 30.0,
            duration: 0.4,
            frame_rate: 10.0,
            scenario_family: ScenarioFamily::Intersection,
            seed,
            truck_fraction: 0.0,
        };
        vec![generate_scenario(&cfg, &sensor(40.0), &sensor(60.0)).unwrap()]
    }

    #[test]
    fn robustness_zero_rows_match_clean_evaluation() {
        let scenarios = scenarios(17);
        let s = setup();
        let model = crate::eval::DetectionModel::new(&s.enc, s.spec, s.crop, 0.0, 4.0, (4.5, 1.9), 5).unwrap();
        let meta = crate::nn::CheckpointMeta {
            role: crate::nn::CheckpointRole::FinetunedModel,
            steps: 0,
            final_loss: 0.0,
            config_echo: serde_json::json!({}),
        };
        let ckpt = crate::nn::Checkpoint::from_params(meta, &model.set, |_| true);
        let detect = DetectConfig::default();
        let rows = robustness_harness(
            &scenarios,
            &s,
            &[("model".to_string(), ckpt)],
            &[0.0, 0.3],
            &[],
            &[0.0, 0.1],
            &detect,
            11,
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        // Clean evaluation over the same frames.
        let frames: Vec<Frame> = (0..scenarios[0].n_frames())
            .map(|i| render_frame(&scenarios[0], scenarios[0].frame_time(i), 0).unwrap())
            .collect();
        let (clean, _) = evaluate_model(&model, &frames, &detect).unwrap();
        let zero_loc = rows.iter().find(|r| r.experiment == "robust_loc_xy" && r.level == 0.0).unwrap();
        assert_eq!(zero_loc.metrics, clean);
        // Delay rows share a frame subset; the zero row must equal the
        // clean evaluation of that same subset.
        let late: Vec<Frame> = frames.iter().filter(|f| f.time >= 0.1).cloned().collect();
        let (clean_late, _) = evaluate_model(&model, &late, &detect).unwrap();
        let zero_delay = rows.iter().find(|r| r.experiment == "robust_delay" && r.level == 0.0).unwrap();
        assert_eq!(zero_delay.metrics, clean_late);
    }

    #[test]
    fn csv_writer_emits_one_line_per_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let detect = DetectConfig::default();
        let report = MetricsReport {
            n_frames: 2,
            iou_thresholds: detect.iou_thresholds.clone(),
            overall: vec![Some(0.5), None],
            range_buckets: detect.range_buckets.clone(),
            per_bucket: vec![vec![Some(1.0), None, None], vec![None, None, None]],
        };
        let rows = vec![HarnessRow {
            experiment: "x".into(),
            model: "scratch".into(),
            seed: 1,
            level: 0.2,
            metrics: report,
        }];
        write_rows_csv(&path, &detect, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("experiment,model,seed,level,n_frames,ap0.5,ap0.7"));
        assert!(lines[1].contains("0.500000"));
    }
}
