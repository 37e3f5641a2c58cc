//! The gen-dataset and sample commands.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use recon_core::metrics::layout_consistency;
use recon_core::toyworld::{save_grid, save_layout, save_palette, write_ppm};

use crate::config::{CliError, CliResult, LoadedConfig};
use crate::report::write_csv;
use crate::run::{load_palette_or_default, prepare_scenes, run_scene, with_jobs, PreparedScene};

fn ensure_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Runtime(format!("output dir {}: {e}", path.display())))
}

/// Writes n layouts, their scene images, the palette used, and a manifest
/// keyed by scene id.
pub fn cmd_gen_dataset(loaded: &LoadedConfig, jobs: Option<usize>) -> CliResult<()> {
    let cfg = &loaded.config;
    let out = cfg.out_dir()?.to_path_buf();
    ensure_dir(&out.join("layouts"))?;
    ensure_dir(&out.join("images"))?;
    let palette = load_palette_or_default(cfg)?;
    save_palette(out.join("palette.json"), &palette)?;
    let scenes = prepare_scenes(cfg, &palette, None)?;
    let rows = with_jobs(jobs, || {
        scenes
            .par_iter()
            .map(|p| -> CliResult<String> {
                let layout_rel = format!("layouts/scene_{:05}.json", p.id);
                let image_rel = format!("images/scene_{:05}.rcg", p.id);
                save_layout(out.join(&layout_rel), &p.scene.layout)?;
                save_grid(out.join(&image_rel), &p.scene.image)?;
                write_ppm(out.join(format!("images/scene_{:05}.ppm", p.id)), &p.scene.image)?;
                Ok(format!("{},{},{},{},{}", p.id, layout_rel, image_rel, p.seed, loaded.hash))
            })
            .collect::<CliResult<Vec<_>>>()
    })??;
    write_csv(&out.join("manifest.csv"), "id,layout,image,seed,config_hash", &rows)
}

struct SampleRow {
    seed: u64,
    consistent: bool,
    trace_rows: Vec<String>,
}

/// Samples every input scene under the configured mode, writing the images,
/// a per-stage trace, and per-run metric rows.
pub fn cmd_sample(loaded: &LoadedConfig, jobs: Option<usize>) -> CliResult<()> {
    let cfg = &loaded.config;
    let out = cfg.out_dir()?.to_path_buf();
    ensure_dir(&out.join("images"))?;
    let palette = load_palette_or_default(cfg)?;
    let schedule = cfg.schedule.build()?;
    let rect = cfg.rectify.to_core();
    let scenes = prepare_scenes(cfg, &palette, None)?;
    let results = with_jobs(jobs, || {
        scenes
            .par_iter()
            .map(|p: &PreparedScene| -> CliResult<SampleRow> {
                let output = run_scene(
                    cfg.mode,
                    &p.scene,
                    &palette,
                    &schedule,
                    &rect,
                    cfg.gamma,
                    cfg.sdedit_strength,
                    p.seed,
                )?;
                let stem = format!("{}_{:05}", cfg.mode, p.id);
                save_grid(out.join(format!("images/{stem}.rcg")), &output.image)?;
                write_ppm(out.join(format!("images/{stem}.ppm")), &output.image)?;
                let (consistent, _, _) =
                    layout_consistency(&output.image, &p.scene.layout, &palette, rect.tau)?;
                let trace_rows = output
                    .trace
                    .map(|trace| {
                        trace
                            .stages
                            .iter()
                            .enumerate()
                            .map(|(stage, s)| {
                                format!(
                                    "{},{},{},{},{},{},{}",
                                    p.id, stage, s.t, s.area_ratio, s.fp_count, s.fn_count, loaded.hash
                                )
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                Ok(SampleRow {
                    seed: p.seed,
                    consistent,
                    trace_rows,
                })
            })
            .collect::<CliResult<Vec<_>>>()
    })??;

    let trace_rows: Vec<String> = results.iter().flat_map(|r| r.trace_rows.clone()).collect();
    write_csv(
        &out.join("trace.csv"),
        "run_id,stage_index,t,mask_area_ratio,fp_count,fn_count,config_hash",
        &trace_rows,
    )?;

    let mut metric_rows: Vec<String> = results
        .iter()
        .map(|r| format!("layout_consistent,{},1,{},{}", u8::from(r.consistent), r.seed, loaded.hash))
        .collect();
    if !results.is_empty() {
        let rate = results.iter().filter(|r| r.consistent).count() as f64 / results.len() as f64;
        metric_rows.push(format!(
            "layout_consistency_rate,{rate},{},{},{}",
            results.len(),
            cfg.seed,
            loaded.hash
        ));
    }
    write_csv(&out.join("metrics.csv"), "metric,value,n,seed,config_hash", &metric_rows)
}
