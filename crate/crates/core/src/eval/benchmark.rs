//! Dataset ingestion and the simulated-click benchmark.
//!
//! A dataset is a directory holding `manifest.csv` with the columns
//! `instance_id,image,mask,attention`; paths are relative to the directory.
//! Masks are grayscale PNGs (values above 127 are foreground) of the same
//! size as the image, attention files use the ATN1 format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::simulate::{simulate_instance, EvalConfig, InstanceOutcome, InstanceRecord};
use crate::aggregation::{aggregate, TransitionMatrix};
use crate::error::{Error, Result};
use crate::jbu::GuideImage;
use crate::mask::BinaryMask;
use crate::segmenter::{prepare_operator, SessionConfig, SessionContext};
use crate::tensor_io::{read_attention_file, write_attention_file};
use crate::world::{SyntheticWorld, WorldConfig};

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub instance_id: String,
    pub image: String,
    pub mask: String,
    pub attention: String,
}

pub fn read_manifest(dataset: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(dataset.join(MANIFEST))?;
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
    Ok(rows)
}

pub fn write_manifest(dataset: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(dataset.join(MANIFEST))?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_guide(path: &Path) -> Result<GuideImage> {
    Ok(GuideImage::from_rgb_image(&image::open(path)?.to_rgb8()))
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    Ok(BinaryMask::from_image(&image::open(path)?.to_luma8()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedInstance {
    pub instance_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub method: String,
    pub max_clicks: usize,
    pub targets: Vec<f64>,
    pub outcomes: Vec<InstanceOutcome>,
    pub skipped: Vec<SkippedInstance>,
}

impl BenchmarkReport {
    /// True when every instance loaded and was simulated without error.
    pub fn complete(&self) -> bool {
        self.skipped.is_empty() && self.outcomes.iter().all(|o| !o.failed())
    }

    pub fn failures(&self) -> usize {
        self.skipped.len() + self.outcomes.iter().filter(|o| o.failed()).count()
    }

    /// Mean NoC per target over all simulated instances.
    pub fn mean_noc(&self) -> Vec<f64> {
        let n = self.outcomes.len().max(1) as f64;
        (0..self.targets.len())
            .map(|t| self.outcomes.iter().map(|o| o.noc[t] as f64).sum::<f64>() / n)
            .collect()
    }

    /// Mean IoU after each click.
    pub fn miou_per_click(&self) -> Vec<f64> {
        let n = self.outcomes.len().max(1) as f64;
        (0..self.max_clicks)
            .map(|k| self.outcomes.iter().map(|o| o.ious[k]).sum::<f64>() / n)
            .collect()
    }

    /// Number of instances per NoC value `1..=max_clicks` for target `t`.
    pub fn noc_histogram(&self, t: usize) -> Vec<usize> {
        let mut hist = vec![0; self.max_clicks];
        for o in &self.outcomes {
            hist[o.noc[t] - 1] += 1;
        }
        hist
    }

    fn target_name(t: f64) -> String {
        format!("noc{}", (t * 100.0).round() as u32)
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "method: {}  instances: {}  failures: {}",
            self.method,
            self.outcomes.len(),
            self.failures()
        );
        let header: Vec<String> = self
            .targets
            .iter()
            .map(|&t| Self::target_name(t).to_uppercase())
            .collect();
        let _ = writeln!(
            s,
            "{:<24} {}  final IoU",
            "instance",
            header.iter().map(|h| format!("{h:>7}")).collect::<String>()
        );
        for o in &self.outcomes {
            let nocs: String = o.noc.iter().map(|n| format!("{n:>7}")).collect();
            let flag = if o.failed() { "  (error)" } else { "" };
            let _ = writeln!(
                s,
                "{:<24} {nocs}  {:.4}{flag}",
                o.instance_id,
                o.ious.last().copied().unwrap_or(0.0)
            );
        }
        let means: String = self
            .mean_noc()
            .iter()
            .map(|m| format!("{m:>7.2}"))
            .collect();
        let _ = writeln!(s, "{:<24} {means}", "mean");
        for skip in &self.skipped {
            let _ = writeln!(s, "skipped {}: {}", skip.instance_id, skip.reason);
        }
        s
    }

    /// Writes the per-instance CSV to `out`, plus `<stem>_noc_hist.csv` and
    /// `<stem>_miou.csv` next to it. Returns the paths written.
    pub fn write(&self, out: &Path) -> Result<Vec<PathBuf>> {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let names: Vec<String> = self.targets.iter().map(|&t| Self::target_name(t)).collect();

        let mut w = csv::Writer::from_path(out)?;
        let mut header = vec!["instance_id".to_string()];
        header.extend(names.iter().cloned());
        header.extend(["final_iou", "clicks", "error"].map(String::from));
        w.write_record(&header)?;
        for o in &self.outcomes {
            let mut rec = vec![o.instance_id.clone()];
            rec.extend(o.noc.iter().map(|n| n.to_string()));
            rec.push(format!("{:.6}", o.ious.last().copied().unwrap_or(0.0)));
            rec.push(o.points.len().to_string());
            rec.push(o.error.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
        for skip in &self.skipped {
            let mut rec = vec![skip.instance_id.clone()];
            rec.extend(names.iter().map(|_| String::new()));
            rec.extend([
                String::new(),
                String::new(),
                format!("skipped: {}", skip.reason),
            ]);
            w.write_record(&rec)?;
        }
        let mut mean = vec!["mean".to_string()];
        mean.extend(self.mean_noc().iter().map(|m| format!("{m:.4}")));
        mean.extend([String::new(), String::new(), String::new()]);
        w.write_record(&mean)?;
        w.flush()?;

        let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        let sibling = |suffix: &str| out.with_file_name(format!("{stem}_{suffix}.csv"));

        let hist_path = sibling("noc_hist");
        let mut w = csv::Writer::from_path(&hist_path)?;
        let mut header = vec!["noc".to_string()];
        header.extend(names.iter().cloned());
        w.write_record(&header)?;
        let hists: Vec<Vec<usize>> = (0..self.targets.len())
            .map(|t| self.noc_histogram(t))
            .collect();
        for k in 0..self.max_clicks {
            let mut rec = vec![(k + 1).to_string()];
            rec.extend(hists.iter().map(|h| h[k].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;

        let miou_path = sibling("miou");
        let mut w = csv::Writer::from_path(&miou_path)?;
        w.write_record(["click", "miou"])?;
        for (k, m) in self.miou_per_click().iter().enumerate() {
            w.write_record([(k + 1).to_string(), format!("{m:.6}")])?;
        }
        w.flush()?;
        Ok(vec![out.to_path_buf(), hist_path, miou_path])
    }
}

/// Simulates every manifest instance with a fresh session per instance.
/// Instances that fail to load are skipped and reported.
pub fn run_benchmark(
    dataset: &Path,
    session: &SessionConfig,
    eval: &EvalConfig,
) -> Result<BenchmarkReport> {
    session.validate()?;
    eval.validate()?;
    let rows = read_manifest(dataset)?;
    info!(
        "benchmarking {} instances from {}",
        rows.len(),
        dataset.display()
    );

    // Operators and guides are shared by instances of the same image.
    let attention: BTreeSet<&str> = rows.iter().map(|r| r.attention.as_str()).collect();
    let operators: BTreeMap<&str, std::result::Result<Arc<TransitionMatrix>, String>> = attention
        .into_par_iter()
        .map(|a| {
            let prepared = read_attention_file(dataset.join(a))
                .and_then(|stack| aggregate(&stack, None))
                .and_then(|m| prepare_operator(&m, session))
                .map(Arc::new)
                .map_err(|e| e.to_string());
            (a, prepared)
        })
        .collect();
    let images: BTreeSet<&str> = rows.iter().map(|r| r.image.as_str()).collect();
    let guides: BTreeMap<&str, std::result::Result<Arc<GuideImage>, String>> = images
        .into_par_iter()
        .map(|i| {
            (
                i,
                load_guide(&dataset.join(i))
                    .map(Arc::new)
                    .map_err(|e| e.to_string()),
            )
        })
        .collect();

    let results: Vec<std::result::Result<InstanceOutcome, SkippedInstance>> = rows
        .par_iter()
        .map(|row| {
            let skip = |reason: String| {
                warn!("skipping {}: {reason}", row.instance_id);
                SkippedInstance {
                    instance_id: row.instance_id.clone(),
                    reason,
                }
            };
            let matrix = operators[row.attention.as_str()].clone().map_err(skip)?;
            let guide = guides[row.image.as_str()].clone().map_err(skip)?;
            let gt = load_mask(&dataset.join(&row.mask)).map_err(|e| skip(e.to_string()))?;
            if gt.width() != guide.width() || gt.height() != guide.height() {
                return Err(skip(format!(
                    "mask is {}x{} but image is {}x{}",
                    gt.width(),
                    gt.height(),
                    guide.width(),
                    guide.height()
                )));
            }
            let mut ctx = SessionContext::from_prepared(matrix, guide, session.clone())
                .map_err(|e| skip(e.to_string()))?;
            let record = InstanceRecord {
                instance_id: row.instance_id.clone(),
                image: row.image.clone(),
                gt,
            };
            let outcome = simulate_instance(
                &record,
                |points| {
                    ctx.sync_points(points)?;
                    Ok(ctx.segment()?.mask)
                },
                eval,
            );
            if let Some(e) = &outcome.error {
                warn!("instance {} failed: {e}", row.instance_id);
            }
            Ok(outcome)
        })
        .collect();

    let mut report = BenchmarkReport {
        method: session.method.to_string(),
        max_clicks: eval.max_clicks,
        targets: eval.iou_targets.clone(),
        outcomes: Vec::new(),
        skipped: Vec::new(),
    };
    for r in results {
        match r {
            Ok(o) => report.outcomes.push(o),
            Err(s) => report.skipped.push(s),
        }
    }
    Ok(report)
}

/// Writes `count` synthetic worlds as a dataset: one image and attention
/// file per world and one instance per region. Returns the instance count.
pub fn write_synthetic_dataset(
    dst: &Path,
    count: usize,
    seed: u64,
    config: &WorldConfig,
) -> Result<usize> {
    fs::create_dir_all(dst)?;
    let mut rows = Vec::new();
    for k in 0..count {
        let world = SyntheticWorld::generate(seed.wrapping_add(k as u64), config)?;
        let name = format!("world{k:03}");
        world
            .guide
            .to_rgb_image()
            .save(dst.join(format!("{name}.png")))?;
        write_attention_file(&world.stack, dst.join(format!("{name}.atn1")))?;
        for (r, region) in world.regions.iter().enumerate() {
            let mask = format!("{name}_r{r}.png");
            region.to_image().save(dst.join(&mask))?;
            rows.push(ManifestRow {
                instance_id: format!("{name}_r{r}"),
                image: format!("{name}.png"),
                mask,
                attention: format!("{name}.atn1"),
            });
        }
    }
    write_manifest(dst, &rows)?;
    Ok(rows.len())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    Ok(entries)
}

/// Converts a DAVIS-style tree (`JPEGImages/<res>/<seq>/*.jpg`,
/// `Annotations/<res>/<seq>/*.png` with one color per object) into the
/// manifest layout, using the first annotated frame of every sequence and
/// one instance per object color. Attention paths point at
/// `<seq>.atn1`, to be produced by the exporter. Returns the instance count.
pub fn import_davis(src: &Path, dst: &Path) -> Result<usize> {
    let pick_res = |base: PathBuf| {
        let hd = base.join("480p");
        if hd.is_dir() {
            hd
        } else {
            base
        }
    };
    let annotations = pick_res(src.join("Annotations"));
    let images = pick_res(src.join("JPEGImages"));
    if !annotations.is_dir() || !images.is_dir() {
        return Err(Error::validation(format!(
            "{} does not contain Annotations/ and JPEGImages/",
            src.display()
        )));
    }
    fs::create_dir_all(dst)?;
    let mut rows = Vec::new();
    for seq_dir in sorted_entries(&annotations)?
        .into_iter()
        .filter(|p| p.is_dir())
    {
        let seq = seq_dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let Some(ann) = sorted_entries(&seq_dir)?
            .into_iter()
            .find(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        else {
            warn!("sequence {seq} has no annotation");
            continue;
        };
        let frame = ann
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let jpg = images.join(&seq).join(format!("{frame}.jpg"));
        let img = match image::open(&jpg) {
            Ok(i) => i.to_rgb8(),
            Err(e) => {
                warn!("sequence {seq}: cannot read {}: {e}", jpg.display());
                continue;
            }
        };
        let labels = image::open(&ann)?.to_rgb8();
        if labels.dimensions() != img.dimensions() {
            warn!("sequence {seq}: annotation and frame differ in size");
            continue;
        }
        let image_name = format!("{seq}.png");
        img.save(dst.join(&image_name))?;
        let colors: BTreeSet<[u8; 3]> = labels
            .pixels()
            .map(|p| p.0)
            .filter(|c| *c != [0, 0, 0])
            .collect();
        for (k, color) in colors.iter().enumerate() {
            let (w, h) = labels.dimensions();
            let mask = BinaryMask::from_fn(w as usize, h as usize, |x, y| {
                labels.get_pixel(x as u32, y as u32).0 == *color
            });
            let mask_name = format!("{seq}_obj{}.png", k + 1);
            mask.to_image().save(dst.join(&mask_name))?;
            rows.push(ManifestRow {
                instance_id: format!("{seq}_{}", k + 1),
                image: image_name.clone(),
                mask: mask_name,
                attention: format!("{seq}.atn1"),
            });
        }
    }
    write_manifest(dst, &rows)?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    #[test]
    fn trivially_solved_dataset_has_mean_noc_one() {
        let dir = tempfile::tempdir().unwrap();
        let config = WorldConfig {
            grid: 8,
            pixels_per_cell: 4,
            min_regions: 4,
            max_regions: 4,
            in_region_mass: (0.85, 0.85),
            noise_amplitude: 0.0,
        };
        write_synthetic_dataset(dir.path(), 1, 7, &config).unwrap();
        // Keep the smallest region only.
        let mut rows = read_manifest(dir.path()).unwrap();
        rows.sort_by_key(|r| load_mask(&dir.path().join(&r.mask)).unwrap().count());
        rows.truncate(1);
        write_manifest(dir.path(), &rows).unwrap();

        let report = run_benchmark(
            dir.path(),
            &SessionConfig::default(),
            &EvalConfig::default(),
        )
        .unwrap();
        assert!(report.complete(), "{}", report.render_table());
        assert_eq!(report.mean_noc(), vec![1.0, 1.0]);
        let files = report.write(&dir.path().join("out/report.csv")).unwrap();
        assert!(files.iter().all(|f| f.exists()));
        let hist = fs::read_to_string(&files[1]).unwrap();
        assert!(hist.starts_with("noc,noc85,noc90\n1,1,1\n"));
    }

    #[test]
    fn unreadable_instance_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let config = WorldConfig {
            grid: 8,
            pixels_per_cell: 2,
            ..WorldConfig::default()
        };
        write_synthetic_dataset(dir.path(), 1, 1, &config).unwrap();
        let mut rows = read_manifest(dir.path()).unwrap();
        rows.truncate(1);
        rows.push(ManifestRow {
            instance_id: "ghost".into(),
            image: rows[0].image.clone(),
            mask: "missing.png".into(),
            attention: rows[0].attention.clone(),
        });
        write_manifest(dir.path(), &rows).unwrap();
        let eval = EvalConfig {
            max_clicks: 3,
            ..EvalConfig::default()
        };
        let report = run_benchmark(dir.path(), &SessionConfig::default(), &eval).unwrap();
        assert!(!report.complete());
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].instance_id, "ghost");
        assert_eq!(report.outcomes.len(), 1);
    }

    #[test]
    fn davis_layout_is_imported() {
        let src = tempfile::tempdir().unwrap();
        let dst = tempfile::tempdir().unwrap();
        let seq = "bear";
        fs::create_dir_all(src.path().join("JPEGImages/480p").join(seq)).unwrap();
        fs::create_dir_all(src.path().join("Annotations/480p").join(seq)).unwrap();
        RgbImage::from_pixel(8, 6, Rgb([90, 90, 90]))
            .save(src.path().join("JPEGImages/480p/bear/00000.jpg"))
            .unwrap();
        let ann = RgbImage::from_fn(8, 6, |x, _| match x {
            0..=1 => Rgb([128, 0, 0]),
            2..=3 => Rgb([0, 128, 0]),
            _ => Rgb([0, 0, 0]),
        });
        ann.save(src.path().join("Annotations/480p/bear/00000.png"))
            .unwrap();
        assert_eq!(import_davis(src.path(), dst.path()).unwrap(), 2);
        let rows = read_manifest(dst.path()).unwrap();
        assert_eq!(rows[0].attention, "bear.atn1");
        let m = load_mask(&dst.path().join(&rows[1].mask)).unwrap();
        assert_eq!(m.count(), 12);
        assert!(import_davis(dst.path(), src.path()).is_err());
    }
}
