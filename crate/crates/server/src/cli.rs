//! Shared pieces of the command-line tools.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use image::{GrayImage, Luma};

use m2n2::eval::load_guide;
use m2n2::markov::{markov_map, MarkovChain, MarkovParams};
use m2n2::segmenter::{Label, Method, SessionConfig, SessionContext};
use m2n2::tensor_io::read_attention_file;
use m2n2::BinaryMask;

/// Parses `"x,y,fg;x,y,bg"`.
pub fn parse_clicks(s: &str) -> Result<Vec<(usize, usize, Label)>> {
    s.split(';')
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .map(|c| {
            let parts: Vec<&str> = c.split(',').map(str::trim).collect();
            ensure!(parts.len() == 3, "click '{c}' is not of the form x,y,label");
            Ok((
                parts[0]
                    .parse()
                    .with_context(|| format!("bad x in '{c}'"))?,
                parts[1]
                    .parse()
                    .with_context(|| format!("bad y in '{c}'"))?,
                parts[2].parse::<Label>()?,
            ))
        })
        .collect()
}

/// Parses `"up0=0.5,up1=0.5"`.
pub fn parse_weights(s: &str) -> Result<BTreeMap<String, f32>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (k, v) = p
                .split_once('=')
                .with_context(|| format!("weight '{p}' is not id=value"))?;
            Ok((
                k.trim().to_string(),
                v.trim()
                    .parse()
                    .with_context(|| format!("bad weight in '{p}'"))?,
            ))
        })
        .collect()
}

/// Parses `"0.85,0.90"`.
pub fn parse_targets(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .with_context(|| format!("bad target '{t}'"))
        })
        .collect()
}

pub fn open_session(
    image: &Path,
    attention: &Path,
    weights: Option<&BTreeMap<String, f32>>,
    method: Method,
) -> Result<SessionContext> {
    let guide = load_guide(image).with_context(|| format!("reading image {}", image.display()))?;
    let stack = read_attention_file(attention)
        .with_context(|| format!("reading attention {}", attention.display()))?;
    Ok(SessionContext::new(
        &stack,
        weights,
        guide,
        SessionConfig::with_method(method),
    )?)
}

/// Adds the clicks in order and returns the final mask.
pub fn segment_clicks(
    ctx: &mut SessionContext,
    clicks: &[(usize, usize, Label)],
) -> Result<BinaryMask> {
    for &(x, y, label) in clicks {
        ctx.add_point(x, y, label)
            .with_context(|| format!("adding click ({x}, {y})"))?;
    }
    Ok(ctx.segment()?.mask)
}

/// Grayscale image of `values` scaled by their maximum, enlarged to
/// `width×height` by nearest-neighbor sampling.
pub fn heat_image(values: &[f64], w: usize, h: usize, width: usize, height: usize) -> GrayImage {
    let peak = values.iter().copied().fold(0.0, f64::max);
    GrayImage::from_fn(width as u32, height as u32, |x, y| {
        let cx = x as usize * w / width;
        let cy = y as usize * h / height;
        let v = if peak > 0.0 {
            values[cy * w + cx] / peak
        } else {
            0.0
        };
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Writes chain snapshots, partial Markov-maps, final maps, score curves
/// and per-point segment previews for an M2N2 session. Returns the files
/// written.
pub fn export_diagnostics(
    ctx: &mut SessionContext,
    clicks: &[(usize, usize, Label)],
    steps: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if ctx.config().method != Method::M2n2 {
        bail!("diagnostics need an m2n2 session");
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let (width, height) = (ctx.width(), ctx.height());
    let (gh, gw) = (ctx.matrix().h(), ctx.matrix().w());
    let mut steps = steps.to_vec();
    steps.sort_unstable();
    steps.dedup();

    for &(x, y, label) in clicks {
        let point = ctx.add_point(x, y, label)?;
        let cell = ctx.cell_of(x, y);
        let id = point.id;

        let mut chain = MarkovChain::new(ctx.matrix(), cell)?;
        for &t in &steps {
            while chain.time() < t {
                chain.step()?;
            }
            let p: Vec<f64> = chain.state().iter().map(|&v| v as f64).collect();
            let path = out_dir.join(format!("point{id}_p_t{t:04}.png"));
            heat_image(&p, gw, gh, width, height).save(&path)?;
            written.push(path);

            let params = MarkovParams {
                max_iters: t.max(1),
                ..ctx.config().markov
            };
            let partial = markov_map(ctx.matrix(), cell, &params)?;
            let path = out_dir.join(format!("point{id}_markov_t{t:04}.png"));
            heat_image(&partial.values, gw, gh, width, height).save(&path)?;
            written.push(path);
        }

        let map = ctx.compute_point_map(&point)?;
        let full: Vec<f64> = map.iter().map(|&v| v as f64).collect();
        let path = out_dir.join(format!("point{id}_map.png"));
        heat_image(&full, width, height, width, height).save(&path)?;
        written.push(path);
    }

    let curves = ctx.score_curves()?;
    let path = out_dir.join("scores.csv");
    let mut f = fs::File::create(&path)?;
    writeln!(
        f,
        "point_id,lambda,s_prior,s_edge,s_pos,s_neg,total,selected"
    )?;
    for c in &curves {
        for s in &c.scores {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                c.point_id,
                s.lambda,
                s.s_prior,
                s.s_edge,
                s.s_pos,
                s.s_neg,
                s.total,
                (s.lambda == c.lambda) as u8
            )?;
        }
    }
    written.push(path);

    for (p, c) in ctx.points().to_vec().iter().zip(&curves) {
        let map = ctx.compute_point_map(p)?;
        let preview =
            BinaryMask::from_fn(width, height, |x, y| map[y * width + x] as f64 <= c.lambda);
        let path = out_dir.join(format!("point{}_segment.png", p.id));
        preview.to_image().save(&path)?;
        written.push(path);
    }

    let path = out_dir.join("mask.png");
    ctx.segment()?.mask.to_image().save(&path)?;
    written.push(path);
    Ok(written)
}
