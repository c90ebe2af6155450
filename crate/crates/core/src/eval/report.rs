use std::fs;
use std::path::Path;

use fewmark_autodiff::{seed_chain, Tensor};

use crate::data::{render_sample, Labelmap, Registry, RenderConfig, Sample};
use crate::error::{Error, Result};

use super::run::{summarize_rows, EpisodeResult, Summary};
use super::similarity::SimilarityRow;

pub const EPISODES_HEADER: &str = "method,benchmark,category,shot,episode_seed,ne";

/// Results table as CSV. Floats use the shortest round-trip formatting, so
/// parsing the text back recovers the exact values.
pub fn episodes_csv(results: &[EpisodeResult]) -> String {
    let mut out = String::from(EPISODES_HEADER);
    out.push('\n');
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method, r.benchmark, r.category_id, r.shot, r.episode_seed, r.ne
        ));
    }
    out
}

/// Recomputes summaries from a results CSV. Row order is preserved, so the
/// aggregation sums run in the same order as `summarize` over the original
/// results and reproduce them exactly.
pub fn summaries_from_csv(csv: &str) -> Result<Vec<Summary>> {
    let mut lines = csv.lines();
    match lines.next() {
        Some(header) if header == EPISODES_HEADER => {}
        other => {
            return Err(Error::data(format!(
                "episodes CSV header {other:?} does not match {EPISODES_HEADER:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::data(format!(
                "episodes CSV row {} has {} fields",
                i + 2,
                fields.len()
            )));
        }
        let parse_err =
            |what: &str| Error::data(format!("episodes CSV row {}: bad {what}", i + 2));
        rows.push((
            fields[0].to_string(),
            fields[1].parse::<u8>().map_err(|_| parse_err("benchmark"))?,
            fields[3].parse::<usize>().map_err(|_| parse_err("shot"))?,
            fields[5].parse::<f64>().map_err(|_| parse_err("ne"))?,
        ));
    }
    summarize_rows(&rows)
}

pub fn summary_json(summaries: &[Summary]) -> Result<String> {
    let mut out = serde_json::to_string_pretty(summaries)
        .map_err(|e| Error::data(format!("summary serialization failed: {e}")))?;
    out.push('\n');
    Ok(out)
}

pub const SIMILARITY_HEADER: &str = "variant,category,same_landmark,cross_landmark,episodes";

pub fn similarity_csv(rows: &[(String, SimilarityRow)]) -> String {
    let mut out = String::from(SIMILARITY_HEADER);
    out.push('\n');
    for (variant, r) in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            variant, r.category_id, r.same_landmark, r.cross_landmark, r.episodes
        ));
    }
    out
}

fn pgm_bytes(h: usize, w: usize, grey: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(grey);
    bytes
}

/// One heatmap channel as an 8-bit PGM, linearly rescaled so the channel
/// maximum maps to 255. A non-positive maximum yields an all-black image.
pub fn heatmap_pgm_bytes(channel: &[f64], h: usize, w: usize) -> Result<Vec<u8>> {
    if channel.len() != h * w {
        return Err(Error::data(format!(
            "heatmap channel has {} values for a {h}x{w} grid",
            channel.len()
        )));
    }
    let max = channel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let grey = channel.iter().map(|&v| {
        if max > 0.0 {
            (v / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    });
    Ok(pgm_bytes(h, w, grey))
}

/// Writes one PGM per heatmap channel as `<dir>/<landmark index>.pgm`.
pub fn export_heatmaps(heatmaps: &Tensor, dir: &Path) -> Result<()> {
    if heatmaps.rank() != 3 {
        return Err(Error::data(format!(
            "heatmap export expects rank-3 heatmaps, got {:?}",
            heatmaps.dims()
        )));
    }
    let (n, h, w) = (heatmaps.dims()[0], heatmaps.dims()[1], heatmaps.dims()[2]);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for ch in 0..n {
        let bytes = heatmap_pgm_bytes(&heatmaps.data()[ch * h * w..(ch + 1) * h * w], h, w)?;
        let path = dir.join(format!("{ch}.pgm"));
        fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// A rendered image (grey values in `[0, 1]`) as an 8-bit PGM.
pub fn image_pgm_bytes(sample: &Sample) -> Vec<u8> {
    let grey = sample
        .image
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
    pgm_bytes(sample.geom.image_h, sample.geom.image_w, grey)
}

/// Landmark coordinates and garment area as CSV; the area repeats on every
/// row so each row is self-contained.
pub fn coords_csv(sample: &Sample) -> String {
    let mut out = String::from("landmark,x,y,area\n");
    for (i, (x, y)) in sample.coords.iter().enumerate() {
        out.push_str(&format!("{i},{x},{y},{}\n", sample.area));
    }
    out
}

/// Run-length encoding of the one-hot labelmap: a header line with the
/// dimensions, then alternating zero-run and one-run lengths over the
/// flattened channel-major mask, starting with a zero-run.
pub fn labelmap_rle(labelmap: &Labelmap) -> String {
    let (n, h, w) = (labelmap.channels(), labelmap.feat_h, labelmap.feat_w);
    let mut flat = vec![false; n * h * w];
    for (ch, &(r, c)) in labelmap.cells.iter().enumerate() {
        flat[(ch * h + r) * w + c] = true;
    }
    let mut runs: Vec<usize> = Vec::new();
    let mut current = false;
    let mut count = 0usize;
    for bit in flat {
        if bit == current {
            count += 1;
        } else {
            runs.push(count);
            current = bit;
            count = 1;
        }
    }
    runs.push(count);
    let body: Vec<String> = runs.iter().map(|r| r.to_string()).collect();
    format!("labelmap {n} {h} {w}\n{}\n", body.join(" "))
}

pub fn labelmap_from_rle(text: &str) -> Result<Labelmap> {
    let bad = |why: &str| Error::data(format!("labelmap RLE: {why}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty input"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "labelmap" {
        return Err(bad("malformed header"));
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric dimension"));
    let (n, h, w) = (dim(parts[1])?, dim(parts[2])?, dim(parts[3])?);
    let body = lines.next().ok_or_else(|| bad("missing run data"))?;
    let mut flat = Vec::with_capacity(n * h * w);
    let mut bit = false;
    for run in body.split_whitespace() {
        let len = run.parse::<usize>().map_err(|_| bad("non-numeric run length"))?;
        flat.extend(std::iter::repeat(bit).take(len));
        bit = !bit;
    }
    if flat.len() != n * h * w {
        return Err(bad("run lengths do not cover the grid"));
    }
    let mut cells = vec![None; n];
    for (i, hot) in flat.iter().enumerate() {
        if *hot {
            let ch = i / (h * w);
            let rest = i % (h * w);
            if cells[ch].replace((rest / w, rest % w)).is_some() {
                return Err(bad("channel has more than one hot cell"));
            }
        }
    }
    let cells: Option<Vec<(usize, usize)>> = cells.into_iter().collect();
    Ok(Labelmap {
        feat_h: h,
        feat_w: w,
        cells: cells.ok_or_else(|| bad("channel has no hot cell"))?,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Renders `per_category` deterministic samples per category and writes each
/// as `<out>/<category name>/sample_<i>/{image.pgm, coords.csv, labelmap.rle}`.
pub fn dump_samples(
    registry: &Registry,
    rc: &RenderConfig,
    out: &Path,
    per_category: usize,
    seed: u64,
) -> Result<()> {
    for category in registry.categories() {
        for i in 0..per_category {
            let sample = render_sample(
                category,
                rc,
                seed_chain(&[seed, 7, category.id as u64, i as u64]),
            )?;
            let dir = out.join(&category.name).join(format!("sample_{i}"));
            write_bytes(&dir.join("image.pgm"), &image_pgm_bytes(&sample))?;
            write_text(&dir.join("coords.csv"), &coords_csv(&sample))?;
            write_text(&dir.join("labelmap.rle"), &labelmap_rle(&sample.labelmap))?;
        }
    }
    Ok(())
}
