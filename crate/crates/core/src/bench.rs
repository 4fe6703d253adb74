//! Forward cost and buffer sizes as the number of input views grows.

use std::time::Instant;

use crate::decoder::UniGs;
use crate::error::{contract, Result};
use crate::scene::Scene;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub views: usize,
    pub forward_secs: f64,
    pub encoder_secs: f64,
    pub decoder_secs: f64,
    pub n_gaussians: usize,
    pub query_bytes: usize,
    pub gaussian_bytes: usize,
    pub kv_bytes: usize,
}

pub const DEFAULT_VIEW_COUNTS: [usize; 5] = [1, 2, 4, 6, 8];

/// Runs inference with the first `I` input views for each `I` in `counts`.
/// Timings are the best of `repeats` runs.
pub fn bench_views(model: &UniGs, scene: &Scene, counts: &[usize], repeats: usize) -> Result<Vec<BenchRow>> {
    let available = scene.split(crate::scene::Split::Input).len();
    if let Some(&max) = counts.iter().max() {
        if max > available {
            return contract(format!("benchmark needs {max} input views, scene has {available}"));
        }
    }
    counts
        .iter()
        .map(|&views| {
            let batch = scene.input_batch(Some(views))?;
            let mut best: Option<BenchRow> = None;
            for _ in 0..repeats.max(1) {
                let t = Instant::now();
                let (set, stats) = model.reconstruct(&batch)?;
                let row = BenchRow {
                    views,
                    forward_secs: t.elapsed().as_secs_f64(),
                    encoder_secs: stats.encoder_secs,
                    decoder_secs: stats.decoder_secs,
                    n_gaussians: set.len(),
                    query_bytes: stats.query_bytes,
                    gaussian_bytes: stats.gaussian_bytes,
                    kv_bytes: stats.kv_bytes,
                };
                if best.as_ref().is_none_or(|b| row.forward_secs < b.forward_secs) {
                    best = Some(row);
                }
            }
            Ok(best.expect("at least one repeat"))
        })
        .collect()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("views,forward_secs,encoder_secs,decoder_secs,n_gaussians,query_bytes,gaussian_bytes,kv_bytes\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{},{},{},{}\n",
            r.views, r.forward_secs, r.encoder_secs, r.decoder_secs, r.n_gaussians, r.query_bytes, r.gaussian_bytes, r.kv_bytes
        ));
    }
    s
}

/// Checks the columns that must not depend on the view count.
pub fn constant_columns(rows: &[BenchRow], n: usize) -> std::result::Result<(), String> {
    let Some(first) = rows.first() else {
        return Err("no benchmark rows".into());
    };
    for r in rows {
        if r.n_gaussians != n {
            return Err(format!("I={}: {} Gaussians, expected {n}", r.views, r.n_gaussians));
        }
        if r.query_bytes != first.query_bytes || r.gaussian_bytes != first.gaussian_bytes {
            return Err(format!(
                "I={}: decoder buffers {}/{} bytes differ from I={} ({}/{})",
                r.views, r.query_bytes, r.gaussian_bytes, first.views, first.query_bytes, first.gaussian_bytes
            ));
        }
    }
    Ok(())
}
