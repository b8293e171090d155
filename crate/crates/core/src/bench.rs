//! Throughput of the packed engine against the dense oracle.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoding::RgbImage;
use crate::model::{LayerKind, Model, ModelError};
use crate::oracle;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub iters: usize,
    pub oracle_iters: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerTiming {
    pub layer: usize,
    pub kind: LayerKind,
    pub engine_ms: f64,
    pub oracle_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub iters: usize,
    pub oracle_iters: usize,
    pub threads: usize,
    pub engine_ms_per_image: f64,
    pub oracle_ms_per_image: f64,
    pub engine_images_per_sec: f64,
    pub oracle_images_per_sec: f64,
    /// Oracle time over engine time.
    pub speedup: f64,
    /// Whether engine and oracle produced the same logits on every image.
    pub logits_agree: bool,
    pub layers: Vec<LayerTiming>,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Times `iters` engine passes and `oracle_iters` oracle passes over seeded
/// random images. One untimed engine pass runs first.
pub fn run_bench(model: &Model, opts: BenchOptions) -> Result<BenchReport, ModelError> {
    let spec = model.spec();
    let iters = opts.iters.max(1);
    let oracle_iters = opts.oracle_iters.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let images: Vec<RgbImage> = (0..iters.max(oracle_iters))
        .map(|_| RgbImage::random(spec.image_width, spec.image_height, &mut rng))
        .collect();
    let n = spec.blocks.len();

    model.forward(&images[0])?;
    let mut engine_layers = vec![Duration::ZERO; n];
    let mut engine_logits = Vec::with_capacity(iters);
    let start = Instant::now();
    for img in &images[..iters] {
        let (out, times) = model.forward_timed(img)?;
        engine_layers
            .iter_mut()
            .zip(times)
            .for_each(|(a, t)| *a += t);
        engine_logits.push(out.logits);
    }
    let engine_total = start.elapsed();

    let mut oracle_layers = vec![Duration::ZERO; n];
    let mut logits_agree = true;
    let start = Instant::now();
    for (i, img) in images[..oracle_iters].iter().enumerate() {
        let run = oracle::forward(model, img);
        oracle_layers
            .iter_mut()
            .zip(&run.layer_times)
            .for_each(|(a, t)| *a += *t);
        let engine = match engine_logits.get(i) {
            Some(l) => l.clone(),
            None => model.forward(img)?.logits,
        };
        logits_agree &= engine
            .iter()
            .map(|&v| v as i64)
            .eq(run.logits.iter().copied());
    }
    let oracle_total = start.elapsed();

    let engine_ms = ms(engine_total) / iters as f64;
    let oracle_ms = ms(oracle_total) / oracle_iters as f64;
    Ok(BenchReport {
        iters,
        oracle_iters,
        threads: rayon::current_num_threads(),
        engine_ms_per_image: engine_ms,
        oracle_ms_per_image: oracle_ms,
        engine_images_per_sec: 1e3 / engine_ms,
        oracle_images_per_sec: 1e3 / oracle_ms,
        speedup: oracle_ms / engine_ms,
        logits_agree,
        layers: spec
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| LayerTiming {
                layer: i,
                kind: b.kind,
                engine_ms: ms(engine_layers[i]) / iters as f64,
                oracle_ms: ms(oracle_layers[i]) / oracle_iters as f64,
            })
            .collect(),
    })
}
