//! Headless sampling: one chain per (row, neuron), tiled into a PNG grid of
//! averaged samples plus a JSON file of activation traces.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::{Context, Result};
use ldam_core::grid::tile_grid;
use ldam_core::sampler::to_display;
use ldam_core::{Chain, Checkpoint, LdamError, NeuronObjective, NeuronRef, SamplerConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMetrics {
    pub neuron: NeuronRef,
    pub seed: u64,
    /// Step at which burn-in completed, if it did.
    pub burn_in_step: Option<u64>,
    pub samples_averaged: usize,
    pub final_activation: f64,
    pub final_disc_score: Option<f64>,
    /// Whether the tile shows the sample average (otherwise the last sample).
    pub tile_is_average: bool,
    pub trace: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMetrics {
    pub disc_weight: Option<f32>,
    pub chains: Vec<ChainMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub model: String,
    pub steps: u64,
    pub config: SamplerConfig,
    pub rows: Vec<RowMetrics>,
}

pub struct SampleJob {
    pub model: Arc<Checkpoint>,
    pub discriminator: Option<Arc<Checkpoint>>,
    pub neurons: Vec<NeuronRef>,
    /// One row per entry; `None` leaves the base config untouched.
    pub rows: Vec<Option<f32>>,
    pub base: SamplerConfig,
    pub steps: u64,
    pub threads: usize,
}

/// Chain seed: the base seed xor the neuron's unit index, so results do
/// not depend on scheduling.
pub fn chain_seed(base: u64, n: &NeuronRef) -> u64 {
    base ^ n.unit as u64
}

fn config_for(base: &SamplerConfig, disc_weight: Option<f32>, n: &NeuronRef) -> Result<SamplerConfig> {
    let mut cfg = base.clone();
    cfg.seed = chain_seed(base.seed, n);
    if let Some(w) = disc_weight {
        use ldam_core::{RegularizerKind, RegularizerSpec};
        cfg.regularizers.retain(|r| r.kind != RegularizerKind::Discriminator);
        cfg.regularizers.push(RegularizerSpec::new(RegularizerKind::Discriminator, w)?);
    }
    Ok(cfg)
}

fn run_chain(job: &SampleJob, disc_weight: Option<f32>, n: NeuronRef) -> Result<(Vec<u8>, ChainMetrics)> {
    let cfg = config_for(&job.base, disc_weight, &n)?;
    let seed = cfg.seed;
    let obj = Arc::new(NeuronObjective::new(job.model.clone(), n)?);
    let mut chain = Chain::new(obj, job.discriminator.clone(), cfg)?;
    let mut trace = Vec::with_capacity(job.steps as usize);
    let mut burn_in_step = None;
    for _ in 0..job.steps {
        let info = chain.advance()?;
        trace.push(info.activation as f32);
        if info.burn_in_done && burn_in_step.is_none() {
            burn_in_step = Some(info.step);
        }
    }
    let avg = chain.state().average.mean();
    let (tile, tile_is_average) = match avg {
        Ok(a) => (to_display(a.data()), true),
        Err(LdamError::NoSamples) => (to_display(chain.state().x.data()), false),
        Err(e) => return Err(e.into()),
    };
    let final_activation = match chain.activation() {
        Some(a) => a,
        None => {
            chain.refresh()?;
            chain.activation().unwrap_or(f64::NAN)
        }
    };
    Ok((
        tile,
        ChainMetrics {
            neuron: n,
            seed,
            burn_in_step,
            samples_averaged: chain.state().average.count(),
            final_activation,
            final_disc_score: chain.disc_score(),
            tile_is_average,
            trace,
        },
    ))
}

/// Runs every chain, spreading them over `job.threads` workers. Returns
/// the grid (rows × neurons) and the metrics.
pub fn run(job: &SampleJob, model_name: &str) -> Result<(ldam_core::grid::Grid, SampleMetrics)> {
    let cells: Vec<(usize, usize)> = (0..job.rows.len())
        .flat_map(|r| (0..job.neurons.len()).map(move |c| (r, c)))
        .collect();
    let results: Mutex<Vec<Option<Result<(Vec<u8>, ChainMetrics)>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..job.threads.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(r, c)) = cells.get(i) else { break };
                let out = run_chain(job, job.rows[r], job.neurons[c]);
                results.lock().expect("results")[i] = Some(out);
            });
        }
    });
    let mut tiles = Vec::with_capacity(cells.len());
    let mut rows: Vec<RowMetrics> = job
        .rows
        .iter()
        .map(|&w| RowMetrics {
            disc_weight: w,
            chains: Vec::new(),
        })
        .collect();
    for (i, res) in results.into_inner().expect("results").into_iter().enumerate() {
        let (r, c) = cells[i];
        let (tile, m) = res
            .expect("every cell ran")
            .with_context(|| format!("chain for {} in row {r}", job.neurons[c]))?;
        tiles.push(tile);
        rows[r].chains.push(m);
    }
    let shape = &job.model.arch.input_shape;
    let (h, w) = (shape[1], shape[2] * shape[0]);
    let grid = tile_grid(&tiles, h, w, job.neurons.len().max(1))?;
    Ok((
        grid,
        SampleMetrics {
            model: model_name.to_string(),
            steps: job.steps,
            config: job.base.clone(),
            rows,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ldam_core::build_lenet;

    fn job(threads: usize, steps: u64) -> SampleJob {
        let model = Arc::new(build_lenet(0));
        SampleJob {
            neurons: (0..3).map(|u| NeuronRef::output(&model.arch, u)).collect(),
            model,
            discriminator: None,
            rows: vec![None],
            base: SamplerConfig {
                avg_window: 5,
                burn_in: ldam_core::BurnInConfig {
                    window: 5,
                    threshold: 0.5,
                    stability: 10.0,
                },
                ..Default::default()
            },
            steps,
            threads,
        }
    }

    #[test]
    fn parallelism_does_not_change_results() {
        let (g1, m1) = run(&job(1, 30), "m").unwrap();
        let (g3, m3) = run(&job(3, 30), "m").unwrap();
        assert_eq!(g1, g3);
        assert_eq!(m1, m3);
        assert_eq!((g1.width, g1.height), (3 * 28, 28));
        assert_eq!(m1.rows[0].chains[2].seed, 2);
        assert_eq!(m1.rows[0].chains[0].trace.len(), 30);
    }

    #[test]
    fn zero_steps_shows_initializations() {
        let (g, m) = run(&job(2, 0), "m").unwrap();
        assert_eq!((g.width, g.height), (3 * 28, 28));
        assert!(m.rows[0].chains.iter().all(|c| !c.tile_is_average && c.trace.is_empty()));
    }
}
