//! Map accuracy and result tables.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{GridSpec, Link, Point3};
use crate::radio_model::{ChannelModel, ObstacleMap, PreparedLink, PropagationParams};

use super::scenario::{Labeler, Scenario};

/// Held-out links with their noiseless labels, prepared for fast MAE
/// evaluation.
#[derive(Debug, Clone)]
pub struct EvalSet {
    links: Vec<PreparedLink>,
    labels: Vec<f64>,
}

impl EvalSet {
    pub fn new(
        model: &ChannelModel,
        links: &[Link],
        labeler: &Labeler,
        theta_true: &PropagationParams,
        h_true: &ObstacleMap,
    ) -> Result<Self> {
        if links.is_empty() {
            return Err(invalid("evaluation link set is empty"));
        }
        let labels = links
            .iter()
            .map(|l| labeler.gain(&model.grid, l, theta_true, h_true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { links: links.iter().map(|l| model.prepare_link(l)).collect(), labels })
    }

    /// Users on a `density x density` grid of positions at user height,
    /// linked to the first `n_bs` base stations of the scenario.
    pub fn for_scenario(model: &ChannelModel, scenario: &Scenario, density: usize, n_bs: usize) -> Result<Self> {
        let links = eval_links(&scenario.grid, scenario.config.user_height, &scenario.base_stations, density, n_bs)?;
        Self::new(model, &links, &scenario.config.labeler, &scenario.theta_true, &scenario.h_true)
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    /// Mean absolute error (dB) of the model `(theta, h)` against the labels.
    pub fn mae(&self, model: &ChannelModel, theta: &PropagationParams, h: &[f64]) -> f64 {
        let sum: f64 = self
            .links
            .iter()
            .zip(&self.labels)
            .map(|(l, y)| (model.gain_prepared(l, theta, h) - y).abs())
            .sum();
        sum / self.links.len() as f64
    }
}

/// Uniform `density x density` user positions crossed with the first
/// `n_bs` base stations.
pub fn eval_links(grid: &GridSpec, user_height: f64, stations: &[Point3], density: usize, n_bs: usize) -> Result<Vec<Link>> {
    if density == 0 || n_bs == 0 || stations.is_empty() {
        return Err(invalid("evaluation grid needs positions and base stations"));
    }
    let (lo, hi) = grid.bounds();
    let mut links = Vec::with_capacity(density * density * n_bs);
    for iy in 0..density {
        for ix in 0..density {
            let x = lo[0] + (ix as f64 + 0.5) / density as f64 * (hi[0] - lo[0]);
            let y = lo[1] + (iy as f64 + 0.5) / density as f64 * (hi[1] - lo[1]);
            for bs in stations.iter().take(n_bs) {
                links.push(Link::new([x, y, user_height], *bs)?);
            }
        }
    }
    Ok(links)
}

/// Mean absolute difference between the model and the labeler over `links`.
#[allow(clippy::too_many_arguments)]
pub fn map_mae(
    model: &ChannelModel,
    theta: &PropagationParams,
    h: &ObstacleMap,
    labeler: &Labeler,
    theta_true: &PropagationParams,
    h_true: &ObstacleMap,
    links: &[Link],
) -> Result<f64> {
    if h.len() != model.grid.num_cells() {
        return Err(invalid("obstacle map does not match the grid"));
    }
    Ok(EvalSet::new(model, links, labeler, theta_true, h_true)?.mae(model, theta, h.heights()))
}

/// One evaluation point of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment: String,
    pub mechanism: String,
    pub mu: f64,
    pub rho: f64,
    pub nu: String,
    pub seed: u64,
    pub round: usize,
    pub mae_db: f64,
    /// Empty when every upload was excluded.
    pub rmse_m: Option<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean over rows of the per-checkpoint RMSE values.
    pub fn mean_rmse(&self) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter_map(|r| r.rmse_m).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// MAE at the last evaluated round.
    pub fn final_mae(&self) -> Option<f64> {
        self.rows.iter().max_by_key(|r| r.round).map(|r| r.mae_db)
    }
}

/// Appends rows to a CSV file and flushes after every batch, so completed
/// work survives an aborted sweep.
pub struct MetricsWriter {
    inner: csv::Writer<BufWriter<File>>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        let inner = csv::Writer::from_writer(BufWriter::new(file));
        Ok(Self { inner })
    }

    pub fn append(&mut self, rows: &[MetricsRow]) -> Result<()> {
        for r in rows {
            self.inner.serialize(r)?;
        }
        self.inner.flush()?;
        Ok(())
    }
}
