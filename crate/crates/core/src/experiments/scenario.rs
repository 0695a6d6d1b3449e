//! Synthetic city generation and measurement labelling.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed_engine::UserDataset;
use crate::geometry::{GridSpec, Link, Point2, Point3};
use crate::radio_model::{gaussian, ChannelModel, Measurement, ObstacleMap, PropagationParams};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circular,
    Cubic,
    Irregular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildingSpec {
    pub count: usize,
    /// Shapes drawn uniformly at random for each building.
    pub shapes: Vec<Shape>,
    /// Building heights (m).
    pub height_range: [f64; 2],
    /// Side length of a building's bounding box (m).
    pub size_range: [f64; 2],
    /// Minimum clearance between bounding boxes (m).
    pub gap: f64,
}

impl Default for BuildingSpec {
    fn default() -> Self {
        Self {
            count: 10,
            shapes: vec![Shape::Circular, Shape::Cubic, Shape::Irregular],
            height_range: [10.0, 45.0],
            size_range: [8.0, 20.0],
            gap: 5.0,
        }
    }
}

/// How ground-truth gains are produced from `(theta*, h*)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Labeler {
    /// Hard LOS/NLOS switch.
    #[default]
    Segmented,
    /// Logistic transition with the given sharpness (1/m).
    Smoothed { sharpness: f64 },
}

impl Labeler {
    /// Noiseless label gain (dB).
    pub fn gain(&self, grid: &GridSpec, link: &Link, theta: &PropagationParams, h: &ObstacleMap) -> Result<f64> {
        match *self {
            Labeler::Segmented => ChannelModel::with_default_sharpness(*grid).segmented_gain(link, theta, h),
            Labeler::Smoothed { sharpness } => ChannelModel::new(*grid, sharpness)?.gain(link, theta, h),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Area width and height (m).
    pub area: [f64; 2],
    pub cell_size: f64,
    pub buildings: BuildingSpec,
    pub n_users: usize,
    pub n_bs: usize,
    pub bs_altitude: f64,
    pub user_height: f64,
    pub samples_per_user: usize,
    pub theta_true: PropagationParams,
    /// Measurement noise standard deviation (dB).
    pub noise_std: f64,
    pub labeler: Labeler,
    /// Upper bound on obstacle heights, used to initialize training.
    pub h_max: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            area: [100.0, 100.0],
            cell_size: 5.0,
            buildings: BuildingSpec::default(),
            n_users: 20,
            n_bs: 50,
            bs_altitude: 50.0,
            user_height: 1.5,
            samples_per_user: 50,
            theta_true: PropagationParams::new(-22.0, -28.0, -36.0, -22.0),
            noise_std: 1.0,
            labeler: Labeler::Segmented,
            h_max: 60.0,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn grid(&self) -> Result<GridSpec> {
        let nx = (self.area[0] / self.cell_size).round();
        let ny = (self.area[1] / self.cell_size).round();
        if !(nx >= 1.0 && ny >= 1.0)
            || (nx * self.cell_size - self.area[0]).abs() > 1e-9 * self.area[0]
            || (ny * self.cell_size - self.area[1]).abs() > 1e-9 * self.area[1]
        {
            return Err(Error::Config(format!(
                "area {:?} is not a whole number of {} m cells",
                self.area, self.cell_size
            )));
        }
        GridSpec::new([0.0, 0.0], self.cell_size, nx as usize, ny as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        self.grid()?;
        let [lo, hi] = self.buildings.height_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return cfg(format!("invalid building height range [{lo}, {hi}]"));
        }
        if hi > self.h_max {
            return cfg(format!("h_max {} is below the tallest building {hi}", self.h_max));
        }
        let [slo, shi] = self.buildings.size_range;
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return cfg(format!("invalid building size range [{slo}, {shi}]"));
        }
        if self.buildings.count > 0 && self.buildings.shapes.is_empty() {
            return cfg("building shape list is empty".into());
        }
        if self.buildings.gap < 0.0 {
            return cfg("building gap must be non-negative".into());
        }
        if self.n_users == 0 || self.n_bs == 0 || self.samples_per_user == 0 {
            return cfg("scenario needs users, base stations and samples".into());
        }
        if !(self.user_height >= 0.0 && self.bs_altitude >= 0.0) {
            return cfg("altitudes must be non-negative".into());
        }
        if self.user_height == self.bs_altitude {
            return cfg("users and base stations must be at different altitudes".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return cfg("noise_std must be non-negative".into());
        }
        if !self.theta_true.is_finite() {
            return cfg("theta_true must be finite".into());
        }
        let dz = (self.bs_altitude - self.user_height).abs();
        let dmax = (self.area[0].powi(2) + self.area[1].powi(2) + dz * dz).sqrt();
        for d in [dz, dmax] {
            let l = d.log10();
            if self.theta_true.los_gain(l) < self.theta_true.nlos_gain(l) {
                return cfg(format!("theta_true gives NLOS gain above LOS gain at {d:.1} m"));
            }
        }
        if let Labeler::Smoothed { sharpness } = self.labeler {
            if !(sharpness > 0.0 && sharpness.is_finite()) {
                return cfg("labeler sharpness must be positive".into());
            }
        }
        Ok(())
    }
}

/// A building footprint in the horizontal plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Footprint {
    /// Axis-aligned rectangle `[x0, y0, x1, y1]`.
    Rect { bounds: [f64; 4] },
    Circle { center: Point2, radius: f64 },
    /// Union of overlapping rectangles.
    Union { rects: Vec<[f64; 4]> },
}

impl Footprint {
    fn bbox(&self) -> [f64; 4] {
        match self {
            Footprint::Rect { bounds } => *bounds,
            Footprint::Circle { center, radius } => {
                [center[0] - radius, center[1] - radius, center[0] + radius, center[1] + radius]
            }
            Footprint::Union { rects } => rects.iter().fold(
                [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
                |a, r| [a[0].min(r[0]), a[1].min(r[1]), a[2].max(r[2]), a[3].max(r[3])],
            ),
        }
    }

    /// Whether the footprint covers part of the cell `[x0, y0, x1, y1]` with
    /// positive area.
    pub fn overlaps(&self, cell: [f64; 4]) -> bool {
        const TOL: f64 = 1e-9;
        let rect_overlap = |r: &[f64; 4]| {
            r[2].min(cell[2]) - r[0].max(cell[0]) > TOL && r[3].min(cell[3]) - r[1].max(cell[1]) > TOL
        };
        match self {
            Footprint::Rect { bounds } => rect_overlap(bounds),
            Footprint::Union { rects } => rects.iter().any(rect_overlap),
            Footprint::Circle { center, radius } => {
                let nx = center[0].clamp(cell[0], cell[2]);
                let ny = center[1].clamp(cell[1], cell[3]);
                let d2 = (nx - center[0]).powi(2) + (ny - center[1]).powi(2);
                d2 < (radius - TOL).max(0.0).powi(2)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub footprint: Footprint,
    pub height: f64,
}

/// Per-cell maximum building height over each cell footprint.
pub fn rasterize(grid: &GridSpec, buildings: &[Building]) -> ObstacleMap {
    let cs = grid.cell_size();
    let heights = (0..grid.num_cells())
        .map(|m| {
            let c = grid.center_of(m);
            let cell = [c[0] - 0.5 * cs, c[1] - 0.5 * cs, c[0] + 0.5 * cs, c[1] + 0.5 * cs];
            buildings
                .iter()
                .filter(|b| b.footprint.overlaps(cell))
                .fold(0.0_f64, |a, b| a.max(b.height))
        })
        .collect();
    ObstacleMap::new(heights).expect("grid has at least one cell")
}

/// A generated city with its users and their labelled datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub grid: GridSpec,
    pub buildings: Vec<Building>,
    pub h_true: ObstacleMap,
    pub theta_true: PropagationParams,
    pub base_stations: Vec<Point3>,
    pub users: Vec<UserDataset>,
}

impl Scenario {
    pub fn truths(&self) -> Vec<(usize, Point2)> {
        self.users.iter().map(|u| (u.user_id, [u.p_u[0], u.p_u[1]])).collect()
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn draw_footprint<R: Rng + ?Sized>(rng: &mut R, shape: Shape, origin: Point2, w: f64, h: f64) -> Footprint {
    let [x, y] = origin;
    match shape {
        Shape::Cubic => Footprint::Rect { bounds: [x, y, x + w, y + h] },
        Shape::Circular => {
            let r = 0.5 * w.min(h);
            Footprint::Circle { center: [x + r, y + r], radius: r }
        }
        Shape::Irregular => {
            let n = rng.random_range(2..=4);
            let bw = uniform(rng, 0.5 * w, w);
            let bh = uniform(rng, 0.5 * h, h);
            let bx = x + uniform(rng, 0.0, w - bw);
            let by = y + uniform(rng, 0.0, h - bh);
            let (cx, cy) = (bx + 0.5 * bw, by + 0.5 * bh);
            let mut rects = vec![[bx, by, bx + bw, by + bh]];
            for _ in 1..n {
                let rw = uniform(rng, 0.3 * w, w);
                let rh = uniform(rng, 0.3 * h, h);
                // keep the base center inside so the pieces overlap
                let x0 = uniform(rng, (cx - rw).max(x), cx.min(x + w - rw));
                let y0 = uniform(rng, (cy - rh).max(y), cy.min(y + h - rh));
                rects.push([x0, y0, x0 + rw, y0 + rh]);
            }
            Footprint::Union { rects }
        }
    }
}

/// Builds the city, users and labelled measurements for `config`.
pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let grid = config.grid()?;
    let [area_w, area_h] = config.area;
    let spec = &config.buildings;
    let mut rng = rng::stream(config.seed, &[rng::purpose::SCENARIO]);

    let mut buildings: Vec<Building> = Vec::with_capacity(spec.count);
    let mut boxes: Vec<[f64; 4]> = Vec::with_capacity(spec.count);
    for k in 0..spec.count {
        let mut placed = false;
        for _ in 0..500 {
            let shape = spec.shapes[rng.random_range(0..spec.shapes.len())];
            let w = uniform(&mut rng, spec.size_range[0], spec.size_range[1]);
            let h = uniform(&mut rng, spec.size_range[0], spec.size_range[1]);
            if w > area_w || h > area_h {
                continue;
            }
            let origin = [uniform(&mut rng, 0.0, area_w - w), uniform(&mut rng, 0.0, area_h - h)];
            let fp = draw_footprint(&mut rng, shape, origin, w, h);
            let bb = fp.bbox();
            let g = spec.gap;
            let clear = boxes.iter().all(|o| {
                bb[0] >= o[2] + g || o[0] >= bb[2] + g || bb[1] >= o[3] + g || o[1] >= bb[3] + g
            });
            if clear {
                let height = uniform(&mut rng, spec.height_range[0], spec.height_range[1]);
                boxes.push(bb);
                buildings.push(Building { footprint: fp, height });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place building {} of {} without overlap",
                k + 1,
                spec.count
            )));
        }
    }
    let h_true = rasterize(&grid, &buildings);

    let free: Vec<usize> = (0..grid.num_cells()).filter(|&m| h_true.heights()[m] == 0.0).collect();
    if free.is_empty() {
        return Err(Error::Config("no building-free cell left for users".into()));
    }
    let cells: Vec<usize> = if config.n_users <= free.len() {
        sample(&mut rng, free.len(), config.n_users).iter().map(|i| free[i]).collect()
    } else {
        (0..config.n_users).map(|_| free[rng.random_range(0..free.len())]).collect()
    };
    let cs = grid.cell_size();
    let positions: Vec<Point3> = cells
        .iter()
        .map(|&m| {
            let c = grid.center_of(m);
            [
                c[0] + uniform(&mut rng, -0.5 * cs, 0.5 * cs),
                c[1] + uniform(&mut rng, -0.5 * cs, 0.5 * cs),
                config.user_height,
            ]
        })
        .collect();
    let base_stations: Vec<Point3> = (0..config.n_bs)
        .map(|_| [uniform(&mut rng, 0.0, area_w), uniform(&mut rng, 0.0, area_h), config.bs_altitude])
        .collect();

    let mut users = Vec::with_capacity(config.n_users);
    for (id, p_u) in positions.into_iter().enumerate() {
        let mut r = rng::stream(config.seed, &[rng::purpose::MEASUREMENT, id as u64]);
        let picks: Vec<usize> = if config.samples_per_user <= config.n_bs {
            let mut v = sample(&mut r, config.n_bs, config.samples_per_user).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..config.samples_per_user).map(|_| r.random_range(0..config.n_bs)).collect()
        };
        let mut samples = Vec::with_capacity(picks.len());
        for b in picks {
            let link = Link::new(p_u, base_stations[b])?;
            let g = config.labeler.gain(&grid, &link, &config.theta_true, &h_true)?;
            samples.push(Measurement { link, y: g + gaussian(config.noise_std, &mut r)? });
        }
        users.push(UserDataset::new(id, p_u, samples)?);
    }

    Ok(Scenario {
        config: config.clone(),
        grid,
        buildings,
        h_true,
        theta_true: config.theta_true,
        base_stations,
        users,
    })
}
