//! Ego-centered top-down rasterizer and two-frame observation stacking.

use std::collections::VecDeque;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use steer_nn::Tensor;

use crate::track::Track;
use crate::world::{CarState, World};

pub const FRAME_CHANNELS: usize = 3;
pub const OBS_CHANNELS: usize = 2 * FRAME_CHANNELS;

/// Speed shown as full brightness in the HUD box.
const HUD_FULL_SCALE: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    /// Distance ahead of the car covered by the window, meters.
    pub forward_m: f64,
    /// Half the lateral extent of the window, meters.
    pub lateral_m: f64,
    pub heading_ray_m: f64,
    pub hud: bool,
    /// Ticks between the two stacked frames.
    pub gap_ticks: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            height: 48,
            width: 64,
            forward_m: 40.0,
            lateral_m: 10.0,
            heading_ray_m: 20.0,
            hud: true,
            gap_ticks: 5,
        }
    }
}

impl RenderConfig {
    pub fn with_size(height: usize, width: usize) -> Self {
        RenderConfig {
            height,
            width,
            ..RenderConfig::default()
        }
    }

    pub fn row_m(&self) -> f64 {
        self.forward_m / self.height as f64
    }

    pub fn col_m(&self) -> f64 {
        2.0 * self.lateral_m / self.width as f64
    }

    /// Forward distance of the center of raster row `r` (row 0 is farthest).
    pub fn row_forward(&self, r: usize) -> f64 {
        (self.height as f64 - r as f64 - 0.5) * self.row_m()
    }

    /// Lateral offset (positive left) of the center of raster column `c`.
    pub fn col_lateral(&self, c: usize) -> f64 {
        self.lateral_m - (c as f64 + 0.5) * self.col_m()
    }

    /// Rows and columns of the HUD speed box in the top-right corner.
    pub fn hud_region(&self) -> (Range<usize>, Range<usize>) {
        let rows = self.height.div_ceil(8);
        let cols = self.width.div_ceil(6);
        (0..rows, self.width - cols..self.width)
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        [OBS_CHANNELS, self.height, self.width]
    }
}

/// Three planes of `height x width` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn plane(&self, ch: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.data[ch * p..(ch + 1) * p]
    }

    pub fn at(&self, ch: usize, row: usize, col: usize) -> f32 {
        self.data[(ch * self.height + row) * self.width + col]
    }

    fn set(&mut self, ch: usize, row: usize, col: usize, v: f32) {
        self.data[(ch * self.height + row) * self.width + col] = v;
    }

    /// Row-major interleaved RGB bytes.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let p = self.height * self.width;
        let mut out = Vec::with_capacity(3 * p);
        for i in 0..p {
            for ch in 0..FRAME_CHANNELS {
                out.push(quantize(self.data[ch * p + i]));
            }
        }
        out
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(v: u8) -> f32 {
    v as f32 / 255.0
}

pub fn render(world: &World, config: &RenderConfig) -> Frame {
    render_state(world.track(), world.state(), config)
}

pub fn render_state(track: &Track, car: &CarState, config: &RenderConfig) -> Frame {
    let (h, w) = (config.height, config.width);
    let mut frame = Frame {
        height: h,
        width: w,
        data: vec![0.0; FRAME_CHANNELS * h * w],
    };
    let base = track.pose(car.s);
    let (cx, cy) = base.offset(car.d);
    let (sin, cos) = base.heading.sin_cos();
    let half_w = track.half_width();
    let col_m = config.col_m();
    let mut lines: Vec<f64> = vec![-half_w, half_w];
    if track.lane_marks() {
        let n = track.lane_count();
        lines.extend((1..n).map(|j| (j as f64 - n as f64 / 2.0) * track.lane_width()));
    }
    for r in 0..h {
        let f = config.row_forward(r);
        for c in 0..w {
            let l = config.col_lateral(c);
            let (x, y) = (cx + f * cos - l * sin, cy + f * sin + l * cos);
            let Some((_, d)) = track.to_frenet(x, y, car.s, 10.0, config.forward_m + 15.0) else {
                continue;
            };
            // Lateral coverage of a one-column-wide footprint centered at d.
            let road = ((half_w - d.abs()) / col_m + 0.5).clamp(0.0, 1.0);
            let marks: f64 = lines.iter().map(|&m| (1.0 - (d - m).abs() / col_m).max(0.0)).sum();
            frame.set(0, r, c, road as f32);
            frame.set(1, r, c, marks.min(1.0) as f32);
        }
    }
    draw_heading_ray(&mut frame, car.psi, config);
    if config.hud {
        let (rows, cols) = config.hud_region();
        let v = (car.speed / HUD_FULL_SCALE).clamp(0.0, 1.0) as f32;
        for r in rows {
            for c in cols.clone() {
                frame.set(2, r, c, v);
            }
        }
    }
    frame
}

fn draw_heading_ray(frame: &mut Frame, psi: f64, config: &RenderConfig) {
    let (row_m, col_m) = (config.row_m(), config.col_m());
    // Ray in raster units: origin at the bottom edge, lateral center.
    let (dir_f, dir_l) = (psi.cos() / row_m, psi.sin() / col_m);
    let norm = dir_f.hypot(dir_l);
    let (uf, ul) = (dir_f / norm, dir_l / norm);
    let len = config.heading_ray_m * norm;
    for r in 0..config.height {
        let pf = config.row_forward(r) / row_m;
        for c in 0..config.width {
            let pl = config.col_lateral(c) / col_m;
            let along = pf * uf + pl * ul;
            let across = (pf * ul - pl * uf).abs();
            if (0.0..=len).contains(&along) && across < 1.0 {
                frame.set(2, r, c, (1.0 - across) as f32);
            }
        }
    }
}

/// Six stacked channels quantized to bytes; the older frame comes first.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Observation {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), OBS_CHANNELS * height * width, "observation payload size");
        Observation { height, width, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        [OBS_CHANNELS, self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn write_f32(&self, dst: &mut [f32]) {
        for (d, &v) in dst.iter_mut().zip(&self.data) {
            *d = dequantize(v);
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        batch_tensor(std::slice::from_ref(self))
    }
}

/// Stacks observations of one shape into an `[n, 6, h, w]` tensor.
pub fn batch_tensor<O: std::borrow::Borrow<Observation>>(obs: &[O]) -> Tensor<f32> {
    let first = obs[0].borrow();
    let per = first.len();
    let mut data = vec![0.0; obs.len() * per];
    for (o, dst) in obs.iter().zip(data.chunks_exact_mut(per)) {
        o.borrow().write_f32(dst);
    }
    Tensor::new(vec![obs.len(), OBS_CHANNELS, first.height, first.width], data).expect("batch shape")
}

/// Ring of recent frames from which observations are assembled.
#[derive(Clone, Debug)]
pub struct FrameHistory {
    gap: usize,
    frames: VecDeque<Frame>,
}

impl FrameHistory {
    pub fn new(gap: usize) -> Self {
        FrameHistory {
            gap,
            frames: VecDeque::with_capacity(gap + 1),
        }
    }

    pub fn push(&mut self, frame: Frame) {
        if self.frames.len() == self.gap + 1 {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Stacks `frame(t - gap)` and `frame(t)`, duplicating the oldest frame while
/// the history is short, and zeroes the HUD box in both.
pub fn preprocess(history: &FrameHistory, config: &RenderConfig) -> Observation {
    let newest = history.frames.back().expect("preprocess needs at least one frame");
    let oldest = history.frames.front().expect("non-empty history");
    let (h, w) = (newest.height, newest.width);
    let p = h * w;
    let mut data = Vec::with_capacity(OBS_CHANNELS * p);
    for frame in [oldest, newest] {
        data.extend(frame.data.iter().map(|&v| quantize(v)));
    }
    let (rows, cols) = config.hud_region();
    for ch in 0..OBS_CHANNELS {
        for r in rows.clone() {
            for c in cols.clone() {
                data[ch * p + r * w + c] = 0;
            }
        }
    }
    Observation::new(h, w, data)
}

/// A world paired with the frame history its observations come from.
#[derive(Clone, Debug)]
pub struct Camera {
    pub config: RenderConfig,
    history: FrameHistory,
}

impl Camera {
    pub fn new(config: RenderConfig) -> Self {
        let history = FrameHistory::new(config.gap_ticks);
        Camera { config, history }
    }

    /// Starts a fresh history at the world's current state.
    pub fn reset(&mut self, world: &World) -> Observation {
        self.history.clear();
        self.capture(world)
    }

    pub fn capture(&mut self, world: &World) -> Observation {
        self.capture_state(world.track(), world.state())
    }

    pub fn capture_state(&mut self, track: &Track, car: &CarState) -> Observation {
        self.history.push(render_state(track, car, &self.config));
        preprocess(&self.history, &self.config)
    }

    /// Observation after a step: if the step restarted, the returned
    /// observation shows the pre-reset state and the history restarts at
    /// the spawn point, whose observation is the second value.
    pub fn after_step(&mut self, world: &World) -> (Observation, Option<Observation>) {
        match world.terminal_state() {
            Some(terminal) => {
                let terminal = *terminal;
                let last = self.capture_state(world.track(), &terminal);
                let fresh = self.reset(world);
                (last, Some(fresh))
            }
            None => (self.capture(world), None),
        }
    }
}
