//! The learnable neural field.
//!
//! A stack of dense 2D feature grids at increasing resolution is bilinearly
//! interpolated at the query coordinate, concatenated, and fed through a
//! two-hidden-layer ReLU MLP with a sigmoid head. All parameters live in one
//! flat vector described by a [`FieldLayout`].
//!
//! The field is generic over its scalar so training can run in `f32` while
//! gradient checks run in `f64`.

mod adam;
mod checkpoint;
mod real;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{lr_at, AdamState, LrSchedule};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use real::Real;

use crate::error::{Error, Result};
use crate::image::Coord;
use real::{gemm, Mat};

/// Multi-resolution grid settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodingConfig {
    pub levels: usize,
    /// Vertices per side at level 0.
    pub base_resolution: usize,
    /// Per-level resolution multiplier.
    pub growth: f64,
    pub features_per_level: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_resolution: 16,
            growth: 2.0,
            features_per_level: 2,
        }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::InvalidConfig("levels must be >= 1".into()));
        }
        if self.base_resolution < 2 {
            return Err(Error::InvalidConfig("base_resolution must be >= 2".into()));
        }
        if !self.growth.is_finite() || self.growth <= 1.0 {
            return Err(Error::InvalidConfig("growth must be > 1".into()));
        }
        if self.features_per_level < 1 {
            return Err(Error::InvalidConfig(
                "features_per_level must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Vertices per side at each level: `floor(base · growth^l)`.
    pub fn resolutions(&self) -> Vec<usize> {
        (0..self.levels)
            .map(|l| {
                let r = self.base_resolution as f64 * self.growth.powi(l as i32);
                (r + 1e-9).floor() as usize
            })
            .collect()
    }
}

/// Where each parameter block lives in the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldLayout {
    pub encoding: EncodingConfig,
    pub hidden_width: usize,
    pub out_channels: usize,
    resolutions: Vec<usize>,
    grid_offsets: Vec<usize>,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    len: usize,
}

impl FieldLayout {
    pub fn new(encoding: EncodingConfig, hidden_width: usize, out_channels: usize) -> Result<Self> {
        encoding.validate()?;
        if hidden_width == 0 {
            return Err(Error::InvalidConfig("hidden_width must be >= 1".into()));
        }
        if out_channels == 0 {
            return Err(Error::InvalidConfig("out_channels must be >= 1".into()));
        }
        let resolutions = encoding.resolutions();
        let f = encoding.features_per_level;
        let mut grid_offsets = Vec::with_capacity(resolutions.len());
        let mut off = 0;
        for r in &resolutions {
            grid_offsets.push(off);
            off += r * r * f;
        }
        let input = encoding.levels * f;
        let h = hidden_width;
        let w1 = off;
        let b1 = w1 + input * h;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + h * out_channels;
        let len = b3 + out_channels;
        Ok(Self {
            encoding,
            hidden_width,
            out_channels,
            resolutions,
            grid_offsets,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            len,
        })
    }

    pub fn param_count(&self) -> usize {
        self.len
    }

    pub fn input_dim(&self) -> usize {
        self.encoding.levels * self.encoding.features_per_level
    }

    pub fn grid_len(&self) -> usize {
        self.w1
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    /// Offset of the grid vertex `(i, j)` (i along u) at `level`.
    pub fn grid_index(&self, level: usize, i: usize, j: usize) -> usize {
        let r = self.resolutions[level];
        self.grid_offsets[level] + (j * r + i) * self.encoding.features_per_level
    }

    /// Ranges of the MLP blocks, in storage order: W1, b1, W2, b2, W3, b3.
    /// Weights are stored input-major (`W[in][out]`).
    pub fn mlp_blocks(&self) -> [std::ops::Range<usize>; 6] {
        [
            self.w1..self.b1,
            self.b1..self.w2,
            self.w2..self.b2,
            self.b2..self.w3,
            self.w3..self.b3,
            self.b3..self.len,
        ]
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Parameters of the field plus a stamp that changes on every mutation, so
/// tapes recorded against older values are rejected.
#[derive(Debug, Clone)]
pub struct FieldParams<T: Real> {
    layout: FieldLayout,
    values: Vec<T>,
    stamp: u64,
}

impl<T: Real> PartialEq for FieldParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layout == other.layout && self.values == other.values
    }
}

impl<T: Real> FieldParams<T> {
    /// Grid features ~ U(-1e-4, 1e-4); MLP weights ~ U(±sqrt(6 / fan_in));
    /// biases zero.
    pub fn init(layout: FieldLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![T::zero(); layout.len];
        for v in &mut values[..layout.grid_len()] {
            *v = T::of(rng.random_range(-1e-4..1e-4));
        }
        let h = layout.hidden_width;
        let fan_ins = [layout.input_dim(), h, h];
        let blocks = layout.mlp_blocks();
        for (k, fan_in) in fan_ins.into_iter().enumerate() {
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in &mut values[blocks[2 * k].clone()] {
                *v = T::of(rng.random_range(-bound..bound));
            }
        }
        Self {
            layout,
            values,
            stamp: fresh_stamp(),
        }
    }

    pub fn from_values(layout: FieldLayout, values: Vec<T>) -> Result<Self> {
        if values.len() != layout.len {
            return Err(Error::DimensionMismatch(format!(
                "layout expects {} parameters, got {}",
                layout.len,
                values.len()
            )));
        }
        Ok(Self {
            layout,
            values,
            stamp: fresh_stamp(),
        })
    }

    pub fn layout(&self) -> &FieldLayout {
        &self.layout
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Mutable access; invalidates outstanding tapes.
    pub fn values_mut(&mut self) -> &mut [T] {
        self.stamp = fresh_stamp();
        &mut self.values
    }

    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn convert<U: Real>(&self) -> FieldParams<U> {
        FieldParams {
            layout: self.layout.clone(),
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
            stamp: fresh_stamp(),
        }
    }

    /// Evaluates the field and records what the backward passes need.
    /// Predictions are returned row-major, `N × C`.
    pub fn forward(&self, xs: &[Coord]) -> Result<(Vec<f64>, ForwardTape<T>)> {
        let mut tape = ForwardTape::default();
        let preds = self.forward_into(xs, &mut tape)?;
        Ok((preds, tape))
    }

    /// [`forward`](Self::forward) that records into an existing tape,
    /// reusing its buffers.
    pub fn forward_into(&self, xs: &[Coord], tape: &mut ForwardTape<T>) -> Result<Vec<f64>> {
        for x in xs {
            x.check()?;
        }
        self.record(xs, tape);
        Ok(tape.y.iter().map(|v| v.as_f64()).collect())
    }

    /// Forward pass without keeping a tape, evaluated in chunks.
    pub fn predict(&self, xs: &[Coord]) -> Result<Vec<f64>> {
        const CHUNK: usize = 4096;
        for x in xs {
            x.check()?;
        }
        let mut out = Vec::with_capacity(xs.len() * self.layout.out_channels);
        let mut tape = ForwardTape::default();
        for chunk in xs.chunks(CHUNK) {
            self.record(chunk, &mut tape);
            out.extend(tape.y.iter().map(|v| v.as_f64()));
        }
        Ok(out)
    }

    fn record(&self, xs: &[Coord], tape: &mut ForwardTape<T>) {
        let lay = &self.layout;
        let n = xs.len();
        let levels = lay.encoding.levels;
        let fl = lay.encoding.features_per_level;
        let input = lay.input_dim();
        let h = lay.hidden_width;
        let c = lay.out_channels;
        let p = &self.values;

        tape.stamp = self.stamp;
        tape.n = n;
        refill(&mut tape.cells, n * levels, 0);
        refill(&mut tape.fracs, n * levels * 2, T::zero());
        refill(&mut tape.feats, n * input, T::zero());
        for (s, x) in xs.iter().enumerate() {
            for l in 0..levels {
                let r = lay.resolutions[l];
                let (i0, fu) = cell(x.u, r);
                let (j0, fv) = cell(x.v, r);
                let base = lay.grid_index(l, i0, j0);
                tape.cells[s * levels + l] = base as u32;
                let (fu, fv) = (T::of(fu), T::of(fv));
                tape.fracs[(s * levels + l) * 2] = fu;
                tape.fracs[(s * levels + l) * 2 + 1] = fv;
                let w = bilinear_weights(fu, fv);
                let corners = corner_offsets(base, r, fl);
                let out = &mut tape.feats[s * input + l * fl..s * input + (l + 1) * fl];
                for (k, o) in out.iter_mut().enumerate() {
                    *o = w[0] * p[corners[0] + k]
                        + w[1] * p[corners[1] + k]
                        + w[2] * p[corners[2] + k]
                        + w[3] * p[corners[3] + k];
                }
            }
        }

        bias_rows(&p[lay.b1..lay.w2], n, &mut tape.h1);
        dense(&tape.feats, n, input, &p[lay.w1..lay.b1], h, &mut tape.h1);
        relu(&mut tape.h1);
        bias_rows(&p[lay.b2..lay.w3], n, &mut tape.h2);
        dense(&tape.h1, n, h, &p[lay.w2..lay.b2], h, &mut tape.h2);
        relu(&mut tape.h2);
        bias_rows(&p[lay.b3..lay.len], n, &mut tape.y);
        dense(&tape.h2, n, h, &p[lay.w3..lay.b3], c, &mut tape.y);
        for v in &mut tape.y {
            *v = sigmoid(*v);
        }
    }

    fn check_tape(&self, tape: &ForwardTape<T>, upstream: &[f64]) -> Result<()> {
        if tape.stamp != self.stamp {
            return Err(Error::StaleTape {
                recorded: tape.stamp,
                current: self.stamp,
            });
        }
        let want = tape.n * self.layout.out_channels;
        if upstream.len() != want {
            return Err(Error::DimensionMismatch(format!(
                "upstream gradient has {} entries, expected {want}",
                upstream.len()
            )));
        }
        Ok(())
    }

    /// Gradient of `Σ upstream · pred` with respect to every parameter.
    pub fn backward_params(&self, tape: &mut ForwardTape<T>, upstream: &[f64]) -> Result<Vec<T>> {
        let mut grad = Vec::new();
        self.backward_params_into(tape, upstream, &mut grad)?;
        Ok(grad)
    }

    /// [`backward_params`](Self::backward_params) writing into `grad`,
    /// which is resized to the parameter count.
    pub fn backward_params_into(
        &self,
        tape: &mut ForwardTape<T>,
        upstream: &[f64],
        grad: &mut Vec<T>,
    ) -> Result<()> {
        self.check_tape(tape, upstream)?;
        let lay = &self.layout;
        let n = tape.n;
        let levels = lay.encoding.levels;
        let fl = lay.encoding.features_per_level;
        let input = lay.input_dim();
        let h = lay.hidden_width;
        let c = lay.out_channels;
        let p = &self.values;
        refill(grad, lay.len, T::zero());
        if n == 0 {
            return Ok(());
        }
        let ForwardTape {
            feats,
            cells,
            fracs,
            h1,
            h2,
            y,
            scratch,
            ..
        } = tape;
        let Scratch { dz, d1, d2, df, .. } = scratch;

        output_delta(y, upstream, dz);
        // layer 3
        gemm(
            T::one(),
            Mat::new(h2, h, n, 1, h),
            Mat::new(dz, n, c, c, 1),
            T::zero(),
            &mut grad[lay.w3..lay.b3],
        );
        col_sum(dz, n, c, &mut grad[lay.b3..lay.len]);
        sized(d2, n * h);
        gemm(
            T::one(),
            Mat::new(dz, n, c, c, 1),
            Mat::new(&p[lay.w3..lay.b3], c, h, 1, c),
            T::zero(),
            d2,
        );
        relu_mask(d2, h2);
        // layer 2
        gemm(
            T::one(),
            Mat::new(h1, h, n, 1, h),
            Mat::new(d2, n, h, h, 1),
            T::zero(),
            &mut grad[lay.w2..lay.b2],
        );
        col_sum(d2, n, h, &mut grad[lay.b2..lay.w3]);
        sized(d1, n * h);
        gemm(
            T::one(),
            Mat::new(d2, n, h, h, 1),
            Mat::new(&p[lay.w2..lay.b2], h, h, 1, h),
            T::zero(),
            d1,
        );
        relu_mask(d1, h1);
        // layer 1
        gemm(
            T::one(),
            Mat::new(feats, input, n, 1, input),
            Mat::new(d1, n, h, h, 1),
            T::zero(),
            &mut grad[lay.w1..lay.b1],
        );
        col_sum(d1, n, h, &mut grad[lay.b1..lay.w2]);
        sized(df, n * input);
        gemm(
            T::one(),
            Mat::new(d1, n, h, h, 1),
            Mat::new(&p[lay.w1..lay.b1], h, input, 1, h),
            T::zero(),
            df,
        );
        // grids
        for s in 0..n {
            for l in 0..levels {
                let base = cells[s * levels + l] as usize;
                let w =
                    bilinear_weights(fracs[(s * levels + l) * 2], fracs[(s * levels + l) * 2 + 1]);
                let corners = corner_offsets(base, lay.resolutions[l], fl);
                let d = &df[s * input + l * fl..s * input + (l + 1) * fl];
                for (ci, &off) in corners.iter().enumerate() {
                    for k in 0..fl {
                        grad[off + k] += w[ci] * d[k];
                    }
                }
            }
        }
        Ok(())
    }

    /// Per-sample `d(upstream · pred)/d(u, v)`.
    ///
    /// Rows whose upstream is entirely zero are skipped and return `[0, 0]`.
    /// On a grid-cell boundary the derivative of the cell to the right (above)
    /// is used, except at coordinate 1 where only the left cell exists.
    pub fn backward_coords(
        &self,
        tape: &mut ForwardTape<T>,
        upstream: &[f64],
    ) -> Result<Vec<[f64; 2]>> {
        self.check_tape(tape, upstream)?;
        let lay = &self.layout;
        let levels = lay.encoding.levels;
        let fl = lay.encoding.features_per_level;
        let input = lay.input_dim();
        let h = lay.hidden_width;
        let c = lay.out_channels;
        let p = &self.values;
        let mut out = vec![[0.0; 2]; tape.n];

        let ForwardTape {
            n,
            cells,
            fracs,
            h1,
            h2,
            y,
            scratch,
            ..
        } = tape;
        let Scratch {
            dz,
            d1,
            d2,
            df,
            rows,
            up,
            y_rows,
            h1_rows,
            h2_rows,
        } = scratch;
        rows.clear();
        rows.extend((0..*n).filter(|&s| upstream[s * c..(s + 1) * c].iter().any(|&g| g != 0.0)));
        let m = rows.len();
        if m == 0 {
            return Ok(out);
        }
        // Gathering only pays off when most rows are skipped; otherwise zero
        // rows just ride along through the dense products.
        let gathered = 2 * m < *n;
        let (ys, h1s, h2s, ups): (&[T], &[T], &[T], &[f64]) = if gathered {
            let gather = |src: &[T], width: usize, dst: &mut Vec<T>| {
                dst.clear();
                for &s in rows.iter() {
                    dst.extend_from_slice(&src[s * width..(s + 1) * width]);
                }
            };
            gather(y, c, y_rows);
            gather(h1, h, h1_rows);
            gather(h2, h, h2_rows);
            up.clear();
            for &s in rows.iter() {
                up.extend_from_slice(&upstream[s * c..(s + 1) * c]);
            }
            (y_rows, h1_rows, h2_rows, up)
        } else {
            (y, h1, h2, upstream)
        };
        let m = if gathered { m } else { *n };

        output_delta(ys, ups, dz);
        sized(d2, m * h);
        gemm(
            T::one(),
            Mat::new(dz, m, c, c, 1),
            Mat::new(&p[lay.w3..lay.b3], c, h, 1, c),
            T::zero(),
            d2,
        );
        relu_mask(d2, h2s);
        sized(d1, m * h);
        gemm(
            T::one(),
            Mat::new(d2, m, h, h, 1),
            Mat::new(&p[lay.w2..lay.b2], h, h, 1, h),
            T::zero(),
            d1,
        );
        relu_mask(d1, h1s);
        sized(df, m * input);
        gemm(
            T::one(),
            Mat::new(d1, m, h, h, 1),
            Mat::new(&p[lay.w1..lay.b1], h, input, 1, h),
            T::zero(),
            df,
        );

        let one = T::one();
        for (i, &s) in rows.iter().enumerate() {
            let row = if gathered { i } else { s };
            let (mut gu, mut gv) = (T::zero(), T::zero());
            for l in 0..levels {
                let r = lay.resolutions[l];
                let scale = T::of((r - 1) as f64);
                let base = cells[s * levels + l] as usize;
                let fu = fracs[(s * levels + l) * 2];
                let fv = fracs[(s * levels + l) * 2 + 1];
                let [c00, c10, c01, c11] = corner_offsets(base, r, fl);
                let d = &df[row * input + l * fl..row * input + (l + 1) * fl];
                for k in 0..fl {
                    let (g00, g10, g01, g11) = (p[c00 + k], p[c10 + k], p[c01 + k], p[c11 + k]);
                    let du = (one - fv) * (g10 - g00) + fv * (g11 - g01);
                    let dv = (one - fu) * (g01 - g00) + fu * (g11 - g10);
                    gu += d[k] * du * scale;
                    gv += d[k] * dv * scale;
                }
            }
            out[s] = [gu.as_f64(), gv.as_f64()];
        }
        Ok(out)
    }
}

/// Cached activations of one forward pass. Valid only for the parameter
/// stamp it was recorded against. Reusing a tape through
/// [`FieldParams::forward_into`] also reuses its buffers.
#[derive(Debug, Clone)]
pub struct ForwardTape<T: Real> {
    stamp: u64,
    n: usize,
    feats: Vec<T>,
    /// Grid index of the lower-left corner per sample and level.
    cells: Vec<u32>,
    /// Interpolation fractions `(fu, fv)` per sample and level.
    fracs: Vec<T>,
    h1: Vec<T>,
    h2: Vec<T>,
    y: Vec<T>,
    scratch: Scratch<T>,
}

impl<T: Real> Default for ForwardTape<T> {
    /// An empty tape that matches no parameters.
    fn default() -> Self {
        Self {
            stamp: 0,
            n: 0,
            feats: Vec::new(),
            cells: Vec::new(),
            fracs: Vec::new(),
            h1: Vec::new(),
            h2: Vec::new(),
            y: Vec::new(),
            scratch: Scratch::default(),
        }
    }
}

impl<T: Real> ForwardTape<T> {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn stamp(&self) -> u64 {
        self.stamp
    }
}

/// Backward-pass buffers kept between calls.
#[derive(Debug, Clone, Default)]
struct Scratch<T> {
    dz: Vec<T>,
    d1: Vec<T>,
    d2: Vec<T>,
    df: Vec<T>,
    rows: Vec<usize>,
    up: Vec<f64>,
    y_rows: Vec<T>,
    h1_rows: Vec<T>,
    h2_rows: Vec<T>,
}

/// Lower cell index and fraction along one axis of a grid with `r` vertices.
fn cell(t: f64, r: usize) -> (usize, f64) {
    let pos = t * (r - 1) as f64;
    let i0 = (pos.floor() as usize).min(r - 2);
    (i0, pos - i0 as f64)
}

fn corner_offsets(base: usize, r: usize, fl: usize) -> [usize; 4] {
    [base, base + fl, base + r * fl, base + (r + 1) * fl]
}

fn bias_rows<T: Real>(bias: &[T], n: usize, out: &mut Vec<T>) {
    out.clear();
    for _ in 0..n {
        out.extend_from_slice(bias);
    }
}

fn refill<V: Copy>(buf: &mut Vec<V>, len: usize, value: V) {
    buf.clear();
    buf.resize(len, value);
}

/// Resizes without clearing; for buffers a `beta = 0` product overwrites.
fn sized<V: Copy + Default>(buf: &mut Vec<V>, len: usize) {
    buf.resize(len, V::default());
}

fn bilinear_weights<T: Real>(fu: T, fv: T) -> [T; 4] {
    let one = T::one();
    [
        (one - fu) * (one - fv),
        fu * (one - fv),
        (one - fu) * fv,
        fu * fv,
    ]
}

/// `out (n×cols) += x (n×k) · W (k×cols)` with `W` row-major.
fn dense<T: Real>(x: &[T], n: usize, k: usize, w: &[T], cols: usize, out: &mut [T]) {
    if n == 0 {
        return;
    }
    gemm(
        T::one(),
        Mat::new(x, n, k, k, 1),
        Mat::new(w, k, cols, cols, 1),
        T::one(),
        out,
    );
}

// Branch-free: activation signs are close to random.
fn relu<T: Real>(x: &mut [T]) {
    for v in x {
        *v = v.max(T::zero());
    }
}

fn relu_mask<T: Real>(d: &mut [T], act: &[T]) {
    for (g, &a) in d.iter_mut().zip(act) {
        *g = if a > T::zero() { *g } else { T::zero() };
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn output_delta<T: Real>(y: &[T], upstream: &[f64], out: &mut Vec<T>) {
    out.clear();
    out.extend(
        y.iter()
            .zip(upstream)
            .map(|(&y, &g)| T::of(g) * y * (T::one() - y)),
    );
}

fn col_sum<T: Real>(x: &[T], n: usize, cols: usize, out: &mut [T]) {
    for row in x.chunks_exact(cols).take(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += *v;
        }
    }
}

#[cfg(test)]
mod tests;
