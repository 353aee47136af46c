//! A small per-voxel network: a two-layer feature encoder, a linear coarse
//! head and a two-layer refinement head, with hand-written reverse mode.
//!
//! Parameters live in one flat vector in the order
//! `enc1.W, enc1.b, enc2.W, enc2.b, coarse.W, coarse.b, ref1.W, ref1.b, ref2.W, ref2.b`,
//! weights row-major `out x in`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{trilinear_taps, GridDims, ProbabilityVolume};

/// Per-voxel feature vectors on the coarse grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    dims: GridDims,
    dim: usize,
    features: Vec<f64>,
}

impl FeatureVolume {
    pub fn new(dims: GridDims, dim: usize, features: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("feature dimension must be at least 1"));
        }
        if features.len() != dims.volume() * dim {
            return Err(Error::shape(format!(
                "{} feature values for {} voxels x {dim}",
                features.len(),
                dims.volume()
            )));
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(Error::config("feature volume contains non-finite values"));
        }
        Ok(Self { dims, dim, features })
    }

    pub fn dims(&self) -> &GridDims {
        &self.dims
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn voxel(&self, index: usize) -> &[f64] {
        &self.features[index * self.dim..(index + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub feature_dim: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    offset: usize,
    out: usize,
    inp: usize,
}

impl Affine {
    fn len(&self) -> usize {
        self.out * self.inp + self.out
    }

    fn weights<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.out * self.inp]
    }

    fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        let b = self.offset + self.out * self.inp;
        &p[b..b + self.out]
    }

    fn apply(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        let w = self.weights(p);
        for (r, (yr, &b)) in y.iter_mut().zip(self.bias(p)).enumerate() {
            *yr = b + w[r * self.inp..(r + 1) * self.inp]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
    }

    /// Accumulate parameter gradients for `y = Wx + b` and add `W^T gy` into `gx`.
    fn backward(&self, p: &[f64], x: &[f64], gy: &[f64], grad: &mut [f64], gx: Option<&mut [f64]>) {
        let w = self.weights(p);
        let (gw, gb) = grad[self.offset..self.offset + self.len()].split_at_mut(self.out * self.inp);
        for r in 0..self.out {
            let g = gy[r];
            if g == 0.0 {
                continue;
            }
            gb[r] += g;
            for (gwc, &xc) in gw[r * self.inp..(r + 1) * self.inp].iter_mut().zip(x) {
                *gwc += g * xc;
            }
        }
        if let Some(gx) = gx {
            for r in 0..self.out {
                let g = gy[r];
                if g == 0.0 {
                    continue;
                }
                for (gxc, &wc) in gx.iter_mut().zip(&w[r * self.inp..(r + 1) * self.inp]) {
                    *gxc += g * wc;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    enc1: Affine,
    enc2: Affine,
    coarse: Affine,
    ref1: Affine,
    ref2: Affine,
}

impl NetShape {
    fn layout(&self) -> Layout {
        let (d, c) = (self.feature_dim, self.num_classes);
        let mut offset = 0;
        let mut next = |out, inp| {
            let a = Affine { offset, out, inp };
            offset += a.len();
            a
        };
        Layout {
            enc1: next(d, d),
            enc2: next(d, d),
            coarse: next(c, d),
            ref1: next(d, d),
            ref2: next(c, d),
        }
    }

    pub fn param_count(&self) -> usize {
        let (d, c) = (self.feature_dim, self.num_classes);
        3 * (d * d + d) + 2 * (c * d + c)
    }

    fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.num_classes < 2 {
            return Err(Error::config(format!(
                "network needs D >= 1 and C >= 2, got D = {}, C = {}",
                self.feature_dim, self.num_classes
            )));
        }
        Ok(())
    }
}

/// Coarse head output: raw logits and their per-voxel softmax.
#[derive(Debug, Clone)]
pub struct CoarseOutput {
    pub logits: Vec<f64>,
    pub probs: ProbabilityVolume,
}

/// Loss gradients at the network outputs of the last traced forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct OutputGrads<'a> {
    pub coarse_logits: Option<&'a [f64]>,
    pub refine_logits: Option<&'a [f64]>,
}

#[derive(Debug, Clone)]
struct RefineTape {
    taps: Vec<[(usize, f64); 8]>,
    sampled: Vec<f64>,
    hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Tape {
    dims: GridDims,
    input: Vec<f64>,
    hidden: Vec<f64>,
    fine: Vec<f64>,
    refine: Option<RefineTape>,
}

#[derive(Debug, Clone)]
pub struct ToyNet {
    shape: NetShape,
    layout: Layout,
    params: Vec<f64>,
    tape: Option<Tape>,
}

impl PartialEq for ToyNet {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.params == other.params
    }
}

impl ToyNet {
    /// Uniform in `±1/sqrt(fan_in)` for every weight and bias.
    pub fn new<R: Rng + ?Sized>(shape: NetShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let layout = shape.layout();
        let mut params = Vec::with_capacity(shape.param_count());
        for a in [layout.enc1, layout.enc2, layout.coarse, layout.ref1, layout.ref2] {
            let bound = 1.0 / (a.inp as f64).sqrt();
            params.extend((0..a.len()).map(|_| rng.gen_range(-bound..=bound)));
        }
        Ok(Self {
            shape,
            layout,
            params,
            tape: None,
        })
    }

    pub fn zeros(shape: NetShape) -> Result<Self> {
        Self::from_params(shape, vec![0.0; shape.param_count()])
    }

    pub fn from_params(shape: NetShape, params: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if params.len() != shape.param_count() {
            return Err(Error::shape(format!(
                "{} parameters for a network needing {}",
                params.len(),
                shape.param_count()
            )));
        }
        Ok(Self {
            shape,
            layout: shape.layout(),
            params,
            tape: None,
        })
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Replace all parameters; drops any recorded forward pass.
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(format!(
                "{} parameters for a network needing {}",
                params.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(params);
        self.tape = None;
        Ok(())
    }

    /// Mutable access to one parameter group, for hand-built networks.
    /// Groups: 0 enc1, 1 enc2, 2 coarse, 3 ref1, 4 ref2; returns `(W, b)`.
    pub fn layer_mut(&mut self, group: usize) -> Result<(&mut [f64], &mut [f64])> {
        let l = self.layout;
        let a = [l.enc1, l.enc2, l.coarse, l.ref1, l.ref2]
            .get(group)
            .copied()
            .ok_or_else(|| Error::config(format!("no parameter group {group}")))?;
        self.tape = None;
        let block = &mut self.params[a.offset..a.offset + a.len()];
        Ok(block.split_at_mut(a.out * a.inp))
    }

    pub fn clear_tape(&mut self) {
        self.tape = None;
    }

    fn check_features(&self, f: &FeatureVolume) -> Result<()> {
        if f.dim != self.shape.feature_dim {
            return Err(Error::shape(format!(
                "features have D = {}, network expects {}",
                f.dim, self.shape.feature_dim
            )));
        }
        Ok(())
    }

    fn encode(&self, f: &FeatureVolume) -> (Vec<f64>, Vec<f64>) {
        let d = self.shape.feature_dim;
        let mut hidden = vec![0.0; f.features.len()];
        let mut fine = vec![0.0; f.features.len()];
        for ((x, h), y) in f
            .features
            .chunks_exact(d)
            .zip(hidden.chunks_exact_mut(d))
            .zip(fine.chunks_exact_mut(d))
        {
            self.layout.enc1.apply(&self.params, x, h);
            h.iter_mut().for_each(|v| *v = v.tanh());
            self.layout.enc2.apply(&self.params, h, y);
            y.iter_mut().for_each(|v| *v = v.tanh());
        }
        (hidden, fine)
    }

    fn head(&self, dims: GridDims, fine: &[f64]) -> Result<CoarseOutput> {
        let (d, c) = (self.shape.feature_dim, self.shape.num_classes);
        let mut logits = vec![0.0; dims.volume() * c];
        for (y, z) in fine.chunks_exact(d).zip(logits.chunks_exact_mut(c)) {
            self.layout.coarse.apply(&self.params, y, z);
        }
        let probs = ProbabilityVolume::from_logits(dims, c, &logits)?;
        Ok(CoarseOutput { logits, probs })
    }

    /// Coarse prediction without recording anything (the inference path).
    pub fn infer_coarse(&self, f: &FeatureVolume) -> Result<CoarseOutput> {
        self.check_features(f)?;
        let (_, fine) = self.encode(f);
        self.head(f.dims, &fine)
    }

    /// Coarse prediction, recording intermediates for [`ToyNet::backward`].
    pub fn forward_coarse(&mut self, f: &FeatureVolume) -> Result<CoarseOutput> {
        self.check_features(f)?;
        let (hidden, fine) = self.encode(f);
        let out = self.head(f.dims, &fine)?;
        self.tape = Some(Tape {
            dims: f.dims,
            input: f.features.clone(),
            hidden,
            fine,
            refine: None,
        });
        Ok(out)
    }

    fn refine_rows(&self, sampled: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (d, c) = (self.shape.feature_dim, self.shape.num_classes);
        let n = sampled.len() / d;
        let mut hidden = vec![0.0; n * d];
        let mut logits = vec![0.0; n * c];
        for ((x, h), z) in sampled
            .chunks_exact(d)
            .zip(hidden.chunks_exact_mut(d))
            .zip(logits.chunks_exact_mut(c))
        {
            self.layout.ref1.apply(&self.params, x, h);
            h.iter_mut().for_each(|v| *v = v.tanh());
            self.layout.ref2.apply(&self.params, h, z);
        }
        (hidden, logits)
    }

    /// Refinement logits for `N x D` sampled feature vectors.
    pub fn refine(&self, sampled: &[f64]) -> Result<Vec<f64>> {
        if sampled.len() % self.shape.feature_dim != 0 {
            return Err(Error::shape(format!(
                "{} sampled values is not a multiple of D = {}",
                sampled.len(),
                self.shape.feature_dim
            )));
        }
        Ok(self.refine_rows(sampled).1)
    }

    /// Sample the encoded features of the last traced forward pass at
    /// `points` (coarse voxel units, centers at `i + 0.5`) and refine them.
    pub fn refine_at(&mut self, points: &[[f64; 3]]) -> Result<Vec<f64>> {
        let d = self.shape.feature_dim;
        let tape = self
            .tape
            .as_ref()
            .ok_or(Error::State("refine_at needs a traced forward pass"))?;
        let taps: Vec<[(usize, f64); 8]> = points.iter().map(|&p| trilinear_taps(&tape.dims, p)).collect();
        let mut sampled = vec![0.0; points.len() * d];
        for (row, t) in sampled.chunks_exact_mut(d).zip(&taps) {
            for &(v, w) in t {
                if w == 0.0 {
                    continue;
                }
                for (r, &f) in row.iter_mut().zip(&tape.fine[v * d..(v + 1) * d]) {
                    *r += w * f;
                }
            }
        }
        let (hidden, logits) = self.refine_rows(&sampled);
        if let Some(t) = self.tape.as_mut() {
            t.refine = Some(RefineTape { taps, sampled, hidden });
        }
        Ok(logits)
    }

    /// Exact parameter gradient for the given output gradients of the last
    /// traced pass.
    pub fn backward(&self, grads: OutputGrads<'_>) -> Result<Vec<f64>> {
        let tape = self
            .tape
            .as_ref()
            .ok_or(Error::State("backward called without a traced forward pass"))?;
        let (d, c) = (self.shape.feature_dim, self.shape.num_classes);
        let l = &self.layout;
        let p = &self.params;
        let mut grad = vec![0.0; p.len()];
        let mut g_fine = vec![0.0; tape.fine.len()];

        if let Some(gz) = grads.coarse_logits {
            if gz.len() != tape.dims.volume() * c {
                return Err(Error::shape("coarse logit gradient length mismatch"));
            }
            for ((y, g), gy) in tape
                .fine
                .chunks_exact(d)
                .zip(gz.chunks_exact(c))
                .zip(g_fine.chunks_exact_mut(d))
            {
                l.coarse.backward(p, y, g, &mut grad, Some(gy));
            }
        }

        if let Some(gz) = grads.refine_logits {
            let rt = tape
                .refine
                .as_ref()
                .ok_or(Error::State("refinement gradient without a traced refinement pass"))?;
            if gz.len() != rt.taps.len() * c {
                return Err(Error::shape("refinement logit gradient length mismatch"));
            }
            let mut gh = vec![0.0; d];
            let mut gx = vec![0.0; d];
            for (n, taps) in rt.taps.iter().enumerate() {
                let h = &rt.hidden[n * d..(n + 1) * d];
                gh.fill(0.0);
                l.ref2.backward(p, h, &gz[n * c..(n + 1) * c], &mut grad, Some(&mut gh));
                for (g, &hv) in gh.iter_mut().zip(h) {
                    *g *= 1.0 - hv * hv;
                }
                gx.fill(0.0);
                l.ref1.backward(p, &rt.sampled[n * d..(n + 1) * d], &gh, &mut grad, Some(&mut gx));
                for &(v, w) in taps {
                    if w == 0.0 {
                        continue;
                    }
                    for (gf, &g) in g_fine[v * d..(v + 1) * d].iter_mut().zip(&gx) {
                        *gf += w * g;
                    }
                }
            }
        }

        let mut ga = vec![0.0; d];
        let mut gh = vec![0.0; d];
        for v in 0..tape.dims.volume() {
            let gy = &g_fine[v * d..(v + 1) * d];
            if gy.iter().all(|&g| g == 0.0) {
                continue;
            }
            let y = &tape.fine[v * d..(v + 1) * d];
            let h = &tape.hidden[v * d..(v + 1) * d];
            for n in 0..d {
                ga[n] = gy[n] * (1.0 - y[n] * y[n]);
            }
            gh.fill(0.0);
            l.enc2.backward(p, h, &ga, &mut grad, Some(&mut gh));
            for n in 0..d {
                gh[n] *= 1.0 - h[n] * h[n];
            }
            l.enc1.backward(p, &tape.input[v * d..(v + 1) * d], &gh, &mut grad, None);
        }
        Ok(grad)
    }

    /// `params -= lr * grad`. A non-finite gradient leaves the net untouched.
    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(Error::shape(format!(
                "gradient has {} entries, network has {}",
                grad.len(),
                self.params.len()
            )));
        }
        if !lr.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                term: "gradient",
                step: None,
            });
        }
        for (w, g) in self.params.iter_mut().zip(grad) {
            *w -= lr * g;
        }
        self.tape = None;
        Ok(())
    }
}

/// Center of coarse voxel `index` in the continuous coordinates used by
/// [`ToyNet::refine_at`].
pub fn voxel_center(index: usize, dims: &GridDims) -> [f64; 3] {
    let k = index % dims.z;
    let rest = index / dims.z;
    [(rest / dims.y) as f64 + 0.5, (rest % dims.y) as f64 + 0.5, k as f64 + 0.5]
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HVMK";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Flat parameter snapshot. A teacher checkpoint carries its EMA step count
/// as a trailing u64.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<f64>,
    pub teacher_step: Option<u64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.params.len() + 8);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        if let Some(s) = self.teacher_step {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Version("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[HEADER_LEN..];
        let teacher_step = match body.len().checked_sub(8 * count) {
            Some(0) => None,
            Some(8) => Some(u64::from_le_bytes(body[8 * count..].try_into().unwrap())),
            _ => {
                return Err(Error::Version(format!(
                    "header announces {count} parameters but the body has {} bytes",
                    body.len()
                )))
            }
        };
        let params = body[..8 * count]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Self { params, teacher_step })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::softmax_into;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SHAPE: NetShape = NetShape {
        feature_dim: 3,
        num_classes: 4,
    };

    fn features(dims: GridDims, d: usize, seed: u64) -> FeatureVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = (0..dims.volume() * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        FeatureVolume::new(dims, d, f).unwrap()
    }

    fn net(seed: u64) -> ToyNet {
        ToyNet::new(SHAPE, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn dims(x: usize, y: usize, z: usize) -> GridDims {
        GridDims::new(x, y, z, 0.4).unwrap()
    }

    /// Scalar reimplementation of the network, one vector at a time.
    fn oracle_affine(p: &[f64], off: usize, out: usize, inp: usize, x: &[f64]) -> Vec<f64> {
        (0..out)
            .map(|r| {
                let mut s = p[off + out * inp + r];
                for c in 0..inp {
                    s += p[off + r * inp + c] * x[c];
                }
                s
            })
            .collect()
    }

    fn oracle_offsets(d: usize, c: usize) -> [usize; 5] {
        let l = d * d + d;
        [0, l, 2 * l, 2 * l + c * d + c, 3 * l + c * d + c]
    }

    fn oracle_fine(p: &[f64], d: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let o = oracle_offsets(d, c);
        let h: Vec<f64> = oracle_affine(p, o[0], d, d, x).iter().map(|v| v.tanh()).collect();
        oracle_affine(p, o[1], d, d, &h).iter().map(|v| v.tanh()).collect()
    }

    #[test]
    fn parameter_count_and_layout() {
        assert_eq!(SHAPE.param_count(), 3 * 12 + 2 * 16);
        let n = net(0);
        assert_eq!(n.params().len(), SHAPE.param_count());
        let bound = 1.0 / 3f64.sqrt();
        assert!(n.params().iter().all(|p| p.abs() <= bound));
        assert_eq!(n, ToyNet::from_params(SHAPE, n.params().to_vec()).unwrap());
        assert!(ToyNet::from_params(SHAPE, vec![0.0; 5]).is_err());
    }

    #[test]
    fn zero_network_is_uniform() {
        let n = ToyNet::zeros(SHAPE).unwrap();
        let out = n.infer_coarse(&features(dims(2, 2, 1), 3, 1)).unwrap();
        assert!(out.probs.probs().iter().all(|&p| p == 0.25));
        let r = n.refine(&[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(r, vec![0.0; 4]);
        assert!(n.refine(&[]).unwrap().is_empty());
    }

    #[test]
    fn coarse_matches_scalar_oracle() {
        let n = net(3);
        let f = features(dims(1, 1, 1), 3, 2);
        let out = n.infer_coarse(&f).unwrap();
        let o = oracle_offsets(3, 4);
        let fine = oracle_fine(n.params(), 3, 4, f.voxel(0));
        let z = oracle_affine(n.params(), o[2], 4, 3, &fine);
        let mut p = vec![0.0; 4];
        softmax_into(&z, &mut p);
        for c in 0..4 {
            assert!((out.logits[c] - z[c]).abs() < 1e-12);
            assert!((out.probs.probs()[c] - p[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn refine_matches_scalar_oracle() {
        let n = net(4);
        let x = [0.2, -0.7, 1.1];
        let o = oracle_offsets(3, 4);
        let h: Vec<f64> = oracle_affine(n.params(), o[3], 3, 3, &x).iter().map(|v| v.tanh()).collect();
        let z = oracle_affine(n.params(), o[4], 4, 3, &h);
        let got = n.refine(&x).unwrap();
        for c in 0..4 {
            assert!((got[c] - z[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_features_identical_outputs() {
        let n = net(5);
        let f = FeatureVolume::new(dims(2, 1, 1), 3, vec![0.5, 0.1, -0.2, 0.5, 0.1, -0.2]).unwrap();
        let out = n.infer_coarse(&f).unwrap();
        assert_eq!(out.probs.voxel(0), out.probs.voxel(1));
    }

    #[test]
    fn shape_and_state_errors() {
        let mut n = net(0);
        let wrong = features(dims(1, 1, 1), 2, 0);
        assert!(matches!(n.infer_coarse(&wrong), Err(Error::Shape(_))));
        assert!(matches!(n.backward(OutputGrads::default()), Err(Error::State(_))));
        assert!(matches!(n.refine_at(&[[0.5, 0.5, 0.5]]), Err(Error::State(_))));
        assert!(n.refine(&[1.0, 2.0]).is_err());
        n.forward_coarse(&features(dims(1, 1, 1), 3, 0)).unwrap();
        let g = [0.0; 4];
        assert!(matches!(
            n.backward(OutputGrads {
                coarse_logits: None,
                refine_logits: Some(&g),
            }),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn refine_at_center_is_lookup() {
        let d = dims(3, 2, 2);
        let mut n = net(8);
        let f = features(d, 3, 8);
        n.forward_coarse(&f).unwrap();
        let v = 7;
        let got = n.refine_at(&[voxel_center(v, &d)]).unwrap();
        let fine = oracle_fine(n.params(), 3, 4, f.voxel(v));
        let want = n.refine(&fine).unwrap();
        for c in 0..4 {
            assert!((got[c] - want[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let mut n = net(1);
        let d = dims(2, 2, 1);
        n.forward_coarse(&features(d, 3, 1)).unwrap();
        n.refine_at(&[[0.5, 0.5, 0.5]]).unwrap();
        let gz = vec![0.0; 16];
        let gr = vec![0.0; 4];
        let g = n
            .backward(OutputGrads {
                coarse_logits: Some(&gz),
                refine_logits: Some(&gr),
            })
            .unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    /// Scalar objective: a fixed linear functional of both outputs.
    fn objective(n: &ToyNet, f: &FeatureVolume, pts: &[[f64; 3]], wc: &[f64], wr: &[f64]) -> f64 {
        let mut m = n.clone();
        let out = m.forward_coarse(f).unwrap();
        let r = m.refine_at(pts).unwrap();
        let a: f64 = out.logits.iter().zip(wc).map(|(a, b)| a * b).sum();
        let b: f64 = r.iter().zip(wr).map(|(a, b)| a * b).sum();
        a + b
    }

    #[test]
    fn backward_matches_central_differences() {
        let d = dims(3, 1, 1);
        let f = features(d, 3, 21);
        let pts = [[0.9, 0.5, 0.5], [2.2, 0.5, 0.5]];
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let wc: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wr: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut n = net(23);
        n.forward_coarse(&f).unwrap();
        n.refine_at(&pts).unwrap();
        let g = n
            .backward(OutputGrads {
                coarse_logits: Some(&wc),
                refine_logits: Some(&wr),
            })
            .unwrap();
        let h = 1e-5;
        for i in 0..n.params().len() {
            let mut p = n.params().to_vec();
            p[i] += h;
            let up = objective(&ToyNet::from_params(SHAPE, p.clone()).unwrap(), &f, &pts, &wc, &wr);
            p[i] -= 2.0 * h;
            let dn = objective(&ToyNet::from_params(SHAPE, p).unwrap(), &f, &pts, &wc, &wr);
            let fd = (up - dn) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            assert!(err < 1e-6, "param {i}: analytic {} vs fd {fd}", g[i]);
        }
    }

    #[test]
    fn gradients_are_additive() {
        let d = dims(2, 1, 1);
        let f = features(d, 3, 31);
        let mut n = net(32);
        n.forward_coarse(&f).unwrap();
        n.refine_at(&[[1.0, 0.5, 0.5]]).unwrap();
        let gz: Vec<f64> = (0..8).map(|x| x as f64 * 0.1 - 0.3).collect();
        let gr = [0.4, -0.2, 0.1, 0.7];
        let both = n
            .backward(OutputGrads {
                coarse_logits: Some(&gz),
                refine_logits: Some(&gr),
            })
            .unwrap();
        let a = n
            .backward(OutputGrads {
                coarse_logits: Some(&gz),
                refine_logits: None,
            })
            .unwrap();
        let b = n
            .backward(OutputGrads {
                coarse_logits: None,
                refine_logits: Some(&gr),
            })
            .unwrap();
        for i in 0..both.len() {
            assert!((both[i] - a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_identities_and_refusal() {
        let mut n = net(2);
        let before = n.clone();
        let g: Vec<f64> = (0..n.params().len()).map(|i| i as f64).collect();
        n.sgd_step(&g, 0.0).unwrap();
        assert_eq!(n, before);
        n.sgd_step(&vec![0.0; g.len()], 0.5).unwrap();
        assert_eq!(n, before);
        let mut bad = g.clone();
        bad[3] = f64::NAN;
        assert!(matches!(n.sgd_step(&bad, 0.1), Err(Error::NonFinite { .. })));
        assert_eq!(n, before);
        assert!(n.sgd_step(&[1.0], 0.1).is_err());
    }

    #[test]
    fn sgd_decreases_quadratic() {
        // 0.5 * |W_refine_logits - target|^2 style objective on the coarse head
        let d = dims(2, 2, 1);
        let f = features(d, 3, 41);
        let target: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut n = net(42);
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let out = n.forward_coarse(&f).unwrap();
            let diff: Vec<f64> = out.logits.iter().zip(&target).map(|(a, b)| a - b).collect();
            let loss = 0.5 * diff.iter().map(|x| x * x).sum::<f64>();
            assert!(loss < prev);
            prev = loss;
            let g = n
                .backward(OutputGrads {
                    coarse_logits: Some(&diff),
                    refine_logits: None,
                })
                .unwrap();
            n.sgd_step(&g, 0.01).unwrap();
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let n = net(6);
        let ck = Checkpoint {
            params: n.params().to_vec(),
            teacher_step: None,
        };
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"HVMK");
        assert_eq!(bytes.len(), 16 + 8 * SHAPE.param_count());
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        let t = Checkpoint {
            params: vec![1.5, -2.0],
            teacher_step: Some(77),
        };
        assert_eq!(Checkpoint::from_bytes(&t.to_bytes()).unwrap(), t);
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::Version(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..20]), Err(Error::Version(_))));
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(Error::Version(_))));
    }

    proptest! {
        #[test]
        fn refine_is_permutation_equivariant(rows in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 1..8), seed in 0u64..100) {
            let n = net(seed);
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let rev: Vec<f64> = rows.iter().rev().flatten().copied().collect();
            let a = n.refine(&flat).unwrap();
            let b = n.refine(&rev).unwrap();
            let m = rows.len();
            for r in 0..m {
                prop_assert_eq!(&a[r * 4..r * 4 + 4], &b[(m - 1 - r) * 4..(m - r) * 4]);
            }
        }

        #[test]
        fn forward_is_deterministic(seed in 0u64..100) {
            let f = features(dims(2, 2, 2), 3, seed);
            let n = net(seed);
            let mut m = n.clone();
            prop_assert_eq!(n.infer_coarse(&f).unwrap().logits, m.forward_coarse(&f).unwrap().logits);
        }
    }
}
