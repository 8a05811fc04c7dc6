//! Single radiance-field MLP with an explicit backward pass.
//!
//! ```text
//! enc(x) ─► [Linear─ReLU] × depth ─► h ─┬─► Linear ─► softplus ─► density
//!                                       └─(h ⊕ enc(d))─► Linear ─► sigmoid ─► rgb
//! ```
//!
//! Weights are stored row-major as `fan_in × fan_out` so a batch of row
//! vectors maps through `X·W + b`. All parameters live in one flat buffer in
//! declaration order (trunk layers, density head, color head; each weight
//! matrix followed by its bias), which is also the checkpoint order.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::linalg::{gemm, MatRef, Scalar};
use crate::seed;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NRDF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub l_pos: usize,
    pub l_dir: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            l_pos: 6,
            l_dir: 4,
            include_input: true,
        }
    }
}

impl EncodingConfig {
    pub fn encoded_len(d: usize, l: usize, include_input: bool) -> usize {
        d * (usize::from(include_input) + 2 * l)
    }

    pub fn pos_dim(&self) -> usize {
        Self::encoded_len(3, self.l_pos, self.include_input)
    }

    pub fn dir_dim(&self) -> usize {
        Self::encoded_len(3, self.l_dir, self.include_input)
    }
}

/// Sinusoidal encoding `[v, sin(2⁰πv), cos(2⁰πv), …, sin(2^{L−1}πv), cos(2^{L−1}πv)]`.
pub fn positional_encode<T: Scalar>(v: &[T], l: usize, include_input: bool) -> Vec<T> {
    let mut out = vec![T::zero(); EncodingConfig::encoded_len(v.len(), l, include_input)];
    encode_into(v, l, include_input, &mut out);
    out
}

fn encode_into<T: Scalar>(v: &[T], l: usize, include_input: bool, out: &mut [T]) {
    let d = v.len();
    let mut o = 0;
    if include_input {
        out[..d].copy_from_slice(v);
        o = d;
    }
    let pi = T::lit(std::f64::consts::PI);
    let mut freq = pi;
    for _ in 0..l {
        for (i, &x) in v.iter().enumerate() {
            let (s, c) = (freq * x).sin_cos();
            out[o + i] = s;
            out[o + d + i] = c;
        }
        o += 2 * d;
        freq = freq + freq;
    }
}

/// Layer sizes and encoding; fully determines the parameter layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldArch {
    pub encoding: EncodingConfig,
    /// Hidden widths of the trunk, one per ReLU layer.
    pub trunk: Vec<usize>,
}

impl Default for FieldArch {
    fn default() -> Self {
        Self {
            encoding: EncodingConfig::default(),
            trunk: vec![128; 4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub w_offset: usize,
    pub b_offset: usize,
}

impl LayerShape {
    fn end(&self) -> usize {
        self.b_offset + self.fan_out
    }
}

impl FieldArch {
    pub fn validate(&self) -> Result<()> {
        if self.trunk.is_empty() || self.trunk.contains(&0) {
            return Err(Error::Config(format!(
                "trunk widths {:?} must be non-empty and positive",
                self.trunk
            )));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        *self.trunk.last().expect("validated trunk")
    }

    /// Trunk layers, then density head, then color head.
    pub fn layers(&self) -> Vec<LayerShape> {
        let mut dims = Vec::with_capacity(self.trunk.len() + 2);
        let mut fan_in = self.encoding.pos_dim();
        for &w in &self.trunk {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims.push((fan_in, 1));
        dims.push((fan_in + self.encoding.dir_dim(), 3));
        let mut offset = 0;
        dims.into_iter()
            .map(|(fan_in, fan_out)| {
                let shape = LayerShape {
                    fan_in,
                    fan_out,
                    w_offset: offset,
                    b_offset: offset + fan_in * fan_out,
                };
                offset = shape.end();
                shape
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers().last().map_or(0, LayerShape::end)
    }

    fn density_layer(&self) -> usize {
        self.trunk.len()
    }

    fn color_layer(&self) -> usize {
        self.trunk.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams<T> {
    arch: FieldArch,
    layers: Vec<LayerShape>,
    data: Vec<T>,
}

/// Gradient buffer congruent with a [`FieldParams`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients<T> {
    pub data: Vec<T>,
}

impl<T: Scalar> ParamGradients<T> {
    pub fn zeros_like(params: &FieldParams<T>) -> Self {
        Self {
            data: vec![T::zero(); params.data.len()],
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.data.len() != other.data.len() {
            return Err(Error::Shape(format!(
                "gradient buffers of {} and {} entries",
                self.data.len(),
                other.data.len()
            )));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a = *a + b);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|g| g.is_finite())
    }
}

impl<T: Scalar> FieldParams<T> {
    pub fn zeros(arch: FieldArch) -> Result<Self> {
        arch.validate()?;
        let layers = arch.layers();
        let n = arch.num_params();
        Ok(Self {
            arch,
            layers,
            data: vec![T::zero(); n],
        })
    }

    pub fn from_vec(arch: FieldArch, data: Vec<T>) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        if data.len() != p.data.len() {
            return Err(Error::Shape(format!(
                "{} parameters supplied, architecture needs {}",
                data.len(),
                p.data.len()
            )));
        }
        p.data = data;
        Ok(p)
    }

    /// Glorot-uniform weights, zero biases, deterministic per seed.
    pub fn init(arch: FieldArch, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = seed::rng_for(seed, &[]);
        for layer in p.layers.clone() {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            for w in &mut p.data[layer.w_offset..layer.b_offset] {
                *w = T::lit(rng.gen_range(-limit..limit));
            }
        }
        Ok(p)
    }

    pub fn arch(&self) -> &FieldArch {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn weights(&self, layer: usize) -> &[T] {
        let l = &self.layers[layer];
        &self.data[l.w_offset..l.b_offset]
    }

    pub fn bias(&self, layer: usize) -> &[T] {
        let l = &self.layers[layer];
        &self.data[l.b_offset..l.end()]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> FieldParams<U> {
        FieldParams {
            arch: self.arch.clone(),
            layers: self.layers.clone(),
            data: self.data.iter().map(|&v| U::lit(v.f64())).collect(),
        }
    }
}

/// Per-sample network outputs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FieldOutput<T> {
    /// σ ≥ 0 per sample.
    pub density: Vec<T>,
    /// Interleaved rgb in (0, 1), three entries per sample.
    pub rgb: Vec<T>,
}

impl<T: Scalar> FieldOutput<T> {
    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }

    pub fn rgb_at(&self, i: usize) -> [T; 3] {
        [self.rgb[3 * i], self.rgb[3 * i + 1], self.rgb[3 * i + 2]]
    }
}

/// Intermediate values of a forward pass, reusable across calls.
#[derive(Debug, Clone, Default)]
pub struct ActivationCache<T> {
    batch: usize,
    enc_pos: Vec<T>,
    enc_dir: Vec<T>,
    /// Post-ReLU output of each trunk layer.
    trunk: Vec<Vec<T>>,
    density_pre: Vec<T>,
    rgb: Vec<T>,
    /// Both heads' weights on the trunk output, `hidden × 4` (density, r, g, b).
    head_w: Vec<T>,
    /// Head pre-activations from the trunk, then the direction branch.
    head_pre: Vec<T>,
    dir_pre: Vec<T>,
    // backward scratch
    d_hidden: Vec<T>,
    d_prev: Vec<T>,
    d_head: Vec<T>,
    d_color_pre: Vec<T>,
    g_head_w: Vec<T>,
}

impl<T> ActivationCache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Every caller overwrites the whole buffer, so stale contents are kept.
fn resize<T: Scalar>(buf: &mut Vec<T>, n: usize) {
    buf.resize(n, T::zero());
}

fn broadcast_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        row.copy_from_slice(bias);
    }
}

fn add_column_sums<T: Scalar>(acc: &mut [T], m: &[T]) {
    let cols = acc.len();
    for row in m.chunks_exact(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
}

/// Forward pass; `positions` and unit `viewdirs` are parallel per-sample arrays.
pub fn field_forward<T: Scalar>(
    params: &FieldParams<T>,
    positions: &[[T; 3]],
    viewdirs: &[[T; 3]],
) -> Result<(FieldOutput<T>, ActivationCache<T>)> {
    let mut cache = ActivationCache::default();
    let mut out = FieldOutput::default();
    field_forward_into(params, positions, viewdirs, &mut cache, &mut out)?;
    Ok((out, cache))
}

/// Forward pass writing into caller-owned buffers.
pub fn field_forward_into<T: Scalar>(
    params: &FieldParams<T>,
    positions: &[[T; 3]],
    viewdirs: &[[T; 3]],
    cache: &mut ActivationCache<T>,
    out: &mut FieldOutput<T>,
) -> Result<()> {
    let n = positions.len();
    if viewdirs.len() != n {
        return Err(Error::Shape(format!(
            "{n} positions but {} view directions",
            viewdirs.len()
        )));
    }
    let tol = T::lit(1e-4);
    for (p, d) in positions.iter().zip(viewdirs) {
        if !p.iter().chain(d.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("field input".into()));
        }
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if (norm - T::one()).abs() > tol {
            return Err(Error::Domain(format!("view direction norm {:?} is not unit", norm)));
        }
    }

    let arch = &params.arch;
    let enc = arch.encoding;
    let (pd, dd) = (enc.pos_dim(), enc.dir_dim());
    cache.batch = n;
    resize(&mut cache.enc_pos, n * pd);
    resize(&mut cache.enc_dir, n * dd);
    for (i, (p, d)) in positions.iter().zip(viewdirs).enumerate() {
        encode_into(
            p,
            enc.l_pos,
            enc.include_input,
            &mut cache.enc_pos[i * pd..(i + 1) * pd],
        );
        // samples along a ray share their direction
        if i > 0 && viewdirs[i - 1] == *d {
            cache.enc_dir.copy_within((i - 1) * dd..i * dd, i * dd);
        } else {
            encode_into(
                d,
                enc.l_dir,
                enc.include_input,
                &mut cache.enc_dir[i * dd..(i + 1) * dd],
            );
        }
    }

    cache.trunk.resize_with(arch.trunk.len(), Vec::new);
    for l in 0..arch.trunk.len() {
        let shape = params.layers[l];
        let (prev, rest) = cache.trunk.split_at_mut(l);
        let input: &[T] = if l == 0 { &cache.enc_pos } else { &prev[l - 1] };
        let z = &mut rest[0];
        resize(z, n * shape.fan_out);
        broadcast_bias(z, params.bias(l));
        gemm(
            MatRef::row_major(input, n, shape.fan_in),
            MatRef::row_major(params.weights(l), shape.fan_in, shape.fan_out),
            T::one(),
            z,
        );
        z.iter_mut().for_each(|v| *v = v.max(T::zero()));
    }
    let h = cache.trunk.last().expect("non-empty trunk");
    let hidden = arch.hidden();

    let (dl, cl) = (arch.density_layer(), arch.color_layer());
    let wd = params.weights(dl);
    let wc = params.weights(cl);
    resize(&mut cache.head_w, hidden * 4);
    for j in 0..hidden {
        cache.head_w[4 * j] = wd[j];
        cache.head_w[4 * j + 1..4 * j + 4].copy_from_slice(&wc[3 * j..3 * j + 3]);
    }
    resize(&mut cache.head_pre, n * 4);
    let (bd, bc) = (params.bias(dl)[0], params.bias(cl));
    broadcast_bias(&mut cache.head_pre, &[bd, bc[0], bc[1], bc[2]]);
    gemm(
        MatRef::row_major(h, n, hidden),
        MatRef::row_major(&cache.head_w, hidden, 4),
        T::one(),
        &mut cache.head_pre,
    );
    resize(&mut cache.dir_pre, n * 3);
    gemm(
        MatRef::row_major(&cache.enc_dir, n, dd),
        MatRef::row_major(&wc[hidden * 3..], dd, 3),
        T::zero(),
        &mut cache.dir_pre,
    );
    resize(&mut cache.density_pre, n);
    resize(&mut cache.rgb, n * 3);
    for i in 0..n {
        cache.density_pre[i] = cache.head_pre[4 * i];
        for c in 0..3 {
            cache.rgb[3 * i + c] = sigmoid(cache.head_pre[4 * i + 1 + c] + cache.dir_pre[3 * i + c]);
        }
    }

    out.density.clear();
    out.density.extend(cache.density_pre.iter().map(|&x| softplus(x)));
    out.rgb.clear();
    out.rgb.extend_from_slice(&cache.rgb);
    Ok(())
}

/// Gradients of `Σ d_density·density + Σ d_rgb·rgb` w.r.t. every parameter.
pub fn field_backward<T: Scalar>(
    params: &FieldParams<T>,
    cache: &mut ActivationCache<T>,
    d_density: &[T],
    d_rgb: &[T],
) -> Result<ParamGradients<T>> {
    let mut grads = ParamGradients::zeros_like(params);
    field_backward_into(params, cache, d_density, d_rgb, &mut grads)?;
    Ok(grads)
}

/// Like [`field_backward`] but accumulates into `grads`.
pub fn field_backward_into<T: Scalar>(
    params: &FieldParams<T>,
    cache: &mut ActivationCache<T>,
    d_density: &[T],
    d_rgb: &[T],
    grads: &mut ParamGradients<T>,
) -> Result<()> {
    let n = cache.batch;
    if d_density.len() != n || d_rgb.len() != 3 * n {
        return Err(Error::Shape(format!(
            "backward got {} density / {} rgb cotangents for a batch of {n}",
            d_density.len(),
            d_rgb.len()
        )));
    }
    if grads.data.len() != params.data.len() {
        return Err(Error::Shape("gradient buffer does not match parameters".into()));
    }
    let arch = &params.arch;
    if cache.trunk.len() != arch.trunk.len() || cache.enc_pos.len() != n * arch.encoding.pos_dim() {
        return Err(Error::Shape(
            "activation cache was produced by a different architecture".into(),
        ));
    }
    let hidden = arch.hidden();
    let dd = arch.encoding.dir_dim();
    let layers = &params.layers;

    // pre-activation cotangents, laid out like `head_pre`
    let d_head = &mut cache.d_head;
    resize(d_head, 4 * n);
    let d_cpre = &mut cache.d_color_pre;
    resize(d_cpre, 3 * n);
    for i in 0..n {
        d_head[4 * i] = d_density[i] * sigmoid(cache.density_pre[i]);
        for c in 0..3 {
            let s = cache.rgb[3 * i + c];
            let g = d_rgb[3 * i + c] * s * (T::one() - s);
            d_head[4 * i + 1 + c] = g;
            d_cpre[3 * i + c] = g;
        }
    }

    let h = cache.trunk.last().expect("non-empty trunk");
    let (dl, cl) = (layers[arch.density_layer()], layers[arch.color_layer()]);

    let g_head = &mut cache.g_head_w;
    resize(g_head, hidden * 4);
    gemm(
        MatRef::row_major(h, n, hidden).t(),
        MatRef::row_major(d_head, n, 4),
        T::zero(),
        g_head,
    );
    for j in 0..hidden {
        let gd = &mut grads.data[dl.w_offset + j];
        *gd = *gd + g_head[4 * j];
        for c in 0..3 {
            let gc = &mut grads.data[cl.w_offset + 3 * j + c];
            *gc = *gc + g_head[4 * j + 1 + c];
        }
    }
    gemm(
        MatRef::row_major(&cache.enc_dir, n, dd).t(),
        MatRef::row_major(d_cpre, n, 3),
        T::one(),
        &mut grads.data[cl.w_offset + hidden * 3..cl.b_offset],
    );
    let mut bias_sums = [T::zero(); 4];
    for row in d_head.chunks_exact(4) {
        for (b, &v) in bias_sums.iter_mut().zip(row) {
            *b = *b + v;
        }
    }
    grads.data[dl.b_offset] = grads.data[dl.b_offset] + bias_sums[0];
    for c in 0..3 {
        grads.data[cl.b_offset + c] = grads.data[cl.b_offset + c] + bias_sums[1 + c];
    }

    // dL/dh from both heads
    let d_h = &mut cache.d_hidden;
    resize(d_h, n * hidden);
    gemm(
        MatRef::row_major(d_head, n, 4),
        MatRef::row_major(&cache.head_w, hidden, 4).t(),
        T::zero(),
        d_h,
    );

    for l in (0..arch.trunk.len()).rev() {
        let shape = layers[l];
        let act = &cache.trunk[l];
        // select, not a branch: activation signs are unpredictable
        for (g, &a) in d_h.iter_mut().zip(act) {
            *g = if a > T::zero() { *g } else { T::zero() };
        }
        let input: &[T] = if l == 0 { &cache.enc_pos } else { &cache.trunk[l - 1] };
        gemm(
            MatRef::row_major(input, n, shape.fan_in).t(),
            MatRef::row_major(d_h, n, shape.fan_out),
            T::one(),
            &mut grads.data[shape.w_offset..shape.b_offset],
        );
        add_column_sums(&mut grads.data[shape.b_offset..shape.end()], d_h);
        if l > 0 {
            let d_prev = &mut cache.d_prev;
            resize(d_prev, n * shape.fan_in);
            gemm(
                MatRef::row_major(d_h, n, shape.fan_out),
                MatRef::row_major(params.weights(l), shape.fan_in, shape.fan_out).t(),
                T::zero(),
                d_prev,
            );
            std::mem::swap(d_h, d_prev);
        }
    }
    Ok(())
}

fn arch_descriptor(arch: &FieldArch) -> Vec<u32> {
    let mut d = vec![
        arch.encoding.l_pos as u32,
        arch.encoding.l_dir as u32,
        u32::from(arch.encoding.include_input),
        arch.trunk.len() as u32,
    ];
    d.extend(arch.trunk.iter().map(|&w| w as u32));
    d
}

/// Serialize to the `NRDF` checkpoint layout.
pub fn write_checkpoint<W: Write>(params: &FieldParams<f32>, mut w: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * (8 + params.len()));
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in arch_descriptor(&params.arch) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &params.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<FieldParams<f32>> {
    let mut cursor = bytes;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(Error::Checkpoint(format!("truncated checkpoint while reading {what}")));
        }
        let (head, tail) = cursor.split_at(n);
        cursor = tail;
        Ok(head)
    };
    let magic = take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected \"NRDF\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut u32_at = |what: &str| -> Result<u32> {
        let b = take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let version = u32_at("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let l_pos = u32_at("l_pos")? as usize;
    let l_dir = u32_at("l_dir")? as usize;
    let include_input = match u32_at("include_input")? {
        0 => false,
        1 => true,
        v => return Err(Error::Checkpoint(format!("include_input flag {v}"))),
    };
    let depth = u32_at("trunk depth")? as usize;
    if depth == 0 || depth > 1024 {
        return Err(Error::Checkpoint(format!("implausible trunk depth {depth}")));
    }
    let trunk = (0..depth)
        .map(|_| u32_at("trunk width").map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let arch = FieldArch {
        encoding: EncodingConfig {
            l_pos,
            l_dir,
            include_input,
        },
        trunk,
    };
    arch.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n = arch.num_params();
    let raw = take(4 * n, "parameters")?;
    if !cursor.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after parameters",
            cursor.len()
        )));
    }
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    FieldParams::from_vec(arch, data)
}

pub fn save_checkpoint(params: &FieldParams<f32>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<FieldParams<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
