//! Per-modality projection heads onto the shared unit sphere.
//!
//! Each head is an affine map, optionally preceded by one hidden affine layer
//! with a pointwise nonlinearity, followed by L2 normalization:
//!
//! ```text
//! z = W2 act(W1 x + b1) + b2      (hidden > 0)
//! z = W x + b                     (hidden = 0)
//! e = z / |z|
//! ```
//!
//! Weights are stored `(out, in)` row-major. Backward passes are written by
//! hand and include the normalization Jacobian `(I - e e^T) / |z|`.
//!
//! ## Weight file layout (`MC3W`, little-endian)
//!
//! ```text
//! magic      4 bytes  "MC3W"
//! version    u32      1
//! latent     u32      shared output dim d
//! activation u8       0 = identity, 1 = tanh, 2 = relu
//! count      u8       number of heads (3)
//! per head:  u8 modality code, u32 input dim, u32 hidden dim
//! per head, per layer (first to last):
//!            weight  out*in f64, row-major
//!            bias    out f64
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_atomic, LeReader, LeWriter};
use crate::error::{Mc3Error, Result};
use crate::math::{dot, Matrix, Rng};
use crate::modality::{ModalityId, PerModality};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"MC3W";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Relu),
            _ => None,
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Mc3Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" | "linear" | "none" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            o => Err(Mc3Error::config("activation", format!("unknown activation {o:?}"))),
        }
    }
}

/// Affine layer `y = W x + b` with `W: (out, in)`, `b: (1, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Affine {
    fn zeros(out: usize, inp: usize) -> Self {
        Affine {
            weight: Matrix::zeros(out, inp),
            bias: Matrix::zeros(1, out),
        }
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul_nt(&self.weight)?;
        y.add_row_broadcast(self.bias.as_slice())?;
        Ok(y)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    input_dim: usize,
    hidden_dim: usize,
    layers: Vec<Affine>,
}

impl Head {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn layers(&self) -> &[Affine] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Affine] {
        &mut self.layers
    }

    fn zeros_like(&self) -> Vec<Affine> {
        self.layers
            .iter()
            .map(|l| Affine::zeros(l.out_dim(), l.in_dim()))
            .collect()
    }
}

/// Sizes needed to build a fresh set of heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub input: PerModality<usize>,
    /// 0 selects a single affine layer.
    pub hidden: usize,
    pub latent: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            input: PerModality([64, 96, 48]),
            hidden: 0,
            latent: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    latent_dim: usize,
    activation: Activation,
    heads: PerModality<Head>,
}

/// Unit-norm latent vector produced by one head.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub modality: ModalityId,
    pub sample_id: Option<String>,
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        dot(&self.values, &other.values)
    }
}

/// Intermediate values kept from a batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    modality: ModalityId,
    input: Matrix,
    hidden: Option<Matrix>,
    norms: Vec<f64>,
    /// Unit-norm outputs, one row per sample.
    pub output: Matrix,
}

/// Gradients with the same layout as a [`Head`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads {
    pub layers: Vec<Affine>,
}

/// Gradients for all three heads.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGrads {
    pub heads: PerModality<HeadGrads>,
}

impl EncoderGrads {
    pub fn tensors(&self) -> Vec<&Matrix> {
        self.heads
            .0
            .iter()
            .flat_map(|h| h.layers.iter().flat_map(|l| [&l.weight, &l.bias]))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.heads
            .0
            .iter_mut()
            .flat_map(|h| h.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]))
            .collect()
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.sum_squares()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.tensors_mut() {
            t.scale_inplace(c);
        }
    }
}

/// Draws fresh heads. Weights are uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
/// biases start at zero. Heads are drawn in modality order from `rng`.
pub fn init_params(dims: &EncoderDims, activation: Activation, rng: &mut Rng) -> Result<EncoderParams> {
    if dims.latent == 0 {
        return Err(Mc3Error::InvalidDims("latent dim must be >= 1".into()));
    }
    let heads = PerModality::try_from_fn(|m| {
        let d_in = dims.input[m];
        if d_in == 0 {
            return Err(Mc3Error::InvalidDims(format!("{m} input dim must be >= 1")));
        }
        let mut layers = Vec::new();
        let shapes: Vec<(usize, usize)> = if dims.hidden == 0 {
            vec![(dims.latent, d_in)]
        } else {
            vec![(dims.hidden, d_in), (dims.latent, dims.hidden)]
        };
        for (out, inp) in shapes {
            let bound = 1.0 / (inp as f64).sqrt();
            let weight = Matrix::from_fn(out, inp, |_, _| rng.uniform(-bound, bound));
            layers.push(Affine {
                weight,
                bias: Matrix::zeros(1, out),
            });
        }
        Ok(Head {
            input_dim: d_in,
            hidden_dim: dims.hidden,
            layers,
        })
    })?;
    Ok(EncoderParams {
        latent_dim: dims.latent,
        activation,
        heads,
    })
}

/// `init_params` with a generator derived from `seed`, so the same seed gives
/// the same heads wherever they are built.
pub fn init_seeded(dims: &EncoderDims, activation: Activation, seed: u64) -> Result<EncoderParams> {
    init_params(dims, activation, &mut Rng::derive(seed, &[0x1417]))
}

impl EncoderParams {
    /// Builds params from explicit layers; used by tests and loaders.
    pub fn from_heads(latent_dim: usize, activation: Activation, heads: PerModality<Vec<Affine>>) -> Result<Self> {
        let heads = PerModality::try_from_fn(|m| {
            let layers = heads[m].clone();
            let (input_dim, hidden_dim) = match layers.as_slice() {
                [only] => (only.in_dim(), 0),
                [first, second] => {
                    if second.in_dim() != first.out_dim() {
                        return Err(Mc3Error::InvalidDims(format!("{m} layers do not chain")));
                    }
                    (first.in_dim(), first.out_dim())
                }
                _ => return Err(Mc3Error::InvalidDims(format!("{m} head needs 1 or 2 layers"))),
            };
            let last = layers.last().unwrap();
            if last.out_dim() != latent_dim {
                return Err(Mc3Error::InvalidDims(format!(
                    "{m} head outputs {} but latent dim is {latent_dim}",
                    last.out_dim()
                )));
            }
            for l in &layers {
                if l.bias.shape() != (1, l.out_dim()) {
                    return Err(Mc3Error::InvalidDims(format!("{m} bias shape")));
                }
                l.weight.check_finite("encoder weight")?;
                l.bias.check_finite("encoder bias")?;
            }
            Ok(Head {
                input_dim,
                hidden_dim,
                layers,
            })
        })?;
        Ok(EncoderParams {
            latent_dim,
            activation,
            heads,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self, m: ModalityId) -> &Head {
        &self.heads[m]
    }

    pub fn head_mut(&mut self, m: ModalityId) -> &mut Head {
        &mut self.heads[m]
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            input: self.heads.map(|_, h| h.input_dim),
            hidden: self.heads[ModalityId::Audio].hidden_dim,
            latent: self.latent_dim,
        }
    }

    /// All parameter tensors in canonical order (modality, layer, weight then bias).
    pub fn tensors(&self) -> Vec<&Matrix> {
        self.heads
            .0
            .iter()
            .flat_map(|h| h.layers.iter().flat_map(|l| [&l.weight, &l.bias]))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.heads
            .0
            .iter_mut()
            .flat_map(|h| h.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]))
            .collect()
    }

    pub fn zero_grads(&self) -> EncoderGrads {
        EncoderGrads {
            heads: self.heads.map(|_, h| HeadGrads {
                layers: h.zeros_like(),
            }),
        }
    }

    /// Batched forward pass; `x` holds one raw feature vector per row.
    pub fn forward(&self, m: ModalityId, x: &Matrix) -> Result<ForwardCache> {
        let head = &self.heads[m];
        if x.cols() != head.input_dim {
            return Err(Mc3Error::shape(
                format!("{m} input dim {}", head.input_dim),
                x.cols(),
            ));
        }
        let (hidden, z) = match head.layers.as_slice() {
            [only] => (None, only.forward(x)?),
            [first, second] => {
                let mut h = first.forward(x)?;
                let act = self.activation;
                h.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
                let z = second.forward(&h)?;
                (Some(h), z)
            }
            _ => unreachable!("heads hold one or two layers"),
        };
        let (output, norms) = z.normalize_rows()?;
        Ok(ForwardCache {
            modality: m,
            input: x.clone(),
            hidden,
            norms,
            output,
        })
    }

    /// Backward pass for a batch. `upstream` is dLoss/d(embedding), one row per sample.
    /// Input gradients are computed only when `want_input` is set.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &Matrix,
        want_input: bool,
    ) -> Result<(HeadGrads, Option<Matrix>)> {
        cache.output.same_shape(upstream)?;
        let head = &self.heads[cache.modality];
        // dz = (g - e (e.g)) / |z|
        let mut dz = upstream.clone();
        for (i, &n) in cache.norms.iter().enumerate() {
            let e = cache.output.row(i);
            let proj = dot(e, upstream.row(i));
            for (d, ev) in dz.row_mut(i).iter_mut().zip(e) {
                *d = (*d - ev * proj) / n;
            }
        }
        match (head.layers.as_slice(), &cache.hidden) {
            ([only], None) => {
                let weight = dz.matmul_tn(&cache.input)?;
                let bias = Matrix::row_vector(&dz.sum_rows())?;
                let dx = if want_input { Some(dz.matmul(&only.weight)?) } else { None };
                Ok((
                    HeadGrads {
                        layers: vec![Affine { weight, bias }],
                    },
                    dx,
                ))
            }
            ([first, second], Some(h)) => {
                let w2 = dz.matmul_tn(h)?;
                let b2 = Matrix::row_vector(&dz.sum_rows())?;
                let mut da = dz.matmul(&second.weight)?;
                let act = self.activation;
                for (d, y) in da.as_mut_slice().iter_mut().zip(h.as_slice()) {
                    *d *= act.grad_from_output(*y);
                }
                let w1 = da.matmul_tn(&cache.input)?;
                let b1 = Matrix::row_vector(&da.sum_rows())?;
                let dx = if want_input { Some(da.matmul(&first.weight)?) } else { None };
                Ok((
                    HeadGrads {
                        layers: vec![
                            Affine {
                                weight: w1,
                                bias: b1,
                            },
                            Affine {
                                weight: w2,
                                bias: b2,
                            },
                        ],
                    },
                    dx,
                ))
            }
            _ => Err(Mc3Error::InvalidDims("cache does not match head".into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = read_file(path)?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Mc3Error::BadMagic { found, .. } => Mc3Error::BadMagic {
                path: path.to_path_buf(),
                found,
            },
            other => other,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = LeWriter::new(Vec::new());
        // Writes into a Vec cannot fail.
        let _ = (|| -> std::io::Result<()> {
            w.bytes(&WEIGHTS_MAGIC)?;
            w.u32(WEIGHTS_VERSION)?;
            w.u32(self.latent_dim as u32)?;
            w.u8(self.activation.code())?;
            w.u8(3)?;
            for (m, h) in self.heads.iter() {
                w.u8(m.code())?;
                w.u32(h.input_dim as u32)?;
                w.u32(h.hidden_dim as u32)?;
            }
            for (_, h) in self.heads.iter() {
                for l in &h.layers {
                    w.f64s(l.weight.as_slice())?;
                    w.f64s(l.bias.as_slice())?;
                }
            }
            Ok(())
        })();
        w.into_inner()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Mc3Error::CorruptCheckpoint(format!("encoder weights: {what}"));
        let mut r = LeReader::new(buf);
        let magic = r.magic().ok_or_else(|| corrupt("missing header"))?;
        if magic != WEIGHTS_MAGIC {
            return Err(Mc3Error::BadMagic {
                path: "<weights>".into(),
                found: magic,
            });
        }
        let version = r.u32().ok_or_else(|| corrupt("missing version"))?;
        if version != WEIGHTS_VERSION {
            return Err(Mc3Error::VersionMismatch(format!(
                "encoder weights version {version}, expected {WEIGHTS_VERSION}"
            )));
        }
        let latent = r.u32().ok_or_else(|| corrupt("missing latent dim"))? as usize;
        let activation = r
            .u8()
            .and_then(Activation::from_code)
            .ok_or_else(|| corrupt("bad activation"))?;
        if r.u8() != Some(3) {
            return Err(corrupt("expected three heads"));
        }
        let mut shapes = Vec::with_capacity(3);
        for m in ModalityId::ALL {
            let code = r.u8().ok_or_else(|| corrupt("truncated head table"))?;
            if code != m.code() {
                return Err(corrupt("head table out of order"));
            }
            let d_in = r.u32().ok_or_else(|| corrupt("truncated head table"))? as usize;
            let hidden = r.u32().ok_or_else(|| corrupt("truncated head table"))? as usize;
            shapes.push((d_in, hidden));
        }
        let mut layers_per = Vec::with_capacity(3);
        for &(d_in, hidden) in &shapes {
            let dims: Vec<(usize, usize)> = if hidden == 0 {
                vec![(latent, d_in)]
            } else {
                vec![(hidden, d_in), (latent, hidden)]
            };
            let mut layers = Vec::new();
            for (out, inp) in dims {
                let w = r.f64s(out * inp).ok_or_else(|| corrupt("truncated weights"))?;
                let b = r.f64s(out).ok_or_else(|| corrupt("truncated weights"))?;
                layers.push(Affine {
                    weight: Matrix::new(out, inp, w)?,
                    bias: Matrix::new(1, out, b)?,
                });
            }
            layers_per.push(layers);
        }
        if r.remaining() != 0 {
            return Err(corrupt("trailing bytes"));
        }
        let mut it = layers_per.into_iter();
        let heads = PerModality([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]);
        EncoderParams::from_heads(latent, activation, heads)
    }
}

/// Encodes a single raw feature vector.
pub fn encode(params: &EncoderParams, m: ModalityId, x: &[f64]) -> Result<Embedding> {
    let cache = params.forward(m, &Matrix::row_vector(x)?)?;
    Ok(Embedding {
        modality: m,
        sample_id: None,
        values: cache.output.into_vec(),
    })
}

/// Gradients of `upstream . encode(params, m, x)` with respect to the head
/// parameters and to `x`.
pub fn encode_backward(
    params: &EncoderParams,
    m: ModalityId,
    x: &[f64],
    upstream: &[f64],
) -> Result<(HeadGrads, Vec<f64>)> {
    if upstream.len() != params.latent_dim {
        return Err(Mc3Error::shape(params.latent_dim, upstream.len()));
    }
    let cache = params.forward(m, &Matrix::row_vector(x)?)?;
    let (g, dx) = params.backward(&cache, &Matrix::row_vector(upstream)?, true)?;
    Ok((g, dx.expect("input gradient requested").into_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{finite_diff_check, norm};

    fn small_dims(hidden: usize) -> EncoderDims {
        EncoderDims {
            input: PerModality([5, 7, 4]),
            hidden,
            latent: 6,
        }
    }

    #[test]
    fn identity_head_passes_unit_input_through() {
        let d = 4;
        let eye = Matrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.0 });
        let layer = Affine {
            weight: eye,
            bias: Matrix::zeros(1, d),
        };
        let p = EncoderParams::from_heads(
            d,
            Activation::Tanh,
            PerModality([vec![layer.clone()], vec![layer.clone()], vec![layer]]),
        )
        .unwrap();
        let x = [0.5, -0.5, 0.5, 0.5];
        let e = encode(&p, ModalityId::Video, &x).unwrap();
        assert_eq!(e.values, x.to_vec());
    }

    #[test]
    fn outputs_are_unit_norm_and_deterministic() {
        for hidden in [0, 8] {
            let p1 = init_params(&small_dims(hidden), Activation::Tanh, &mut Rng::new(9)).unwrap();
            let p2 = init_params(&small_dims(hidden), Activation::Tanh, &mut Rng::new(9)).unwrap();
            assert_eq!(p1, p2);
            let mut rng = Rng::new(1);
            for m in ModalityId::ALL {
                let x: Vec<f64> = (0..p1.head(m).input_dim()).map(|_| rng.normal()).collect();
                let e = encode(&p1, m, &x).unwrap();
                assert!((norm(&e.values) - 1.0).abs() < 1e-9);
                assert_eq!(e, encode(&p2, m, &x).unwrap());
            }
        }
    }

    #[test]
    fn init_scale_rule() {
        let dims = EncoderDims {
            input: PerModality([64, 96, 48]),
            hidden: 0,
            latent: 256,
        };
        let p = init_params(&dims, Activation::Tanh, &mut Rng::new(0)).unwrap();
        let w = &p.head(ModalityId::Audio).layers()[0].weight;
        assert_eq!(w.shape(), (256, 64));
        assert!(w.max_abs() <= 0.125);
        // the bound is actually approached
        assert!(w.max_abs() > 0.12);
        assert_eq!(p.head(ModalityId::Audio).layers().len(), 1);
        let p2 = init_params(&small_dims(3), Activation::Tanh, &mut Rng::new(0)).unwrap();
        assert_eq!(p2.head(ModalityId::Video).layers().len(), 2);
    }

    #[test]
    fn invalid_dims() {
        let mut d = small_dims(0);
        d.latent = 0;
        assert!(matches!(
            init_params(&d, Activation::Tanh, &mut Rng::new(0)),
            Err(Mc3Error::InvalidDims(_))
        ));
        let p = init_params(&small_dims(0), Activation::Tanh, &mut Rng::new(0)).unwrap();
        assert!(matches!(
            encode(&p, ModalityId::Audio, &[1.0; 3]),
            Err(Mc3Error::ShapeMismatch { .. })
        ));
        assert!(encode_backward(&p, ModalityId::Audio, &[1.0; 5], &[1.0; 2]).is_err());
    }

    #[test]
    fn last_layer_scale_invariance_for_linear_head() {
        let mut p = init_params(&small_dims(0), Activation::Tanh, &mut Rng::new(4)).unwrap();
        let x = [0.3, -1.0, 2.0, 0.1, 0.7];
        let before = encode(&p, ModalityId::Audio, &x).unwrap();
        for t in p.head_mut(ModalityId::Audio).layers_mut() {
            t.weight.scale_inplace(3.5);
            t.bias.scale_inplace(3.5);
        }
        let after = encode(&p, ModalityId::Audio, &x).unwrap();
        for (a, b) in before.values.iter().zip(&after.values) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn parallel_upstream_has_no_effect() {
        let p = init_params(&small_dims(0), Activation::Tanh, &mut Rng::new(2)).unwrap();
        let x = [0.3, -1.0, 2.0, 0.1, 0.7];
        let e = encode(&p, ModalityId::Audio, &x).unwrap();
        let up: Vec<f64> = e.values.iter().map(|v| 2.5 * v).collect();
        let (g, dx) = encode_backward(&p, ModalityId::Audio, &x, &up).unwrap();
        assert!(dx.iter().all(|v| v.abs() < 1e-12));
        assert!(g.layers.iter().all(|l| l.weight.max_abs() < 1e-12));

        let (g0, dx0) = encode_backward(&p, ModalityId::Audio, &x, &[0.0; 6]).unwrap();
        assert!(dx0.iter().all(|v| *v == 0.0));
        assert!(g0.layers.iter().all(|l| l.weight.max_abs() == 0.0 && l.bias.max_abs() == 0.0));
    }

    #[test]
    fn backward_matches_central_differences() {
        for (hidden, act) in [(0, Activation::Tanh), (5, Activation::Tanh), (5, Activation::Identity)] {
            let p = init_params(&small_dims(hidden), act, &mut Rng::new(17)).unwrap();
            let mut rng = Rng::new(23);
            for m in ModalityId::ALL {
                let x: Vec<f64> = (0..p.head(m).input_dim()).map(|_| rng.normal()).collect();
                let up: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
                let (g, dx) = encode_backward(&p, m, &x, &up).unwrap();
                let objective = |pp: &EncoderParams, xx: &[f64]| -> Result<f64> {
                    Ok(dot(&encode(pp, m, xx)?.values, &up))
                };
                for (li, layer) in g.layers.iter().enumerate() {
                    for which in 0..2 {
                        let (base, analytic) = if which == 0 {
                            (&p.head(m).layers()[li].weight, &layer.weight)
                        } else {
                            (&p.head(m).layers()[li].bias, &layer.bias)
                        };
                        let err = finite_diff_check(
                            |t| {
                                let mut q = p.clone();
                                let dst = &mut q.head_mut(m).layers_mut()[li];
                                if which == 0 {
                                    dst.weight = t.clone();
                                } else {
                                    dst.bias = t.clone();
                                }
                                objective(&q, &x)
                            },
                            base,
                            analytic,
                            1e-5,
                        )
                        .unwrap();
                        assert!(err < 1e-6, "{m} layer {li} {which}: {err}");
                    }
                }
                let xm = Matrix::row_vector(&x).unwrap();
                let dxm = Matrix::row_vector(&dx).unwrap();
                let err = finite_diff_check(|t| objective(&p, t.as_slice()), &xm, &dxm, 1e-5).unwrap();
                assert!(err < 1e-6, "{m} input: {err}");
            }
        }
    }

    #[test]
    fn weights_round_trip_bit_exact() {
        let p = init_params(&small_dims(3), Activation::Relu, &mut Rng::new(8)).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"MC3W");
        let q = EncoderParams::from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(bytes, q.to_bytes());
    }

    #[test]
    fn weights_reject_damage() {
        let p = init_params(&small_dims(0), Activation::Tanh, &mut Rng::new(8)).unwrap();
        let mut bytes = p.to_bytes();
        assert!(matches!(
            EncoderParams::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Mc3Error::CorruptCheckpoint(_))
        ));
        bytes[4] = 9;
        assert!(matches!(
            EncoderParams::from_bytes(&bytes),
            Err(Mc3Error::VersionMismatch(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(
            EncoderParams::from_bytes(&bytes),
            Err(Mc3Error::BadMagic { .. })
        ));
    }
}
