//! Encoder layers, model stacks, checkpoints, and constructive weight
//! builders.
//!
//! An encoder layer applies attention to the pre-normalized input and adds
//! an MLP branch on the attention output:
//!
//!   y = Attn(LN1(x)),  out = y + MLP(LN2(y))
//!
//! The residual is taken from the attention output, not the input, so
//! layers changing tensor order stay well-formed. A model is a chain of
//! encoder layers whose orders match end to end, closed by an optional
//! normalization and a channel projection.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::attention::{AttentionLayer, AttnKernel, FeatureMap};
use crate::error::{Error, Result};
use crate::linear::EquivariantLinear;
use crate::mat::Mat;
use crate::partitions::{ClassSet, ClassSetDescriptor, Partition};
use crate::rng::{rng_from_seed, split_seed};
use crate::tensor::{project_edges, DenseTensor, EdgeSet, SparseTensor};

/// Componentwise nonlinearity of the MLP branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    /// tanh-approximated GeLU: 0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3))).
    Gelu,
    Relu,
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl Activation {
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn apply(self, m: &mut Mat) {
        for v in m.data_mut() {
            *v = self.value(*v);
        }
    }
}

/// Channelwise layer normalization; statistics are taken per row, so the
/// operation is agnostic to tensor order and index count.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub scale: Mat,
    pub shift: Mat,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        let mut scale = Mat::zeros(1, d);
        for v in scale.data_mut() {
            *v = 1.0;
        }
        LayerNorm {
            scale,
            shift: Mat::zeros(1, d),
            eps: 1e-5,
        }
    }

    pub fn d(&self) -> usize {
        self.scale.cols()
    }

    pub fn apply_rows(&self, m: &Mat) -> Mat {
        let d = m.cols();
        debug_assert_eq!(d, self.d());
        let mut out = Mat::zeros(m.rows(), d);
        for r in 0..m.rows() {
            let row = m.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            let orow = out.row_mut(r);
            for (c, slot) in orow.iter_mut().enumerate() {
                *slot = (row[c] - mean) * inv * self.scale.get(0, c) + self.shift.get(0, c);
            }
        }
        out
    }
}

/// Inverted dropout: zero with probability `rate`, scale survivors by
/// 1/(1-rate); deterministic given the seed.
pub fn dropout_inplace(m: &mut Mat, rate: f64, seed: u64) {
    if rate <= 0.0 {
        return;
    }
    let mut rng = rng_from_seed(seed);
    let keep = 1.0 - rate;
    for v in m.data_mut() {
        if rand::Rng::gen::<f64>(&mut rng) < rate {
            *v = 0.0;
        } else {
            *v /= keep;
        }
    }
}

/// One encoder block: attention from order k to order l plus an order-l
/// MLP branch, with pre-normalization on both branches.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: AttentionLayer,
    pub mlp1: EquivariantLinear,
    pub mlp2: EquivariantLinear,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub activation: Activation,
    pub dropout_rate: f64,
    /// When false both normalizations are bypassed (identity).
    pub ln_enabled: bool,
}

/// Class set for an order-preserving MLP layer: the query-addressable
/// classes for l >= 1, the single full class for scalars.
fn mlp_class_set(l: usize) -> Result<ClassSet> {
    if l >= 1 {
        ClassSet::lightweight(l, l)
    } else {
        ClassSet::full(0, 0)
    }
}

impl EncoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        classes: ClassSet,
        d_in: usize,
        d: usize,
        d_h: usize,
        heads: usize,
        kernel: AttnKernel,
        d_f: usize,
        activation: Activation,
    ) -> Result<Self> {
        let l = classes.l;
        let attn = AttentionLayer::new(classes, d_in, d, d_h, heads, kernel, true)?;
        let mlp1 = EquivariantLinear::new(mlp_class_set(l)?, d, d_f)?;
        let mlp2 = EquivariantLinear::new(mlp_class_set(l)?, d_f, d)?;
        Ok(EncoderLayer {
            attn,
            mlp1,
            mlp2,
            ln1: LayerNorm::new(d_in),
            ln2: LayerNorm::new(d),
            activation,
            dropout_rate: 0.0,
            ln_enabled: true,
        })
    }

    pub fn k(&self) -> usize {
        self.attn.k()
    }

    pub fn l(&self) -> usize {
        self.attn.l()
    }

    pub fn d_in(&self) -> usize {
        self.attn.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.attn.d_out()
    }

    pub fn init_fan_scaled(&mut self, rng: &mut impl rand::Rng) {
        self.attn.init_fan_scaled(rng);
        self.mlp1.init_fan_scaled(rng);
        self.mlp2.init_fan_scaled(rng);
    }

    fn mlp_dense(&self, z: &DenseTensor) -> Result<DenseTensor> {
        let h = if self.l() >= 1 {
            self.mlp1.forward_lightweight(z)?
        } else {
            self.mlp1.forward_dense(z)?
        };
        let mut h = h;
        self.activation.apply(h.values_mut());
        if self.l() >= 1 {
            self.mlp2.forward_lightweight(&h)
        } else {
            self.mlp2.forward_dense(&h)
        }
    }

    fn mlp_sparse(&self, z: &SparseTensor) -> Result<SparseTensor> {
        let mut h = self.mlp1.forward_sparse(z, z.edges())?;
        self.activation.apply(h.values_mut());
        self.mlp2.forward_sparse(&h, h.edges())
    }

    pub fn forward_dense(&self, x: &DenseTensor, train: bool, seed: u64) -> Result<DenseTensor> {
        let xn = if self.ln_enabled {
            DenseTensor::from_values(x.n(), x.k(), self.ln1.apply_rows(x.values()))?
        } else {
            x.clone()
        };
        let mut y = self.attn.forward_dense(&xn)?;
        if train {
            dropout_inplace(y.values_mut(), self.dropout_rate, split_seed(seed, "attn.drop"));
        }
        let z = if self.ln_enabled {
            DenseTensor::from_values(y.n(), y.k(), self.ln2.apply_rows(y.values()))?
        } else {
            y.clone()
        };
        let mut m = self.mlp_dense(&z)?;
        if train {
            dropout_inplace(m.values_mut(), self.dropout_rate, split_seed(seed, "mlp.drop"));
        }
        y.values_mut().add_assign(m.values());
        Ok(y)
    }

    pub fn forward_sparse(
        &self,
        s: &SparseTensor,
        eout: &EdgeSet,
        train: bool,
        seed: u64,
    ) -> Result<SparseTensor> {
        let xn = if self.ln_enabled {
            SparseTensor::from_values(s.edges().clone(), self.ln1.apply_rows(s.values()))?
        } else {
            s.clone()
        };
        let mut y = self.attn.forward_sparse(&xn, eout)?;
        if train {
            dropout_inplace(y.values_mut(), self.dropout_rate, split_seed(seed, "attn.drop"));
        }
        let z = if self.ln_enabled {
            SparseTensor::from_values(y.edges().clone(), self.ln2.apply_rows(y.values()))?
        } else {
            y.clone()
        };
        let mut m = self.mlp_sparse(&z)?;
        if train {
            dropout_inplace(m.values_mut(), self.dropout_rate, split_seed(seed, "mlp.drop"));
        }
        y.values_mut().add_assign(m.values());
        Ok(y)
    }

    /// Configures the block so its forward equals a plain equivariant
    /// linear layer: unit attention coefficients, normalizations bypassed,
    /// MLP reduced to its output bias field.
    pub fn reduce_to_linear(&mut self) {
        self.attn.force_unit_alpha = true;
        self.ln_enabled = false;
        for (_, m) in self.mlp1.named_params_mut("") {
            for v in m.data_mut() {
                *v = 0.0;
            }
        }
        for c in 0..self.mlp2.class_count() {
            for v in self.mlp2.weight_mut(c).data_mut() {
                *v = 0.0;
            }
        }
    }

    /// The linear layer a reduced block computes: per-class weights are the
    /// head sums w_v w_o, biases the MLP output biases.
    pub fn equivalent_linear(&self) -> Result<EquivariantLinear> {
        let mut lin = EquivariantLinear::new(
            self.attn.class_set().clone(),
            self.d_in(),
            self.d_out(),
        )?;
        for c in 0..self.attn.class_set().len() {
            let mut w = Mat::zeros(self.d_in(), self.d_out());
            for h in 0..self.attn.heads() {
                let b = self.attn.bundle(c, h);
                w.add_assign(&b.w_v.matmul(&b.w_o));
            }
            *lin.weight_mut(c) = w;
        }
        for bidx in 0..self.mlp2.bias_count() {
            *lin.bias_mut(bidx) = self.mlp2.bias(bidx).clone();
        }
        Ok(lin)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Mat)> {
        let mut out = self.attn.named_params(&format!("{prefix}.attn"));
        out.extend(self.mlp1.named_params(&format!("{prefix}.mlp1")));
        out.extend(self.mlp2.named_params(&format!("{prefix}.mlp2")));
        if self.ln_enabled {
            out.push((format!("{prefix}.ln1.scale"), &self.ln1.scale));
            out.push((format!("{prefix}.ln1.shift"), &self.ln1.shift));
            out.push((format!("{prefix}.ln2.scale"), &self.ln2.scale));
            out.push((format!("{prefix}.ln2.shift"), &self.ln2.shift));
        }
        out
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Mat)> {
        let mut out = self.attn.named_params_mut(&format!("{prefix}.attn"));
        out.extend(self.mlp1.named_params_mut(&format!("{prefix}.mlp1")));
        out.extend(self.mlp2.named_params_mut(&format!("{prefix}.mlp2")));
        if self.ln_enabled {
            out.push((format!("{prefix}.ln1.scale"), &mut self.ln1.scale));
            out.push((format!("{prefix}.ln1.shift"), &mut self.ln1.shift));
            out.push((format!("{prefix}.ln2.scale"), &mut self.ln2.scale));
            out.push((format!("{prefix}.ln2.shift"), &mut self.ln2.shift));
        }
        out
    }
}

/// Serializable description of one encoder block.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerDesc {
    pub k: usize,
    pub l: usize,
    /// Output width; the input width comes from the previous layer.
    pub d: usize,
    pub d_h: usize,
    pub heads: usize,
    pub kernel: AttnKernel,
    pub d_f: usize,
    pub ln: bool,
    /// Feature-map coefficient normalization.
    pub normalize: bool,
    pub classes: ClassSetDescriptor,
}

impl LayerDesc {
    /// Block over the full class set with default settings.
    pub fn full(k: usize, l: usize, d: usize, d_h: usize, heads: usize, kernel: AttnKernel) -> Result<Self> {
        Ok(LayerDesc {
            k,
            l,
            d,
            d_h,
            heads,
            kernel,
            d_f: d,
            ln: true,
            normalize: true,
            classes: ClassSet::full(k, l)?.descriptor(),
        })
    }
}

/// Serializable description of a whole model.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    pub d_in: usize,
    pub layers: Vec<LayerDesc>,
    pub final_norm: bool,
    /// Output width of the closing linear projection, if any.
    pub projection: Option<usize>,
    pub activation: Activation,
    pub dropout: f64,
}

impl ModelSpec {
    pub fn output_order(&self) -> usize {
        self.layers.last().map(|l| l.l).unwrap_or(0)
    }
}

/// A built model: encoder chain plus optional closing norm and projection.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<EncoderLayer>,
    pub final_ln: Option<LayerNorm>,
    pub proj_w: Option<Mat>,
    pub proj_b: Option<Mat>,
}

/// Builds and deterministically initializes a model from its description.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut d_prev = spec.d_in;
    let mut k_prev: Option<usize> = None;
    for (t, desc) in spec.layers.iter().enumerate() {
        if let Some(expected) = k_prev {
            if desc.k != expected {
                return Err(Error::LayerChain {
                    idx: t,
                    expected,
                    got: desc.k,
                });
            }
        }
        let classes = ClassSet::from_descriptor(&desc.classes)?;
        if classes.k != desc.k || classes.l != desc.l {
            return Err(Error::Shape("class set order disagrees with layer".into()));
        }
        let mut layer = EncoderLayer::new(
            classes,
            d_prev,
            desc.d,
            desc.d_h,
            desc.heads,
            desc.kernel.clone(),
            desc.d_f,
            spec.activation,
        )?;
        layer.dropout_rate = spec.dropout;
        layer.ln_enabled = desc.ln;
        layer.attn.normalize = desc.normalize;
        layer.init_fan_scaled(&mut rng_from_seed(split_seed(seed, &format!("layer{t}"))));
        layers.push(layer);
        d_prev = desc.d;
        k_prev = Some(desc.l);
    }
    let final_ln = if spec.final_norm {
        Some(LayerNorm::new(d_prev))
    } else {
        None
    };
    let (proj_w, proj_b) = match spec.projection {
        Some(w) => (
            Some(Mat::fan_scaled_uniform(
                d_prev,
                w,
                &mut rng_from_seed(split_seed(seed, "proj")),
            )),
            Some(Mat::zeros(1, w)),
        ),
        None => (None, None),
    };
    Ok(Model {
        spec: spec.clone(),
        layers,
        final_ln,
        proj_w,
        proj_b,
    })
}

impl Model {
    fn close_rows(&self, mut vals: Mat) -> Mat {
        if let Some(ln) = &self.final_ln {
            vals = ln.apply_rows(&vals);
        }
        if let Some(w) = &self.proj_w {
            let mut out = vals.matmul(w);
            if let Some(b) = &self.proj_b {
                for r in 0..out.rows() {
                    let row = out.row_mut(r);
                    for (c, slot) in row.iter_mut().enumerate() {
                        *slot += b.get(0, c);
                    }
                }
            }
            vals = out;
        }
        vals
    }

    pub fn forward_dense(&self, x: &DenseTensor, train: bool, seed: u64) -> Result<DenseTensor> {
        let mut cur = x.clone();
        for (t, layer) in self.layers.iter().enumerate() {
            cur = layer.forward_dense(&cur, train, split_seed(seed, &format!("drop{t}")))?;
        }
        let n = cur.n();
        let k = cur.k();
        DenseTensor::from_values(n, k, self.close_rows(cur.values().clone()))
    }

    /// Sparse forward; output edge sets follow each layer's order change by
    /// projection (l < k) or carry over unchanged (l = k).
    pub fn forward_sparse(&self, s: &SparseTensor, train: bool, seed: u64) -> Result<SparseTensor> {
        let mut cur = s.clone();
        for (t, layer) in self.layers.iter().enumerate() {
            let eout = if layer.l() == layer.k() {
                cur.edges().clone()
            } else {
                project_edges(cur.edges(), layer.l())?
            };
            cur = layer.forward_sparse(&cur, &eout, train, split_seed(seed, &format!("drop{t}")))?;
        }
        let edges = cur.edges().clone();
        SparseTensor::from_values(edges, self.close_rows(cur.values().clone()))
    }

    pub fn named_params(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (t, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named_params(&format!("layer{t}")));
        }
        if let Some(ln) = &self.final_ln {
            out.push(("final_ln.scale".to_string(), &ln.scale));
            out.push(("final_ln.shift".to_string(), &ln.shift));
        }
        if let Some(w) = &self.proj_w {
            out.push(("proj.w".to_string(), w));
        }
        if let Some(b) = &self.proj_b {
            out.push(("proj.b".to_string(), b));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = Vec::new();
        for (t, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.named_params_mut(&format!("layer{t}")));
        }
        if let Some(ln) = &mut self.final_ln {
            out.push(("final_ln.scale".to_string(), &mut ln.scale));
            out.push(("final_ln.shift".to_string(), &mut ln.shift));
        }
        if let Some(w) = &mut self.proj_w {
            out.push(("proj.w".to_string(), w));
        }
        if let Some(b) = &mut self.proj_b {
            out.push(("proj.b".to_string(), b));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, m)| m.rows() * m.cols()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body: Vec<u8> = Vec::new();
        body.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let spec_json = serde_json::to_vec(&self.spec)?;
        body.extend_from_slice(&(spec_json.len() as u64).to_le_bytes());
        body.extend_from_slice(&spec_json);
        let params = self.named_params();
        body.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for (name, m) in params {
            body.extend_from_slice(&(name.len() as u64).to_le_bytes());
            body.extend_from_slice(name.as_bytes());
            body.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            body.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv64(&body);
        let mut f = std::fs::File::create(path)?;
        f.write_all(CKPT_MAGIC)?;
        f.write_all(&body)?;
        f.write_all(&sum.to_le_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < CKPT_MAGIC.len() + 8 || &bytes[..CKPT_MAGIC.len()] != CKPT_MAGIC {
            return Err(Error::Corrupt("bad checkpoint magic".into()));
        }
        let body = &bytes[CKPT_MAGIC.len()..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        if fnv64(body) != stored {
            return Err(Error::Corrupt("checkpoint checksum mismatch".into()));
        }
        let mut cur = Cursor { buf: body, at: 0 };
        let version = cur.u64_from_u32()?;
        if version != CKPT_VERSION as u64 {
            return Err(Error::Corrupt(format!("unsupported checkpoint version {version}")));
        }
        let spec_len = cur.u64()? as usize;
        let spec: ModelSpec = serde_json::from_slice(cur.take(spec_len)?)?;
        let mut model = build_model(&spec, 0)?;
        let count = cur.u64()? as usize;
        let mut params = model.named_params_mut();
        if params.len() != count {
            return Err(Error::Corrupt(format!(
                "checkpoint holds {count} parameters, model needs {}",
                params.len()
            )));
        }
        for (name, m) in params.iter_mut() {
            let nlen = cur.u64()? as usize;
            let got = std::str::from_utf8(cur.take(nlen)?)
                .map_err(|_| Error::Corrupt("parameter name not utf-8".into()))?;
            if got != name {
                return Err(Error::Corrupt(format!(
                    "parameter order mismatch: expected {name}, found {got}"
                )));
            }
            let rows = cur.u64()? as usize;
            let cols = cur.u64()? as usize;
            if rows != m.rows() || cols != m.cols() {
                return Err(Error::Corrupt(format!("parameter {name} has wrong shape")));
            }
            for v in m.data_mut() {
                *v = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
            }
        }
        if cur.at != body.len() {
            return Err(Error::Corrupt("trailing bytes after parameters".into()));
        }
        Ok(model)
    }
}

const CKPT_MAGIC: &[u8; 8] = b"HOTCKPT1";
const CKPT_VERSION: u32 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.at + len > self.buf.len() {
            return Err(Error::Corrupt("checkpoint truncated".into()));
        }
        let out = &self.buf[self.at..self.at + len];
        self.at += len;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u64_from_u32(&mut self) -> Result<u64> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as u64)
    }
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Exact two-block emulation of one step of linear message passing.
///
/// `m_mat` is the (2 d_v + d_e) x d_m message map acting on (X_j, X_i,
/// E_ij); `u_mat` the (d_v + d_m) x d update map acting on (X_j, M_j).
/// Inputs are packed with [mpnn_pack]; after the forward, diagonal entries
/// hold the updated node states in their first d channels. The input edge
/// set must be loop-free (packing adds loops itself).
pub fn mpnn_emulation_weights(
    m_mat: &Mat,
    u_mat: &Mat,
    d_v: usize,
    d_e: usize,
    d_m: usize,
    d: usize,
) -> Result<Model> {
    if m_mat.rows() != 2 * d_v + d_e || m_mat.cols() != d_m {
        return Err(Error::Shape("message map has wrong shape".into()));
    }
    if u_mat.rows() != d_v + d_m || u_mat.cols() != d {
        return Err(Error::Shape("update map has wrong shape".into()));
    }
    let big = (2 * d_v + d_e + d_m).max(d);
    let msg_at = 2 * d_v + d_e;

    let diag = Partition::from_rgs(vec![0, 0, 0, 0])?;
    let entrywise = Partition::from_rgs(vec![0, 1, 0, 1])?;
    let incoming = Partition::from_rgs(vec![0, 1, 1, 1])?;

    let kernel = AttnKernel::Feature(FeatureMap::Performer { d_k: 1, seed: 0 });
    let spec = ModelSpec {
        d_in: big,
        layers: vec![
            LayerDesc {
                k: 2,
                l: 2,
                d: big,
                d_h: big,
                heads: 1,
                kernel: kernel.clone(),
                d_f: 2 * big,
                ln: false,
                normalize: false,
                classes: ClassSet::explicit(2, 2, vec![diag.clone(), entrywise.clone()])?
                    .descriptor(),
            },
            LayerDesc {
                k: 2,
                l: 2,
                d: big,
                d_h: big,
                heads: 1,
                kernel,
                d_f: 2 * big,
                ln: false,
                normalize: false,
                classes: ClassSet::explicit(2, 2, vec![diag.clone(), incoming.clone()])?
                    .descriptor(),
            },
        ],
        final_norm: false,
        projection: None,
        activation: Activation::Relu,
        dropout: 0.0,
    };
    let mut model = build_model(&spec, 0)?;
    // Everything is constructed from zero.
    for (_, m) in model.named_params_mut() {
        for v in m.data_mut() {
            *v = 0.0;
        }
    }

    // Block 1: identity attention on every populated entry.
    {
        let layer = &mut model.layers[0];
        let cs = layer.attn.class_set().clone();
        for c in 0..cs.len() {
            let b = layer.attn.bundle_mut(c, 0);
            b.w_v = Mat::eye(big);
            b.w_o = Mat::eye(big);
        }
        // MLP writes the message M(X_j, X_i, E_ij) into the message
        // channels of every entry, via h = (z, -z), relu, (h+ - h-) G.
        let mut g = Mat::zeros(big, big);
        for r in 0..2 * d_v + d_e {
            for c in 0..d_m {
                g.set(r, msg_at + c, m_mat.get(r, c));
            }
        }
        set_pointwise_mlp(layer, &g, &[vec![0, 1, 0, 1], vec![0, 0, 0, 0]])?;
    }

    // Block 2: aggregate incoming messages onto the diagonal, keep node
    // states, then apply the update map there.
    {
        let layer = &mut model.layers[1];
        let cs = layer.attn.class_set().clone();
        for (c, class) in cs.iter().enumerate() {
            let b = layer.attn.bundle_mut(c, 0);
            let mut v = Mat::zeros(big, big);
            if *class.partition() == incoming {
                for t in 0..d_m {
                    v.set(msg_at + t, msg_at + t, 1.0);
                }
            } else {
                for t in 0..2 * d_v {
                    v.set(t, t, 1.0);
                }
            }
            b.w_v = v;
            b.w_o = Mat::eye(big);
        }
        // Diagonal entries become (X_j, X_j, 0, M_j); the MLP replaces the
        // row with (U(X_j, M_j), 0, ...) through z (G - I) + z = z G.
        let mut g = Mat::zeros(big, big);
        for r in 0..d_v {
            for c in 0..d {
                g.set(r, c, u_mat.get(r, c));
            }
        }
        for r in 0..d_m {
            for c in 0..d {
                g.set(msg_at + r, c, u_mat.get(d_v + r, c));
            }
        }
        let mut g_minus_i = g;
        for t in 0..big {
            let v = g_minus_i.get(t, t) - 1.0;
            g_minus_i.set(t, t, v);
        }
        set_pointwise_mlp(layer, &g_minus_i, &[vec![0, 0, 0, 0]])?;
    }
    Ok(model)
}

/// Programs a block's MLP to compute z -> z g at entries whose class (by
/// restricted growth string over the four positions) is listed, and zero
/// elsewhere, using the two-sided relu identity z = relu(z) - relu(-z).
fn set_pointwise_mlp(layer: &mut EncoderLayer, g: &Mat, classes: &[Vec<u8>]) -> Result<()> {
    let d = g.rows();
    debug_assert_eq!(layer.mlp1.d_in(), d);
    debug_assert_eq!(layer.mlp1.d_out(), 2 * d);
    let targets: Vec<Partition> = classes
        .iter()
        .map(|r| Partition::from_rgs(r.clone()))
        .collect::<Result<Vec<_>>>()?;
    let stack1 = {
        let mut w = Mat::zeros(d, 2 * d);
        for t in 0..d {
            w.set(t, t, 1.0);
            w.set(t, d + t, -1.0);
        }
        w
    };
    let stack2 = {
        let mut w = Mat::zeros(2 * d, d);
        for r in 0..d {
            for c in 0..d {
                w.set(r, c, g.get(r, c));
                w.set(d + r, c, -g.get(r, c));
            }
        }
        w
    };
    let cs1 = layer.mlp1.class_set().clone();
    for (c, class) in cs1.iter().enumerate() {
        let hit = targets.iter().any(|t| t == class.partition());
        *layer.mlp1.weight_mut(c) = if hit {
            stack1.clone()
        } else {
            Mat::zeros(d, 2 * d)
        };
    }
    let cs2 = layer.mlp2.class_set().clone();
    for (c, class) in cs2.iter().enumerate() {
        let hit = targets.iter().any(|t| t == class.partition());
        *layer.mlp2.weight_mut(c) = if hit {
            stack2.clone()
        } else {
            Mat::zeros(2 * d, d)
        };
    }
    Ok(())
}
