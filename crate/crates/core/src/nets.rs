//! Feature extractor, bottleneck and bias-free prototype classifier.
//!
//! The representation `f(x)` is the bottleneck output. The classifier is a
//! single weight matrix `[K × d]` whose rows act as class prototypes; logits
//! are `f(x) · Wᵀ` with no bias term.

use std::hash::Hasher;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax_row, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const STANDARDIZE_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Dense ReLU layers of the feature extractor.
    pub hidden: Vec<usize>,
    /// `[inner, out]` widths of dense → standardize → ReLU → dense.
    pub bottleneck: Option<[usize; 2]>,
    pub classes: usize,
}

impl ModelSpec {
    pub fn desk_scale(input_dim: usize, classes: usize) -> Self {
        Self { input_dim, hidden: vec![64, 64], bottleneck: Some([32, 16]), classes }
    }

    /// Dimension `d` of the representation (and of every prototype).
    pub fn representation_dim(&self) -> usize {
        match self.bottleneck {
            Some([_, out]) => out,
            None => self.hidden.last().copied().unwrap_or(self.input_dim),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes == 0 {
            return Err(Error::Config("model needs input_dim > 0 and classes > 0".into()));
        }
        if self.hidden.contains(&0) || self.bottleneck.is_some_and(|b| b.contains(&0)) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
}

/// Handles produced by recording a forward pass on a tape.
#[derive(Clone, Debug)]
pub struct Forward {
    pub features: Var,
    pub logits: Var,
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<NamedParam>,
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| rng.gen_range(-a..=a)).collect()
}

fn expected_layout(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let mut layout = Vec::new();
    let mut width = spec.input_dim;
    for (i, &h) in spec.hidden.iter().enumerate() {
        layout.push((format!("extractor.{i}.weight"), vec![width, h]));
        layout.push((format!("extractor.{i}.bias"), vec![1, h]));
        width = h;
    }
    if let Some([inner, out]) = spec.bottleneck {
        layout.push(("bottleneck.0.weight".into(), vec![width, inner]));
        layout.push(("bottleneck.0.bias".into(), vec![1, inner]));
        layout.push(("bottleneck.1.weight".into(), vec![inner, out]));
        layout.push(("bottleneck.1.bias".into(), vec![1, out]));
        width = out;
    }
    layout.push(("classifier.weight".into(), vec![spec.classes, width]));
    layout
}

impl Model {
    pub fn init(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let params = expected_layout(&spec)
            .into_iter()
            .map(|(name, shape)| {
                let data = if name.ends_with(".bias") {
                    vec![0.0; shape[1]]
                } else if name == "classifier.weight" {
                    // stored [K × d]; fan_in = d, fan_out = K
                    glorot(rng, shape[1], shape[0])
                } else {
                    glorot(rng, shape[0], shape[1])
                };
                Ok(NamedParam { name, tensor: Tensor::new(shape, data)? })
            })
            .collect::<Result<_>>()?;
        Ok(Self { spec, params })
    }

    /// Builds a model from explicit parameters, checking names and shapes.
    pub fn from_params(spec: ModelSpec, params: Vec<NamedParam>) -> Result<Self> {
        spec.validate()?;
        let layout = expected_layout(&spec);
        if layout.len() != params.len() {
            return Err(Error::Format {
                what: "model parameters",
                detail: format!("expected {} arrays, got {}", layout.len(), params.len()),
            });
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.tensor.shape() {
                return Err(Error::Format {
                    what: "model parameters",
                    detail: format!("expected {name} {shape:?}, got {} {:?}", p.name, p.tensor.shape()),
                });
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Classifier weights `[K × d]`; row `k` is the prototype of class `k`.
    pub fn prototypes(&self) -> &Tensor {
        &self.params.last().expect("classifier always present").tensor
    }

    /// Records the forward pass for input `x` on `tape`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Forward> {
        let xs = tape.value(x);
        if !xs.is_matrix() || xs.cols() != self.spec.input_dim {
            return Err(Error::shape(
                "features",
                format!("input {:?}, model expects {} columns", xs.shape(), self.spec.input_dim),
            ));
        }
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.tensor.clone())).collect();
        let mut it = vars.iter().copied();
        let mut dense = |tape: &mut Tape, h: Var| -> Result<Var> {
            let (w, b) = (it.next().expect("weight"), it.next().expect("bias"));
            let z = tape.matmul(h, w)?;
            tape.add_row(z, b)
        };
        let mut h = x;
        for _ in &self.spec.hidden {
            h = dense(tape, h)?;
            h = tape.relu(h)?;
        }
        if self.spec.bottleneck.is_some() {
            h = dense(tape, h)?;
            h = tape.row_standardize(h, STANDARDIZE_EPS)?;
            h = tape.relu(h)?;
            h = dense(tape, h)?;
        }
        let classifier = *vars.last().expect("classifier");
        let logits = tape.matmul_t(h, classifier)?;
        Ok(Forward { features: h, logits, params: vars })
    }

    fn run(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let fwd = self.forward(&mut tape, xv)?;
        Ok((tape.value(fwd.features).clone(), tape.value(fwd.logits).clone()))
    }

    /// Representations `f(x)`, `[n × d]`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x)?.0)
    }

    /// Class scores `f(x) · Wᵀ`, `[n × K]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x)?.1)
    }

    pub fn features_and_logits(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.run(x)
    }

    /// Row-wise softmax of the logits.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Copies gradients for the recorded parameter handles into `grad` buffers.
    pub fn store_grads(&mut self, grads: &mut Gradients, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            p.tensor.grad = Some(grads.take(v));
        }
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.tensor).collect()
    }

    /// Stable hash of every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in &self.params {
            h.write(p.name.as_bytes());
            for v in p.tensor.data() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    pub fn snapshot(&self) -> FrozenModel {
        let mut copy = self.clone();
        for p in &mut copy.params {
            p.tensor.grad = None;
        }
        FrozenModel(Arc::new(copy))
    }
}

pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(logits.shape().to_vec());
    let c = logits.cols();
    for (src, dst) in logits.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        softmax_row(src, dst);
    }
    out
}

/// Read-only copy of a model; cheap to clone and share across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenModel(Arc<Model>);

impl std::ops::Deref for FrozenModel {
    type Target = Model;
    fn deref(&self) -> &Model {
        &self.0
    }
}

/// The model being trained and the snapshot taken at the last stage boundary.
#[derive(Clone, Debug)]
pub struct ModelPair {
    pub current: Model,
    previous: Option<FrozenModel>,
}

impl ModelPair {
    pub fn new(current: Model) -> Self {
        Self { current, previous: None }
    }

    pub fn previous(&self) -> Option<&FrozenModel> {
        self.previous.as_ref()
    }

    /// Replaces the stored snapshot with a copy of the current model.
    pub fn refresh_previous(&mut self) {
        self.previous = Some(self.current.snapshot());
    }
}

/// Which outputs the distillation term compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillOn {
    #[default]
    Logits,
    Representation,
}

// Checkpoint layout (all integers little-endian):
//   b"CDSLCKPT" | u32 version=1 | u32 spec_len | spec JSON bytes | u32 count
//   count × ( u32 name_len | name UTF-8 | u32 ndim | ndim × u64 dim | f64 values )
const MAGIC: &[u8; 8] = b"CDSLCKPT";
const VERSION: u32 = 1;

impl Model {
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        let spec = serde_json::to_vec(&self.spec)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(spec.len() as u32).to_le_bytes())?;
        w.write_all(&spec)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            let shape = p.tensor.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in p.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        fn u32_of(r: &mut impl Read) -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        fn bytes_of(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
            let mut b = vec![0u8; n];
            r.read_exact(&mut b)?;
            Ok(b)
        }
        let bad = |detail: &str| Error::Format { what: "checkpoint", detail: detail.into() };
        if bytes_of(r, 8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32_of(r)?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let spec_len = u32_of(r)? as usize;
        let spec: ModelSpec = serde_json::from_slice(&bytes_of(r, spec_len)?)?;
        let count = u32_of(r)? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32_of(r)? as usize;
            let name = String::from_utf8(bytes_of(r, name_len)?).map_err(|_| bad("name is not UTF-8"))?;
            let ndim = u32_of(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let b = bytes_of(r, 8)?;
                shape.push(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = bytes_of(r, n * 8)?;
            let data = raw.chunks(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.push(NamedParam { name, tensor: Tensor::new(shape, data)? });
        }
        Model::from_params(spec, params)
    }
}
