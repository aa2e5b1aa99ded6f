//! Dense feed-forward network with hand-written reverse-mode gradients, Adam,
//! and a versioned binary checkpoint format.
//!
//! Parameters live in one flat buffer. Layer `l` maps `n_l -> n_{l+1}` and is
//! stored as an `n_l x n_{l+1}` row-major weight block (`W[i * out + j]`)
//! followed by `n_{l+1}` biases.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Silu => 1,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Silu),
            _ => Err(invalid(format!("unknown activation code {c}"))),
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "silu" => Ok(Activation::Silu),
            _ => Err(Error::Config(format!("unknown activation '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Activations cached by [`DenseNet::forward`]: the input to every layer and
/// the pre-activations of every hidden layer.
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = 4 * c;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl DenseNet {
    /// Fan-in scaled uniform init: weights in `±1/sqrt(fan_in)`, zero biases.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes, activation)?;
        let mut offset = 0;
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for p in &mut net.params[offset..offset + w[0] * w[1]] {
                *p = rng.random_range(-bound..bound);
            }
            offset += w[0] * w[1] + w[1];
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        Self::from_params(sizes, activation, vec![0.0; param_count(sizes)])
    }

    pub fn from_params(sizes: &[usize], activation: Activation, params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(invalid(format!("invalid layer sizes {sizes:?}")));
        }
        let expected = param_count(sizes);
        if params.len() != expected {
            return Err(Error::Dimension {
                expected,
                actual: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(invalid("non-finite parameter"));
        }
        Ok(DenseNet {
            sizes: sizes.to_vec(),
            activation,
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// True when both nets have the same layer sizes and activation.
    pub fn same_shape(&self, other: &DenseNet) -> bool {
        self.sizes == other.sizes && self.activation == other.activation
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        Ok(())
    }

    fn layer(&self, offset: usize, n_in: usize, n_out: usize, x: &[f64]) -> Vec<f64> {
        let w = &self.params[offset..offset + n_in * n_out];
        let mut z = self.params[offset + n_in * n_out..offset + n_in * n_out + n_out].to_vec();
        for (i, xi) in x.iter().enumerate() {
            if *xi != 0.0 {
                axpy(*xi, &w[i * n_out..(i + 1) * n_out], &mut z);
            }
        }
        z
    }

    /// Output only; identical values to [`forward`](Self::forward).
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let layers = self.sizes.len() - 1;
        let mut a = input.to_vec();
        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let mut z = self.layer(offset, n_in, n_out, &a);
            if l + 1 < layers {
                for v in &mut z {
                    *v = self.activation.apply(*v);
                }
            }
            a = z;
            offset += n_in * n_out + n_out;
        }
        Ok(a)
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.check_input(input)?;
        let layers = self.sizes.len() - 1;
        let mut tape = Tape {
            inputs: Vec::with_capacity(layers),
            pre: Vec::with_capacity(layers - 1),
        };
        let mut a = input.to_vec();
        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let z = self.layer(offset, n_in, n_out, &a);
            tape.inputs.push(a);
            if l + 1 < layers {
                a = z.iter().map(|v| self.activation.apply(*v)).collect();
                tape.pre.push(z);
            } else {
                a = z;
            }
            offset += n_in * n_out + n_out;
        }
        Ok((a, tape))
    }

    /// Accumulates parameter gradients of `<grad_output, f(x)>` into
    /// `grad_params` and returns the gradient with respect to the input.
    pub fn backward(&self, tape: &Tape, grad_output: &[f64], grad_params: &mut [f64]) -> Result<Vec<f64>> {
        if grad_output.len() != self.output_dim() {
            return Err(Error::Dimension {
                expected: self.output_dim(),
                actual: grad_output.len(),
            });
        }
        if grad_params.len() != self.params.len() {
            return Err(Error::Dimension {
                expected: self.params.len(),
                actual: grad_params.len(),
            });
        }
        let layers = self.sizes.len() - 1;
        if tape.inputs.len() != layers {
            return Err(invalid("tape does not match network depth"));
        }
        let mut offsets = Vec::with_capacity(layers);
        let mut offset = 0;
        for l in 0..layers {
            offsets.push(offset);
            offset += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut g = grad_output.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let a = &tape.inputs[l];
            let (gw, gb) = grad_params[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            for (b, gj) in gb.iter_mut().zip(&g) {
                *b += gj;
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut ga = vec![0.0; n_in];
            for i in 0..n_in {
                if a[i] != 0.0 {
                    axpy(a[i], &g, &mut gw[i * n_out..(i + 1) * n_out]);
                }
                ga[i] = dot(&w[i * n_out..(i + 1) * n_out], &g);
            }
            if l > 0 {
                for (gi, z) in ga.iter_mut().zip(&tape.pre[l - 1]) {
                    *gi *= self.activation.derivative(*z);
                }
            }
            g = ga;
        }
        Ok(g)
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.95;
    pub const EPS: f64 = 1e-8;

    pub fn new(num_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension {
                expected: self.m.len(),
                actual: params.len().min(grads.len()),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powf(self.step as f64);
        let bc2 = 1.0 - self.beta2.powf(self.step as f64);
        for k in 0..params.len() {
            let g = grads[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            params[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"RFLOWCKP";
const VERSION: u32 = 1;

/// Policy parameters, optimizer state and progress counter, with an optional
/// frozen reference network.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: DenseNet,
    pub adam: Adam,
    pub steps_done: u64,
    pub reference: Option<DenseNet>,
}

struct Writer<'a, W: Write> {
    inner: &'a mut W,
}

impl<W: Write> Writer<'_, W> {
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn f64s(&mut self, v: &[f64]) -> std::io::Result<()> {
        self.u64(v.len() as u64)?;
        for x in v {
            self.inner.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }
    fn net(&mut self, net: &DenseNet) -> std::io::Result<()> {
        self.u32(net.sizes.len() as u32)?;
        for s in &net.sizes {
            self.u64(*s as u64)?;
        }
        self.u32(net.activation.code())?;
        self.f64s(&net.params)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(invalid("checkpoint truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(invalid("checkpoint truncated"));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn net(&mut self) -> Result<DenseNet> {
        let layers = self.u32()? as usize;
        if layers > 64 {
            return Err(invalid("implausible layer count in checkpoint"));
        }
        let sizes = (0..layers).map(|_| self.u64().map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
        let activation = Activation::from_code(self.u32()?)?;
        let params = self.f64s()?;
        DenseNet::from_params(&sizes, activation, params)
    }
}

impl Checkpoint {
    pub fn new(net: DenseNet, lr: f64) -> Self {
        let adam = Adam::new(net.num_params(), lr);
        Checkpoint {
            net,
            adam,
            steps_done: 0,
            reference: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut w = Writer { inner: &mut out };
        let write = |w: &mut Writer<Vec<u8>>| -> std::io::Result<()> {
            w.inner.write_all(MAGIC)?;
            w.u32(VERSION)?;
            w.net(&self.net)?;
            w.f64s(&[self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps])?;
            w.u64(self.adam.step)?;
            w.f64s(&self.adam.m)?;
            w.f64s(&self.adam.v)?;
            w.u64(self.steps_done)?;
            match &self.reference {
                Some(r) => {
                    w.u32(1)?;
                    w.net(r)
                }
                None => w.u32(0),
            }
        };
        write(&mut w).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(invalid("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(invalid(format!("unsupported checkpoint version {version}")));
        }
        let net = r.net()?;
        let hyper = r.f64s()?;
        if hyper.len() != 4 {
            return Err(invalid("bad optimizer header"));
        }
        let step = r.u64()?;
        let m = r.f64s()?;
        let v = r.f64s()?;
        if m.len() != net.num_params() || v.len() != net.num_params() {
            return Err(Error::Dimension {
                expected: net.num_params(),
                actual: m.len(),
            });
        }
        let steps_done = r.u64()?;
        let reference = match r.u32()? {
            0 => None,
            1 => Some(r.net()?),
            f => return Err(invalid(format!("bad reference flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(invalid("trailing bytes in checkpoint"));
        }
        Ok(Checkpoint {
            net,
            adam: Adam {
                lr: hyper[0],
                beta1: hyper[1],
                beta2: hyper[2],
                eps: hyper[3],
                m,
                v,
                step,
            },
            steps_done,
            reference,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
