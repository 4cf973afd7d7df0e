use std::io::{BufRead, Write};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tape::TapeHandle;

/// NCHW dimensions: (batch, channels, height, width).
pub type Shape = [usize; 4];

/// Immutable rank-4 NCHW tensor of `f32` values.
///
/// Cloning is cheap (the buffer is shared). A tensor optionally carries a
/// handle to the gradient tape node that produced it; [`Tensor::detach`]
/// drops that link.
#[derive(Clone)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f32>>,
    pub(crate) node: Option<TapeHandle>,
}

impl Tensor {
    /// Builds a tensor, validating length and finiteness.
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(TensorError::EmptyShape { shape });
        }
        if data.len() != numel {
            return Err(TensorError::DataLength { expected: numel, got: data.len() });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Tensor { shape, data: Arc::new(data), node: None })
    }

    /// Internal constructor for op outputs whose finiteness is checked by the op.
    pub(crate) fn from_parts(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data: Arc::new(data), node: None }
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(TensorError::EmptyShape { shape });
        }
        Ok(Tensor::from_parts(shape, vec![0.0; numel]))
    }

    pub fn filled(shape: Shape, value: f32) -> Result<Self> {
        let t = Tensor::zeros(shape)?;
        Tensor::new(shape, vec![value; t.numel()])
    }

    /// 1×1×1×1 tensor holding one value.
    pub fn scalar(value: f32) -> Result<Self> {
        Tensor::new([1, 1, 1, 1], vec![value])
    }

    /// Concatenates tensors along the batch dimension. Not differentiable;
    /// used to assemble mini-batches before recording starts.
    pub fn concat_batch(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::TooFewElements {
            op: "concat_batch",
            needed: 1,
            got: 0,
        })?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut n_total = 0;
        for p in parts {
            if p.shape[1] != c || p.shape[2] != h || p.shape[3] != w {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_batch",
                    left: first.shape,
                    right: p.shape,
                });
            }
            n_total += p.shape[0];
            data.extend_from_slice(p.data());
        }
        Tensor::new([n_total, c, h, w], data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        let [_, cs, hs, ws] = self.shape;
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    /// Returns the single value of a 1-element tensor.
    pub fn scalar_value(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(TensorError::LossNotScalar { shape: self.shape });
        }
        Ok(self.data[0])
    }

    /// Copy without the tape link.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape, data: Arc::clone(&self.data), node: None }
    }

    pub fn is_on_tape(&self) -> bool {
        self.node.is_some()
    }

    /// Bitwise value equality (shape and every element).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Writes the text dump format: one header line `N C H W f32`, then
    /// whitespace-separated decimal values (shortest round-trip form).
    pub fn write_text<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let [n, c, h, w] = self.shape;
        writeln!(out, "{n} {c} {h} {w} f32")?;
        for row in self.data.chunks(self.shape[3]) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }

    /// Parses the text dump format produced by [`Tensor::write_text`].
    pub fn read_text<R: BufRead>(input: &mut R) -> Result<Self> {
        let mut header = String::new();
        input
            .read_line(&mut header)
            .map_err(|e| TensorError::ParseDump { detail: e.to_string() })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[4] != "f32" {
            return Err(TensorError::ParseDump {
                detail: format!("bad header {header:?}, expected `N C H W f32`"),
            });
        }
        let mut dims = [0usize; 4];
        for (d, s) in dims.iter_mut().zip(&fields[..4]) {
            *d = s.parse().map_err(|_| TensorError::ParseDump {
                detail: format!("bad dimension {s:?}"),
            })?;
        }
        let mut data = Vec::with_capacity(dims.iter().product());
        let mut body = String::new();
        input
            .read_to_string(&mut body)
            .map_err(|e| TensorError::ParseDump { detail: e.to_string() })?;
        for token in body.split_whitespace() {
            let v: f32 = token.parse().map_err(|_| TensorError::ParseDump {
                detail: format!("bad value {token:?}"),
            })?;
            data.push(v);
        }
        Tensor::new(dims, data)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, on_tape={}, data[..{}]={:?})",
            self.shape,
            self.node.is_some(),
            self.numel().min(8),
            &self.data[..self.numel().min(8)]
        )
    }
}
