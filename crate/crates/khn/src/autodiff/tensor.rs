use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// A dense row-major f64 tensor with optional gradient storage.
///
/// `Tensor` is a cheap handle (`Rc`) onto shared storage; cloning it aliases
/// the same buffer. Tensors are single-writer: a tensor is mutated only by
/// optimizer steps and gradient accumulation, never concurrently. Handles
/// are deliberately not `Send` — each execution stream owns its tensors and
/// cross-thread work clones raw data instead.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
    id: u64,
}

struct TensorData {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if let Some(v) = data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value {v} in {what}")));
    }
    Ok(())
}

impl Tensor {
    /// Builds a tensor from a flat row-major buffer.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        check_finite(&data, "tensor construction")?;
        Ok(Self::from_parts(shape.to_vec(), data, false))
    }

    /// Builds a trainable tensor (`requires_grad = true`).
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; numel], false)
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Tensor {
        Self::from_parts(Vec::new(), vec![value], false)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                data,
                grad: None,
                requires_grad,
            })),
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
        }
    }

    /// Stable identity of the underlying storage (shared by clones).
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, requires_grad: bool) {
        self.inner.borrow_mut().requires_grad = requires_grad;
    }

    /// Copies the flat data buffer out.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Extracts the single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        let d = self.inner.borrow();
        if d.data.len() != 1 {
            return Err(Error::Shape(format!(
                "item() on tensor of shape {:?}",
                d.shape
            )));
        }
        Ok(d.data[0])
    }

    /// Overwrites the data buffer, keeping the shape.
    pub fn set_data(&self, data: &[f64]) -> Result<()> {
        let mut d = self.inner.borrow_mut();
        if data.len() != d.data.len() {
            return Err(Error::Shape(format!(
                "set_data length {} != tensor numel {}",
                data.len(),
                d.data.len()
            )));
        }
        check_finite(data, "set_data")?;
        d.data.copy_from_slice(data);
        Ok(())
    }

    /// Current gradient buffer, if one has been accumulated.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut d = self.inner.borrow_mut();
        debug_assert_eq!(delta.len(), d.data.len());
        match d.grad {
            Some(ref mut g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => d.grad = Some(delta.to_vec()),
        }
    }

    /// Runs `f` over (data, grad) with the grad treated as zeros when absent.
    pub(crate) fn with_data_mut<R>(&self, f: impl FnOnce(&mut Vec<f64>, &mut Option<Vec<f64>>) -> R) -> R {
        let mut d = self.inner.borrow_mut();
        let TensorData {
            ref mut data,
            ref mut grad,
            ..
        } = *d;
        f(data, grad)
    }

    /// Borrows the data buffer for the duration of `f`.
    pub(crate) fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.borrow().data)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &d.shape)
            .field("requires_grad", &d.requires_grad)
            .field("data", &d.data)
            .finish()
    }
}
