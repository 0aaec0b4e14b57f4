use ndarray::{Array, ArrayViewD, ArrayViewMutD, Dimension};

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<D: Dimension> {
    pub value: Array<f64, D>,
    pub grad: Array<f64, D>,
}

impl<D: Dimension> Parameter<D> {
    pub fn new(value: Array<f64, D>) -> Self {
        let grad = Array::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn named_mut(&mut self, name: impl Into<String>) -> ParamMut<'_> {
        ParamMut {
            name: name.into(),
            value: self.value.view_mut().into_dyn(),
            grad: self.grad.view_mut().into_dyn(),
        }
    }

    pub fn named(&self, name: impl Into<String>) -> (String, ArrayViewD<'_, f64>) {
        (name.into(), self.value.view().into_dyn())
    }
}

/// Mutable access to one parameter, used by optimizers and gradient checks.
#[derive(Debug)]
pub struct ParamMut<'a> {
    pub name: String,
    pub value: ArrayViewMutD<'a, f64>,
    pub grad: ArrayViewMutD<'a, f64>,
}

/// Anything that owns an ordered, named set of parameters.
///
/// The order is stable and defines the checkpoint manifest order.
pub trait Parameterized {
    fn params_mut(&mut self) -> Vec<ParamMut<'_>>;

    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;

    fn zero_grad(&mut self) {
        for mut p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, v)| v.len()).sum()
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, params: Vec<ParamMut<'a>>) -> Vec<ParamMut<'a>> {
    params
        .into_iter()
        .map(|mut p| {
            p.name = format!("{prefix}.{}", p.name);
            p
        })
        .collect()
}

pub(crate) fn prefixed_ref<'a>(
    prefix: &str,
    params: Vec<(String, ArrayViewD<'a, f64>)>,
) -> Vec<(String, ArrayViewD<'a, f64>)> {
    params
        .into_iter()
        .map(|(name, v)| (format!("{prefix}.{name}"), v))
        .collect()
}
