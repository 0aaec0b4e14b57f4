//! LSTM cell and bidirectional encoder with backpropagation through time.
//!
//! Gate pre-activations are `z = W x + U h_prev + b`, split into four
//! blocks of size `h` in the order `[input, forget, cell, output]`:
//!
//! ```text
//! i = sigmoid(z_i)   f = sigmoid(z_f)   g = tanh(z_g)   o = sigmoid(z_o)
//! c = f * c_prev + i * g
//! h = o * tanh(c)
//! ```

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, Axis, Ix1, Ix2, Zip};

use super::init::xavier_uniform;
use super::param::{ParamMut, Parameter, Parameterized};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// Input-to-gate weights, `4h x d`.
    pub w: Parameter<Ix2>,
    /// Hidden-to-gate weights, `4h x h`.
    pub u: Parameter<Ix2>,
    /// Gate biases, `4h`.
    pub b: Parameter<Ix1>,
}

impl LstmParams {
    pub fn new(w: Array2<f64>, u: Array2<f64>, b: Array1<f64>) -> Result<Self> {
        let h = u.ncols();
        if h == 0 || u.nrows() != 4 * h || w.nrows() != 4 * h || b.len() != 4 * h || w.ncols() == 0 {
            return Err(Error::Shape(format!(
                "lstm: W {:?}, U {:?}, b {:?} are not consistent",
                w.shape(),
                u.shape(),
                b.shape()
            )));
        }
        Ok(Self {
            w: Parameter::new(w),
            u: Parameter::new(u),
            b: Parameter::new(b),
        })
    }

    /// Xavier-uniform weights, zero biases except the forget block at 1.
    pub fn init(input_dim: usize, hidden: usize, seed_w: u64, seed_u: u64) -> Result<Self> {
        let w = xavier_uniform(4 * hidden, input_dim, seed_w)?;
        let u = xavier_uniform(4 * hidden, hidden, seed_u)?;
        let mut b = Array1::zeros(4 * hidden);
        b.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        Self::new(w, u, b)
    }

    pub fn hidden_size(&self) -> usize {
        self.u.value.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.w.value.ncols()
    }
}

impl Parameterized for LstmParams {
    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        vec![self.w.named_mut("w"), self.u.named_mut("u"), self.b.named_mut("b")]
    }

    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![self.w.named("w"), self.u.named("u"), self.b.named("b")]
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct StepOut {
    h: Array1<f64>,
    c: Array1<f64>,
    gates: Array1<f64>,
    tanh_c: Array1<f64>,
}

/// One recurrence step given `pre = W x + b`.
fn step(pre: ArrayView1<f64>, h_prev: ArrayView1<f64>, c_prev: ArrayView1<f64>, u: ArrayView2<f64>) -> StepOut {
    let h = h_prev.len();
    let mut gates = u.dot(&h_prev) + &pre;
    gates.slice_mut(s![..2 * h]).mapv_inplace(sigmoid);
    gates.slice_mut(s![2 * h..3 * h]).mapv_inplace(f64::tanh);
    gates.slice_mut(s![3 * h..]).mapv_inplace(sigmoid);
    let i = gates.slice(s![..h]);
    let f = gates.slice(s![h..2 * h]);
    let g = gates.slice(s![2 * h..3 * h]);
    let o = gates.slice(s![3 * h..]);
    let c = &f * &c_prev + &i * &g;
    let tanh_c = c.mapv(f64::tanh);
    let h_new = &o * &tanh_c;
    StepOut {
        h: h_new,
        c,
        gates,
        tanh_c,
    }
}

/// Gradient of the gate pre-activations and of `c_prev`, given the
/// gradients flowing into `h` and `c` of this step.
fn step_backward(
    gates: ArrayView1<f64>,
    c_prev: ArrayView1<f64>,
    tanh_c: ArrayView1<f64>,
    dh: ArrayView1<f64>,
    dc: ArrayView1<f64>,
) -> (Array1<f64>, Array1<f64>) {
    let h = dh.len();
    let i = gates.slice(s![..h]);
    let f = gates.slice(s![h..2 * h]);
    let g = gates.slice(s![2 * h..3 * h]);
    let o = gates.slice(s![3 * h..]);

    let mut dz = Array1::zeros(4 * h);
    let mut dc_prev = Array1::zeros(h);
    for k in 0..h {
        let dc_total = dc[k] + dh[k] * o[k] * (1.0 - tanh_c[k] * tanh_c[k]);
        dz[k] = dc_total * g[k] * i[k] * (1.0 - i[k]);
        dz[h + k] = dc_total * c_prev[k] * f[k] * (1.0 - f[k]);
        dz[2 * h + k] = dc_total * i[k] * (1.0 - g[k] * g[k]);
        dz[3 * h + k] = dh[k] * tanh_c[k] * o[k] * (1.0 - o[k]);
        dc_prev[k] = dc_total * f[k];
    }
    (dz, dc_prev)
}

/// Activations of one cell step, kept for [`lstm_cell_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct CellCache {
    x: Array1<f64>,
    h_prev: Array1<f64>,
    c_prev: Array1<f64>,
    gates: Array1<f64>,
    tanh_c: Array1<f64>,
}

fn check_finite(what: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} produced a non-finite value")))
    }
}

pub fn lstm_cell(
    x: ArrayView1<f64>,
    h_prev: ArrayView1<f64>,
    c_prev: ArrayView1<f64>,
    p: &LstmParams,
) -> Result<(Array1<f64>, Array1<f64>, CellCache)> {
    let hidden = p.hidden_size();
    if x.len() != p.input_dim() || h_prev.len() != hidden || c_prev.len() != hidden {
        return Err(Error::Shape(format!(
            "lstm cell: x {}, h {}, c {} for d={} h={}",
            x.len(),
            h_prev.len(),
            c_prev.len(),
            p.input_dim(),
            hidden
        )));
    }
    let pre = p.w.value.dot(&x) + &p.b.value;
    let out = step(pre.view(), h_prev, c_prev, p.u.value.view());
    check_finite("lstm cell", out.h.iter().chain(out.c.iter()).copied())?;
    let cache = CellCache {
        x: x.to_owned(),
        h_prev: h_prev.to_owned(),
        c_prev: c_prev.to_owned(),
        gates: out.gates,
        tanh_c: out.tanh_c,
    };
    Ok((out.h, out.c, cache))
}

/// Accumulates parameter gradients and returns `(dx, dh_prev, dc_prev)`.
pub fn lstm_cell_backward(
    cache: &CellCache,
    dh: ArrayView1<f64>,
    dc: ArrayView1<f64>,
    p: &mut LstmParams,
) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
    let (dz, dc_prev) = step_backward(cache.gates.view(), cache.c_prev.view(), cache.tanh_c.view(), dh, dc);
    let dz_col = dz.view().insert_axis(Axis(1));
    p.w.grad += &dz_col.dot(&cache.x.view().insert_axis(Axis(0)));
    p.u.grad += &dz_col.dot(&cache.h_prev.view().insert_axis(Axis(0)));
    p.b.grad += &dz;
    let dx = p.w.value.t().dot(&dz);
    let dh_prev = p.u.value.t().dot(&dz);
    (dx, dh_prev, dc_prev)
}

/// Per-step activations of one direction, stored by token position.
#[derive(Debug, Clone)]
struct DirectionCache {
    reverse: bool,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    gates: Array2<f64>,
    tanh_c: Array2<f64>,
}

fn order(n: usize, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
    if reverse {
        Box::new((0..n).rev())
    } else {
        Box::new(0..n)
    }
}

fn run_direction(xs: ArrayView2<f64>, p: &LstmParams, reverse: bool) -> Result<(Array2<f64>, DirectionCache)> {
    let n = xs.nrows();
    let hidden = p.hidden_size();
    let pre = xs.dot(&p.w.value.t()) + &p.b.value;
    let mut hs = Array2::zeros((n, hidden));
    let mut cache = DirectionCache {
        reverse,
        h_prev: Array2::zeros((n, hidden)),
        c_prev: Array2::zeros((n, hidden)),
        gates: Array2::zeros((n, 4 * hidden)),
        tanh_c: Array2::zeros((n, hidden)),
    };
    let mut h = Array1::zeros(hidden);
    let mut c = Array1::zeros(hidden);
    for t in order(n, reverse) {
        let out = step(pre.row(t), h.view(), c.view(), p.u.value.view());
        cache.h_prev.row_mut(t).assign(&h);
        cache.c_prev.row_mut(t).assign(&c);
        cache.gates.row_mut(t).assign(&out.gates);
        cache.tanh_c.row_mut(t).assign(&out.tanh_c);
        hs.row_mut(t).assign(&out.h);
        h = out.h;
        c = out.c;
    }
    check_finite("lstm", hs.iter().copied())?;
    Ok((hs, cache))
}

fn backward_direction(
    cache: &DirectionCache,
    xs: ArrayView2<f64>,
    dhs: ArrayView2<f64>,
    p: &mut LstmParams,
) -> Array2<f64> {
    let n = xs.nrows();
    let hidden = p.hidden_size();
    let mut dz_all = Array2::zeros((n, 4 * hidden));
    let mut dh_next = Array1::zeros(hidden);
    let mut dc_next = Array1::zeros(hidden);
    // walk the steps in the opposite order to the forward pass
    for t in order(n, !cache.reverse) {
        let dh = &dhs.row(t) + &dh_next;
        let (dz, dc_prev) = step_backward(
            cache.gates.row(t),
            cache.c_prev.row(t),
            cache.tanh_c.row(t),
            dh.view(),
            dc_next.view(),
        );
        dh_next = p.u.value.t().dot(&dz);
        dc_next = dc_prev;
        dz_all.row_mut(t).assign(&dz);
    }
    p.w.grad += &dz_all.t().dot(&xs);
    p.u.grad += &dz_all.t().dot(&cache.h_prev);
    p.b.grad += &dz_all.sum_axis(Axis(0));
    dz_all.dot(&p.w.value)
}

/// Per-token `[h_forward ; h_backward]`, `n x 2h`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmStates {
    pub states: Array2<f64>,
}

impl BiLstmStates {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }
}

#[derive(Debug, Clone)]
pub struct BiLstmCache {
    xs: Array2<f64>,
    fwd: DirectionCache,
    bwd: DirectionCache,
}

pub fn bilstm_encode(
    xs: ArrayView2<f64>,
    fwd: &LstmParams,
    bwd: &LstmParams,
) -> Result<(BiLstmStates, BiLstmCache)> {
    if xs.nrows() == 0 {
        return Err(Error::Shape("bilstm: empty sequence".into()));
    }
    if xs.ncols() != fwd.input_dim() || xs.ncols() != bwd.input_dim() {
        return Err(Error::Shape(format!(
            "bilstm: inputs have {} features, directions expect {} and {}",
            xs.ncols(),
            fwd.input_dim(),
            bwd.input_dim()
        )));
    }
    let (hf, cf) = run_direction(xs, fwd, false)?;
    let (hb, cb) = run_direction(xs, bwd, true)?;
    let states = ndarray::concatenate(Axis(1), &[hf.view(), hb.view()]).expect("equal row counts");
    let cache = BiLstmCache {
        xs: xs.to_owned(),
        fwd: cf,
        bwd: cb,
    };
    Ok((BiLstmStates { states }, cache))
}

/// Backpropagates `d_states` (`n x 2h`) through both directions and
/// returns the gradient with respect to the inputs.
pub fn bilstm_backward(
    cache: &BiLstmCache,
    d_states: ArrayView2<f64>,
    fwd: &mut LstmParams,
    bwd: &mut LstmParams,
) -> Array2<f64> {
    let hf = fwd.hidden_size();
    let mut dxs = backward_direction(&cache.fwd, cache.xs.view(), d_states.slice(s![.., ..hf]), fwd);
    let dxb = backward_direction(&cache.bwd, cache.xs.view(), d_states.slice(s![.., hf..]), bwd);
    Zip::from(&mut dxs).and(&dxb).for_each(|a, &b| *a += b);
    dxs
}
