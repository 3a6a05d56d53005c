//! The three-layer network `y = W h(x)`, `r = f(y)`, `z = V h(r)`, `p = s(z)`,
//! its flat parameter layout and the forward pass.
//!
//! `h(·)` prepends a constant 1, so column 0 of `W` is the hidden bias and
//! entry 0 of `V` is the output bias. The flat parameter vector stacks the
//! columns of `W` (bias column first) followed by `Vᵀ`; index `m·N + n`
//! addresses `W[n, m]`.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::activations::{eval_unchecked, sigmoid, ActivationKind};
use crate::error::{check_finite, check_len, Error, Result};

/// Total parameter count `MN + 2N + 1`.
pub fn param_dim(inputs: usize, hidden: usize) -> Result<usize> {
    if inputs == 0 || hidden == 0 {
        return Err(Error::Domain(format!(
            "network dimensions must be positive (M={inputs}, N={hidden})"
        )));
    }
    Ok(inputs * hidden + 2 * hidden + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    /// Input dimension `M`.
    #[serde(rename = "M")]
    pub inputs: usize,
    /// Hidden dimension `N`.
    #[serde(rename = "N")]
    pub hidden: usize,
}

impl NetworkShape {
    pub fn new(inputs: usize, hidden: usize) -> Result<Self> {
        param_dim(inputs, hidden)?;
        Ok(Self { inputs, hidden })
    }

    pub fn dim(&self) -> usize {
        self.inputs * self.hidden + 2 * self.hidden + 1
    }

    /// Length of the `w` part of θ, `(M+1)N`.
    pub fn w_len(&self) -> usize {
        (self.inputs + 1) * self.hidden
    }

    /// Length of the `v` part of θ, `N+1`.
    pub fn v_len(&self) -> usize {
        self.hidden + 1
    }
}

/// `W` is `N × (M+1)` with the bias in column 0; `V` has length `N+1` with the
/// bias in entry 0.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub shape: NetworkShape,
    pub w: Array2<f64>,
    pub v: Array1<f64>,
}

impl NetworkParams {
    pub fn zeros(shape: NetworkShape) -> Self {
        Self {
            shape,
            w: Array2::zeros((shape.hidden, shape.inputs + 1)),
            v: Array1::zeros(shape.hidden + 1),
        }
    }

    pub fn new(w: Array2<f64>, v: Array1<f64>) -> Result<Self> {
        let (hidden, cols) = w.dim();
        if cols == 0 {
            return Err(Error::Domain("W needs at least the bias column".into()));
        }
        let shape = NetworkShape::new(cols - 1, hidden)?;
        check_len("V length", hidden + 1, v.len())?;
        Ok(Self { shape, w, v })
    }

    pub fn unflatten(theta: &[f64], shape: NetworkShape) -> Result<Self> {
        check_len("parameter vector", shape.dim(), theta.len())?;
        let n = shape.hidden;
        let mut params = Self::zeros(shape);
        for m in 0..=shape.inputs {
            for k in 0..n {
                params.w[[k, m]] = theta[m * n + k];
            }
        }
        params
            .v
            .iter_mut()
            .zip(&theta[shape.w_len()..])
            .for_each(|(dst, &src)| *dst = src);
        Ok(params)
    }

    pub fn flatten(&self) -> Array1<f64> {
        let n = self.shape.hidden;
        let mut theta = Array1::zeros(self.shape.dim());
        for m in 0..=self.shape.inputs {
            for k in 0..n {
                theta[m * n + k] = self.w[[k, m]];
            }
        }
        let w_len = self.shape.w_len();
        for (k, &vk) in self.v.iter().enumerate() {
            theta[w_len + k] = vk;
        }
        theta
    }

    /// `Ṽ`, the output weights without the bias.
    pub fn v_tilde(&self) -> ArrayView1<'_, f64> {
        self.v.slice(ndarray::s![1..])
    }

    /// `‖Ṽ‖²_F`.
    pub fn v_tilde_norm_sq(&self) -> f64 {
        self.v_tilde().iter().map(|x| x * x).sum()
    }

    /// `‖W̃‖²_F`, the input weights without the bias column.
    pub fn w_tilde_norm_sq(&self) -> f64 {
        self.w
            .slice(ndarray::s![.., 1..])
            .iter()
            .map(|x| x * x)
            .sum()
    }
}

/// Per-sample intermediates of the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub y: Array1<f64>,
    pub r: Array1<f64>,
    pub z: f64,
    /// `s(z)`. Rounds to exactly 1 for `z ≳ 37`; `delta` and `s1` are
    /// computed from `z` directly and stay accurate there.
    pub p: f64,
    pub q: u8,
    /// `p − q`.
    pub delta: f64,
    /// `s'(z) = p(1 − p)`.
    pub s1: f64,
    pub f1: Array1<f64>,
    pub f2: Array1<f64>,
}

/// Residual `p − q` and `s'(z)` computed without forming `1 − p`.
#[inline]
pub(crate) fn output_terms(z: f64, q: u8) -> (f64, f64, f64) {
    let p = sigmoid(z);
    let p_neg = sigmoid(-z);
    let delta = if q == 1 { -p_neg } else { p };
    (p, delta, p * p_neg)
}

pub(crate) fn check_label(q: u8) -> Result<()> {
    if q > 1 {
        return Err(Error::Domain(format!("label must be 0 or 1, got {q}")));
    }
    Ok(())
}

pub fn forward(
    params: &NetworkParams,
    kind: ActivationKind,
    x: ArrayView1<'_, f64>,
    q: u8,
) -> Result<ForwardTrace> {
    let shape = params.shape;
    check_len("input vector", shape.inputs, x.len())?;
    check_label(q)?;
    for (m, &xm) in x.iter().enumerate() {
        check_finite(format!("input x[{m}]"), xm)?;
    }
    let n = shape.hidden;
    let mut y = Array1::zeros(n);
    let mut r = Array1::zeros(n);
    let mut f1 = Array1::zeros(n);
    let mut f2 = Array1::zeros(n);
    let mut z = params.v[0];
    for k in 0..n {
        let row = params.w.row(k);
        let mut acc = row[0];
        for (m, &xm) in x.iter().enumerate() {
            acc += row[m + 1] * xm;
        }
        y[k] = check_finite(format!("pre-activation y[{k}]"), acc)?;
        let e = eval_unchecked(kind, acc);
        r[k] = check_finite(format!("activation r[{k}]"), e.f)?;
        f1[k] = e.d1;
        f2[k] = e.d2;
        z += params.v[k + 1] * e.f;
    }
    let z = check_finite("logit z", z)?;
    let (p, delta, s1) = output_terms(z, q);
    Ok(ForwardTrace {
        y,
        r,
        z,
        p,
        q,
        delta,
        s1,
        f1,
        f2,
    })
}

/// Binary-labelled inputs; columns of `x` are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `M × I`.
    pub x: Array2<f64>,
    pub q: Vec<u8>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, q: Vec<u8>) -> Result<Self> {
        check_len("label count", x.ncols(), q.len())?;
        if q.is_empty() {
            return Err(Error::Domain("dataset needs at least one sample".into()));
        }
        q.iter().try_for_each(|&l| check_label(l))?;
        Ok(Self { x, q })
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn inputs(&self) -> usize {
        self.x.nrows()
    }

    pub fn sample(&self, i: usize) -> (ArrayView1<'_, f64>, u8) {
        (self.x.column(i), self.q[i])
    }

    /// Reads a CSV with header `x_1,…,x_M,q`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let cols = headers.len();
        if cols < 2 || &headers[cols - 1] != "q" {
            return Err(Error::Domain(
                "dataset CSV header must be x_1,...,x_M,q".into(),
            ));
        }
        for (m, h) in headers.iter().take(cols - 1).enumerate() {
            if h != format!("x_{}", m + 1) {
                return Err(Error::Domain(format!(
                    "dataset CSV column {m} is '{h}', expected 'x_{}'",
                    m + 1
                )));
            }
        }
        let inputs = cols - 1;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            check_len("dataset CSV row", cols, rec.len())?;
            for field in rec.iter().take(inputs) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Domain(format!("bad number '{field}' in dataset")))?;
                values.push(v);
            }
            let label: u8 = rec[inputs]
                .trim()
                .parse()
                .map_err(|_| Error::Domain(format!("bad label '{}'", &rec[inputs])))?;
            labels.push(label);
        }
        let samples = labels.len();
        let rows = Array2::from_shape_vec((samples, inputs), values)
            .map_err(|e| Error::Domain(e.to_string()))?;
        Self::new(rows.reversed_axes().as_standard_layout().to_owned(), labels)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let mut header: Vec<String> = (1..=self.inputs()).map(|m| format!("x_{m}")).collect();
        header.push("q".into());
        wtr.write_record(&header)?;
        for (col, &q) in self.x.axis_iter(Axis(1)).zip(&self.q) {
            let mut row: Vec<String> = col.iter().map(|v| v.to_string()).collect();
            row.push(q.to_string());
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Flat θ plus shape, the on-disk form of a parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    #[serde(flatten)]
    pub shape: NetworkShape,
    pub theta: Vec<f64>,
}

impl ParamsFile {
    pub fn from_params(params: &NetworkParams) -> Self {
        Self {
            shape: params.shape,
            theta: params.flatten().to_vec(),
        }
    }

    pub fn to_params(&self) -> Result<NetworkParams> {
        let shape = NetworkShape::new(self.shape.inputs, self.shape.hidden)?;
        NetworkParams::unflatten(&self.theta, shape)
    }
}

/// Forward traces for a whole dataset plus the column-stacked aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTrace {
    pub traces: Vec<ForwardTrace>,
    /// Inputs, `M × I`.
    pub x: Array2<f64>,
    /// Hidden activations, `N × I`.
    pub r: Array2<f64>,
    /// `s'(z_i)`, length `I`.
    pub s1: Array1<f64>,
    /// `f'(y_i)` as rows, `I × N`.
    pub f1: Array2<f64>,
    /// `f''(y_i)` as rows, `I × N`.
    pub f2: Array2<f64>,
    pub delta: Array1<f64>,
}

impl BatchTrace {
    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    /// Assembles aggregates from per-sample traces and the matching inputs.
    pub fn from_traces(traces: Vec<ForwardTrace>, x: Array2<f64>) -> Result<Self> {
        check_len("batch inputs", traces.len(), x.ncols())?;
        let samples = traces.len();
        let hidden = traces.first().map_or(0, |t| t.r.len());
        let mut r = Array2::zeros((hidden, samples));
        let mut f1 = Array2::zeros((samples, hidden));
        let mut f2 = Array2::zeros((samples, hidden));
        let mut s1 = Array1::zeros(samples);
        let mut delta = Array1::zeros(samples);
        for (i, t) in traces.iter().enumerate() {
            check_len("hidden width", hidden, t.r.len())?;
            r.column_mut(i).assign(&t.r);
            f1.row_mut(i).assign(&t.f1);
            f2.row_mut(i).assign(&t.f2);
            s1[i] = t.s1;
            delta[i] = t.delta;
        }
        Ok(Self {
            traces,
            x,
            r,
            s1,
            f1,
            f2,
            delta,
        })
    }
}

pub fn forward_batch(
    params: &NetworkParams,
    kind: ActivationKind,
    data: &Dataset,
) -> Result<BatchTrace> {
    check_len("dataset input dimension", params.shape.inputs, data.inputs())?;
    let traces = (0..data.len())
        .map(|i| {
            let (x, q) = data.sample(i);
            forward(params, kind, x, q)
        })
        .collect::<Result<Vec<_>>>()?;
    BatchTrace::from_traces(traces, data.x.clone())
}
