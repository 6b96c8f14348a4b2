//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Graph`] is a tape of eagerly evaluated nodes. Each op records a
//! backward closure that maps the node's output gradient to gradient
//! contributions for its parents. [`Graph::backward`] walks the tape in
//! reverse creation order (which is a topological order, since values
//! are computed eagerly) and accumulates gradients.
//!
//! Everything is `f64` and strictly sequential, so a training step is
//! bit-reproducible given the same inputs, and analytic gradients can be
//! checked against central finite differences at double precision. The
//! check lives in this module's tests and covers every primitive op;
//! composite losses get their own checks where they are defined.

mod conv;

pub use conv::{conv2d_output_size, conv_transpose2d_output_size};

use ndarray::{ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix4, IxDyn, Slice};

/// Index of a node on the tape.
pub type NodeId = usize;

type BackwardFn = Box<dyn Fn(&Graph, &ArrayD<f64>) -> Vec<(NodeId, ArrayD<f64>)>>;

struct Node {
    value: ArrayD<f64>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Eager computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every tape node that
/// requires them.
pub struct Gradients {
    by_node: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for a node, defaulting to zeros of the node's shape when
    /// nothing flowed into it.
    pub fn get_or_zeros(&self, graph: &Graph, id: NodeId) -> ArrayD<f64> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(graph.value(id).raw_dim()),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    /// Value of a 0-d (scalar) node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        debug_assert_eq!(v.ndim(), 0, "scalar_value on non-scalar node");
        *v.first().expect("scalar node is nonempty")
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, value: ArrayD<f64>, requires_grad: bool, backward: Option<BackwardFn>) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            backward,
        });
        self.nodes.len() - 1
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id].requires_grad)
    }

    /// Insert a trainable leaf (a parameter).
    pub fn param<D: ndarray::Dimension>(&mut self, value: ndarray::Array<f64, D>) -> NodeId {
        self.push(value.into_dyn(), true, None)
    }

    /// Insert a non-trainable leaf (an input or constant).
    pub fn constant<D: ndarray::Dimension>(&mut self, value: ndarray::Array<f64, D>) -> NodeId {
        self.push(value.into_dyn(), false, None)
    }

    /// Insert a 0-d constant.
    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.push(ArrayD::from_elem(IxDyn(&[]), value), false, None)
    }

    /// Re-insert an existing node's value as a constant, cutting the
    /// gradient path (the adversarial "detach").
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id].value.clone();
        self.push(v, false, None)
    }

    // ----- elementwise binary ops -----

    fn check_same_shape(&self, a: NodeId, b: NodeId) {
        assert_eq!(
            self.nodes[a].value.shape(),
            self.nodes[b].value.shape(),
            "elementwise op on mismatched shapes"
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check_same_shape(a, b);
        let value = &self.nodes[a].value + &self.nodes[b].value;
        let rg = self.any_grad(&[a, b]);
        self.push(
            value,
            rg,
            rg.then(|| {
                Box::new(move |_g: &Graph, grad: &ArrayD<f64>| {
                    vec![(a, grad.clone()), (b, grad.clone())]
                }) as BackwardFn
            }),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check_same_shape(a, b);
        let value = &self.nodes[a].value - &self.nodes[b].value;
        let rg = self.any_grad(&[a, b]);
        self.push(
            value,
            rg,
            rg.then(|| {
                Box::new(move |_g: &Graph, grad: &ArrayD<f64>| {
                    vec![(a, grad.clone()), (b, -grad)]
                }) as BackwardFn
            }),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check_same_shape(a, b);
        let value = &self.nodes[a].value * &self.nodes[b].value;
        let rg = self.any_grad(&[a, b]);
        self.push(
            value,
            rg,
            rg.then(|| {
                Box::new(move |g: &Graph, grad: &ArrayD<f64>| {
                    vec![(a, grad * g.value(b)), (b, grad * g.value(a))]
                }) as BackwardFn
            }),
        )
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check_same_shape(a, b);
        let value = &self.nodes[a].value / &self.nodes[b].value;
        let rg = self.any_grad(&[a, b]);
        self.push(
            value,
            rg,
            rg.then(|| {
                Box::new(move |g: &Graph, grad: &ArrayD<f64>| {
                    let bv = g.value(b);
                    let da = grad / bv;
                    let db = -(grad * g.value(a)) / (bv * bv);
                    vec![(a, da), (b, db)]
                }) as BackwardFn
            }),
        )
    }

    // ----- scalar ops -----

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = &self.nodes[a].value + c;
        let rg = self.nodes[a].requires_grad;
        self.push(
            value,
            rg,
            rg.then(|| {
                Box::new(move |_g: &Graph, grad: &ArrayD<f64>| vec![(a, grad.clone())]) as BackwardFn
            }),
        )
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = &self.nodes[a].value * c;
        let rg = self.nodes[a].requires_grad;
        self.push(
            value,
            rg,
            rg.then(|| {
                Box::new(move |_g: &Graph, grad: &ArrayD<f64>| vec![(a, grad * c)]) as BackwardFn
            }),
        )
    }

    // ----- elementwise unary ops -----

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.mapv(f64::abs);
        let rg = self.nodes[a].requires_grad;
        self.push(
            value,
            rg,
            rg.then(|| {
                Box::new(move |g: &Graph, grad: &ArrayD<f64>| {
                    // subgradient 0 at the kink
                    let sign = g.value(a).mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    vec![(a, grad * &sign)]
                }) as BackwardFn
            }),
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let value = self.nodes[a].value.mapv(|x| if x >= 0.0 { x } else { slope * x });
        let rg = self.nodes[a].requires_grad;
        self.push(
            value,
            rg,
            rg.then(|| {
                Box::new(move |g: &Graph, grad: &ArrayD<f64>| {
                    let mask = g.value(a).mapv(|x| if x >= 0.0 { 1.0 } else { slope });
                    vec![(a, grad * &mask)]
                }) as BackwardFn
            }),
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.mapv(f64::tanh);
        let rg = self.nodes[a].requires_grad;
        let id = self.push(value, rg, None);
        if rg {
            self.nodes[id].backward = Some(Box::new(move |g: &Graph, grad: &ArrayD<f64>| {
                let y = g.value(id);
                let d = y.mapv(|t| 1.0 - t * t);
                vec![(a, grad * &d)]
            }));
        }
        id
    }

    /// Numerically stable softplus: ln(1 + e^x).
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let value = self
            .nodes[a]
            .value
            .mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        let rg = self.nodes[a].requires_grad;
        self.push(
            value,
            rg,
            rg.then(|| {
                Box::new(move |g: &Graph, grad: &ArrayD<f64>| {
                    let s = g.value(a).mapv(stable_sigmoid);
                    vec![(a, grad * &s)]
                }) as BackwardFn
            }),
        )
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.mapv(f64::sqrt);
        let rg = self.nodes[a].requires_grad;
        let id = self.push(value, rg, None);
        if rg {
            self.nodes[id].backward = Some(Box::new(move |g: &Graph, grad: &ArrayD<f64>| {
                let y = g.value(id);
                let d = y.mapv(|t| if t > 0.0 { 0.5 / t } else { 0.0 });
                vec![(a, grad * &d)]
            }));
        }
        id
    }

    // ----- reductions -----

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total = self.nodes[a].value.sum();
        let rg = self.nodes[a].requires_grad;
        let shape = self.nodes[a].value.raw_dim();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), total),
            rg,
            rg.then(|| {
                Box::new(move |_g: &Graph, grad: &ArrayD<f64>| {
                    let gv = *grad.first().expect("scalar grad");
                    vec![(a, ArrayD::from_elem(shape.clone(), gv))]
                }) as BackwardFn
            }),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    // ----- linear algebra -----

    /// y = a . b for a: (n, k), b: (k, m).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dimensions");
        let value = av.dot(&bv).into_dyn();
        let rg = self.any_grad(&[a, b]);
        self.push(
            value,
            rg,
            rg.then(|| {
                Box::new(move |g: &Graph, grad: &ArrayD<f64>| {
                    let gv = grad.view().into_dimensionality::<Ix2>().unwrap();
                    let av = g.value(a).view().into_dimensionality::<Ix2>().unwrap();
                    let bv = g.value(b).view().into_dimensionality::<Ix2>().unwrap();
                    let da = gv.dot(&bv.t()).into_dyn();
                    let db = av.t().dot(&gv).into_dyn();
                    vec![(a, da), (b, db)]
                }) as BackwardFn
            }),
        )
    }

    /// y = a . b^T for a: (n, k), b: (m, k). Used for pairwise similarity.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.ncols(), bv.ncols(), "matmul_nt inner dimensions");
        let value = av.dot(&bv.t()).into_dyn();
        let rg = self.any_grad(&[a, b]);
        self.push(
            value,
            rg,
            rg.then(|| {
                Box::new(move |g: &Graph, grad: &ArrayD<f64>| {
                    let gv = grad.view().into_dimensionality::<Ix2>().unwrap();
                    let av = g.value(a).view().into_dimensionality::<Ix2>().unwrap();
                    let bv = g.value(b).view().into_dimensionality::<Ix2>().unwrap();
                    let da = gv.dot(&bv).into_dyn();
                    let db = gv.t().dot(&av).into_dyn();
                    vec![(a, da), (b, db)]
                }) as BackwardFn
            }),
        )
    }

    /// Row-broadcast bias add: x (n, m) + b (m).
    pub fn add_bias_rows(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(xv.ncols(), bv.len(), "bias length");
        let value = (&xv + &bv).into_dyn();
        let rg = self.any_grad(&[x, b]);
        self.push(
            value,
            rg,
            rg.then(|| {
                Box::new(move |_g: &Graph, grad: &ArrayD<f64>| {
                    let gv = grad.view().into_dimensionality::<Ix2>().unwrap();
                    let db = gv.sum_axis(Axis(0)).into_dyn();
                    vec![(x, grad.clone()), (b, db)]
                }) as BackwardFn
            }),
        )
    }

    /// L2-normalize each row of a (n, d) matrix.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix2>().unwrap();
        let mut value = xv.to_owned();
        for mut row in value.rows_mut() {
            let norm = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|v| v / norm);
        }
        let rg = self.nodes[x].requires_grad;
        let id = self.push(value.into_dyn(), rg, None);
        if rg {
            self.nodes[id].backward = Some(Box::new(move |g: &Graph, grad: &ArrayD<f64>| {
                let xv = g.value(x).view().into_dimensionality::<Ix2>().unwrap();
                let yv = g
                    .value(id)
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let gv = grad.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = xv.to_owned();
                for (i, mut drow) in dx.rows_mut().into_iter().enumerate() {
                    let xr = xv.row(i);
                    let yr = yv.row(i);
                    let gr = gv.row(i);
                    let norm = xr.dot(&xr).sqrt().max(1e-12);
                    let dot = yr.dot(&gr);
                    for j in 0..drow.len() {
                        drow[j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                vec![(x, dx.into_dyn())]
            }));
        }
        id
    }

    /// Row-wise log-softmax of a (n, m) matrix.
    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix2>().unwrap();
        let mut value = xv.to_owned();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|v| v - lse);
        }
        let rg = self.nodes[x].requires_grad;
        let id = self.push(value.into_dyn(), rg, None);
        if rg {
            self.nodes[id].backward = Some(Box::new(move |g: &Graph, grad: &ArrayD<f64>| {
                let yv = g
                    .value(id)
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let gv = grad.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = gv.to_owned();
                for (i, mut drow) in dx.rows_mut().into_iter().enumerate() {
                    let gsum: f64 = gv.row(i).sum();
                    let yr = yv.row(i);
                    for j in 0..drow.len() {
                        drow[j] -= yr[j].exp() * gsum;
                    }
                }
                vec![(x, dx.into_dyn())]
            }));
        }
        id
    }

    /// Concatenate two matrices along the row axis: (n, d) + (m, d).
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.ncols(), bv.ncols(), "row concat column mismatch");
        let na = av.nrows();
        let value = ndarray::concatenate(Axis(0), &[av.view(), bv.view()])
            .expect("row concat")
            .into_dyn();
        let rg = self.any_grad(&[a, b]);
        self.push(
            value,
            rg,
            rg.then(|| {
                Box::new(move |_g: &Graph, grad: &ArrayD<f64>| {
                    let da = grad.slice_axis(Axis(0), Slice::from(..na)).to_owned();
                    let db = grad.slice_axis(Axis(0), Slice::from(na..)).to_owned();
                    vec![(a, da), (b, db)]
                }) as BackwardFn
            }),
        )
    }

    // ----- image-tensor ops (NCHW) -----

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a].value.view().into_dimensionality::<Ix4>().unwrap();
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix4>().unwrap();
        assert_eq!(av.dim().0, bv.dim().0);
        assert_eq!(av.dim().2, bv.dim().2);
        assert_eq!(av.dim().3, bv.dim().3);
        let ca = av.dim().1;
        let value = ndarray::concatenate(Axis(1), &[av.view(), bv.view()])
            .expect("channel concat")
            .into_dyn();
        let rg = self.any_grad(&[a, b]);
        self.push(
            value,
            rg,
            rg.then(|| {
                Box::new(move |_g: &Graph, grad: &ArrayD<f64>| {
                    let da = grad
                        .slice_axis(Axis(1), Slice::from(..ca))
                        .to_owned();
                    let db = grad
                        .slice_axis(Axis(1), Slice::from(ca..))
                        .to_owned();
                    vec![(a, da), (b, db)]
                }) as BackwardFn
            }),
        )
    }

    /// Per-(sample, channel) normalization to zero mean / unit variance
    /// over the spatial extent. No learned affine.
    pub fn instance_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        let m = (h * w) as f64;
        let mut value = xv.to_owned();
        for ni in 0..n {
            for ci in 0..c {
                let mut plane = value.slice_mut(ndarray::s![ni, ci, .., ..]);
                let mu = plane.sum() / m;
                let var = plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m;
                let s = (var + eps).sqrt();
                plane.mapv_inplace(|v| (v - mu) / s);
            }
        }
        let rg = self.nodes[x].requires_grad;
        let id = self.push(value.into_dyn(), rg, None);
        if rg {
            self.nodes[id].backward = Some(Box::new(move |g: &Graph, grad: &ArrayD<f64>| {
                let xv = g.value(x).view().into_dimensionality::<Ix4>().unwrap();
                let yv = g
                    .value(id)
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap();
                let gv = grad.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w) = xv.dim();
                let m = (h * w) as f64;
                let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let xp = xv.slice(ndarray::s![ni, ci, .., ..]);
                        let yp = yv.slice(ndarray::s![ni, ci, .., ..]);
                        let gp = gv.slice(ndarray::s![ni, ci, .., ..]);
                        let mu = xp.sum() / m;
                        let var = xp.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m;
                        let s = (var + eps).sqrt();
                        let g_mean = gp.sum() / m;
                        let gy_mean = gp
                            .iter()
                            .zip(yp.iter())
                            .map(|(&gi, &yi)| gi * yi)
                            .sum::<f64>()
                            / m;
                        let mut dp = dx.slice_mut(ndarray::s![ni, ci, .., ..]);
                        for hi in 0..h {
                            for wi in 0..w {
                                dp[[hi, wi]] =
                                    (gp[[hi, wi]] - g_mean - yp[[hi, wi]] * gy_mean) / s;
                            }
                        }
                    }
                }
                vec![(x, dx.into_dyn())]
            }));
        }
        id
    }

    /// Global average pool: (n, c, h, w) -> (n, c).
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        let m = (h * w) as f64;
        let mut value = ndarray::Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                value[[ni, ci]] = xv.slice(ndarray::s![ni, ci, .., ..]).sum() / m;
            }
        }
        let rg = self.nodes[x].requires_grad;
        self.push(
            value.into_dyn(),
            rg,
            rg.then(|| {
                Box::new(move |_g: &Graph, grad: &ArrayD<f64>| {
                    let gv = grad.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            dx.slice_mut(ndarray::s![ni, ci, .., ..])
                                .fill(gv[[ni, ci]] / m);
                        }
                    }
                    vec![(x, dx.into_dyn())]
                }) as BackwardFn
            }),
        )
    }

    /// Forward differences along the row (height) axis:
    /// out[..., i, j] = x[..., i+1, j] - x[..., i, j].
    pub fn diff_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        assert!(h >= 2, "diff_rows needs height >= 2");
        let mut value = ndarray::Array4::<f64>::zeros((n, c, h - 1, w));
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h - 1 {
                    for wi in 0..w {
                        value[[ni, ci, hi, wi]] = xv[[ni, ci, hi + 1, wi]] - xv[[ni, ci, hi, wi]];
                    }
                }
            }
        }
        let rg = self.nodes[x].requires_grad;
        self.push(
            value.into_dyn(),
            rg,
            rg.then(|| {
                Box::new(move |_g: &Graph, grad: &ArrayD<f64>| {
                    let gv = grad.view().into_dimensionality::<Ix4>().unwrap();
                    let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            for hi in 0..h - 1 {
                                for wi in 0..w {
                                    let g = gv[[ni, ci, hi, wi]];
                                    dx[[ni, ci, hi + 1, wi]] += g;
                                    dx[[ni, ci, hi, wi]] -= g;
                                }
                            }
                        }
                    }
                    vec![(x, dx.into_dyn())]
                }) as BackwardFn
            }),
        )
    }

    /// Forward differences along the column (width) axis.
    pub fn diff_cols(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        assert!(w >= 2, "diff_cols needs width >= 2");
        let mut value = ndarray::Array4::<f64>::zeros((n, c, h, w - 1));
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w - 1 {
                        value[[ni, ci, hi, wi]] = xv[[ni, ci, hi, wi + 1]] - xv[[ni, ci, hi, wi]];
                    }
                }
            }
        }
        let rg = self.nodes[x].requires_grad;
        self.push(
            value.into_dyn(),
            rg,
            rg.then(|| {
                Box::new(move |_g: &Graph, grad: &ArrayD<f64>| {
                    let gv = grad.view().into_dimensionality::<Ix4>().unwrap();
                    let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            for hi in 0..h {
                                for wi in 0..w - 1 {
                                    let g = gv[[ni, ci, hi, wi]];
                                    dx[[ni, ci, hi, wi + 1]] += g;
                                    dx[[ni, ci, hi, wi]] -= g;
                                }
                            }
                        }
                    }
                    vec![(x, dx.into_dyn())]
                }) as BackwardFn
            }),
        )
    }

    /// 1-D valid correlation with a fixed kernel along the width axis.
    /// The kernel is data, not a parameter; no gradient flows to it.
    pub fn row_filter_valid(&mut self, x: NodeId, kernel: &[f64]) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        let k = kernel.len();
        assert!(k >= 1 && k <= w, "kernel length {k} vs width {w}");
        let wo = w - k + 1;
        let mut value = ndarray::Array4::<f64>::zeros((n, c, h, wo));
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..wo {
                        let mut acc = 0.0;
                        for (t, &kv) in kernel.iter().enumerate() {
                            acc += kv * xv[[ni, ci, hi, wi + t]];
                        }
                        value[[ni, ci, hi, wi]] = acc;
                    }
                }
            }
        }
        let rg = self.nodes[x].requires_grad;
        let kern = kernel.to_vec();
        self.push(
            value.into_dyn(),
            rg,
            rg.then(|| {
                Box::new(move |_g: &Graph, grad: &ArrayD<f64>| {
                    let gv = grad.view().into_dimensionality::<Ix4>().unwrap();
                    let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            for hi in 0..h {
                                for wi in 0..wo {
                                    let g = gv[[ni, ci, hi, wi]];
                                    for (t, &kv) in kern.iter().enumerate() {
                                        dx[[ni, ci, hi, wi + t]] += kv * g;
                                    }
                                }
                            }
                        }
                    }
                    vec![(x, dx.into_dyn())]
                }) as BackwardFn
            }),
        )
    }

    /// 1-D valid correlation with a fixed kernel along the height axis.
    pub fn col_filter_valid(&mut self, x: NodeId, kernel: &[f64]) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        let k = kernel.len();
        assert!(k >= 1 && k <= h, "kernel length {k} vs height {h}");
        let ho = h - k + 1;
        let mut value = ndarray::Array4::<f64>::zeros((n, c, ho, w));
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..ho {
                    for wi in 0..w {
                        let mut acc = 0.0;
                        for (t, &kv) in kernel.iter().enumerate() {
                            acc += kv * xv[[ni, ci, hi + t, wi]];
                        }
                        value[[ni, ci, hi, wi]] = acc;
                    }
                }
            }
        }
        let rg = self.nodes[x].requires_grad;
        let kern = kernel.to_vec();
        self.push(
            value.into_dyn(),
            rg,
            rg.then(|| {
                Box::new(move |_g: &Graph, grad: &ArrayD<f64>| {
                    let gv = grad.view().into_dimensionality::<Ix4>().unwrap();
                    let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            for hi in 0..ho {
                                for wi in 0..w {
                                    let g = gv[[ni, ci, hi, wi]];
                                    for (t, &kv) in kern.iter().enumerate() {
                                        dx[[ni, ci, hi + t, wi]] += kv * g;
                                    }
                                }
                            }
                        }
                    }
                    vec![(x, dx.into_dyn())]
                }) as BackwardFn
            }),
        )
    }

    /// Strided 2-D convolution (cross-correlation) in NCHW layout.
    /// x: (n, c_in, h, w), weight: (c_out, c_in, kh, kw), bias: (c_out).
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[weight].value.view().into_dimensionality::<Ix4>().unwrap();
        let bv = bias.map(|b| {
            self.nodes[b]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned()
        });
        let value = conv::conv2d_forward(&xv, &wv, bv.as_ref(), stride, pad);
        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let rg = self.any_grad(&parents);
        self.push(
            value.into_dyn(),
            rg,
            rg.then(|| {
                Box::new(move |g: &Graph, grad: &ArrayD<f64>| {
                    let xv = g.value(x).view().into_dimensionality::<Ix4>().unwrap();
                    let wv = g.value(weight).view().into_dimensionality::<Ix4>().unwrap();
                    let gv = grad.view().into_dimensionality::<Ix4>().unwrap();
                    let (dx, dw, db) = conv::conv2d_backward(&xv, &wv, &gv, stride, pad);
                    let mut out = vec![(x, dx.into_dyn()), (weight, dw.into_dyn())];
                    if let Some(b) = bias {
                        out.push((b, db.into_dyn()));
                    }
                    out
                }) as BackwardFn
            }),
        )
    }

    /// Strided 2-D transposed convolution in NCHW layout.
    /// x: (n, c_in, h, w), weight: (c_in, c_out, kh, kw), bias: (c_out).
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[weight].value.view().into_dimensionality::<Ix4>().unwrap();
        let bv = bias.map(|b| {
            self.nodes[b]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned()
        });
        let value = conv::conv_transpose2d_forward(&xv, &wv, bv.as_ref(), stride, pad);
        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let rg = self.any_grad(&parents);
        self.push(
            value.into_dyn(),
            rg,
            rg.then(|| {
                Box::new(move |g: &Graph, grad: &ArrayD<f64>| {
                    let xv = g.value(x).view().into_dimensionality::<Ix4>().unwrap();
                    let wv = g.value(weight).view().into_dimensionality::<Ix4>().unwrap();
                    let gv = grad.view().into_dimensionality::<Ix4>().unwrap();
                    let (dx, dw, db) =
                        conv::conv_transpose2d_backward(&xv, &wv, &gv, stride, pad);
                    let mut out = vec![(x, dx.into_dyn()), (weight, dw.into_dyn())];
                    if let Some(b) = bias {
                        out.push((b, db.into_dyn()));
                    }
                    out
                }) as BackwardFn
            }),
        )
    }

    // ----- backprop -----

    /// Backpropagate from a scalar node, returning gradients for every
    /// node on a grad-requiring path.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[loss].value.ndim(),
            0,
            "backward starts from a scalar node"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));
        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(grad) = grads[id].take() else { continue };
            if let Some(backward) = &self.nodes[id].backward {
                for (pid, contrib) in backward(self, &grad) {
                    if !self.nodes[pid].requires_grad {
                        continue;
                    }
                    match &mut grads[pid] {
                        Some(existing) => *existing += &contrib,
                        slot => *slot = Some(contrib),
                    }
                }
                // intermediate gradients are not re-stored; only leaves
                // (parameters and inputs) keep theirs for inspection
            } else {
                grads[id] = Some(grad);
            }
        }
        Gradients { by_node: grads }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// View any node value as 4-D; panics if the node is not 4-D.
pub fn as4<'a>(v: &'a ArrayD<f64>) -> ndarray::ArrayView4<'a, f64> {
    v.view().into_dimensionality::<Ix4>().unwrap()
}

/// View any node value as 2-D; panics if the node is not 2-D.
pub fn as2<'a>(v: &'a ArrayD<f64>) -> ndarray::ArrayView2<'a, f64> {
    v.view().into_dimensionality::<Ix2>().unwrap()
}

/// Central finite-difference gradient of a scalar-valued function of one
/// dyn-array input. Used by tests as the independent oracle for analytic
/// gradients.
pub fn finite_difference_grad<F>(input: &ArrayD<f64>, step: f64, mut f: F) -> ArrayD<f64>
where
    F: FnMut(ArrayViewD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(input.raw_dim());
    let mut probe = input.clone();
    let n = input.len();
    for i in 0..n {
        let orig = probe.as_slice_mut().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + step;
        let hi = f(probe.view());
        probe.as_slice_mut().unwrap()[i] = orig - step;
        let lo = f(probe.view());
        probe.as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Fraction of coordinates where `analytic` and `numeric` agree within
/// `rel_tol` relative error (absolute below `abs_floor` counts as agreement).
pub fn grad_agreement(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, rel_tol: f64, abs_floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let n = analytic.len();
    if n == 0 {
        return 1.0;
    }
    let mut ok = 0usize;
    for (a, b) in analytic.iter().zip(numeric.iter()) {
        let denom = a.abs().max(b.abs());
        if denom < abs_floor || (a - b).abs() / denom < rel_tol {
            ok += 1;
        }
    }
    ok as f64 / n as f64
}
