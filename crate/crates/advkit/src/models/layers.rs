//! Layer primitives for the desk-scale convolutional networks.
//!
//! Feature maps are `(C, H, W)` arrays of `f64`. Convolutions use im2col
//! plus a matrix multiply; backward passes recompute the column matrix
//! rather than caching it. Reductions run in a fixed serial order so every
//! result is bit-reproducible regardless of thread count.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

/// One convolution's parameters. `w` has shape `(out_c, in_c·k·k)`, matching
/// the im2col layout. Kernels are square with "same" padding of `k/2`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvParams {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvParams {
    /// He-initialized weights, zero biases. Weight draw order is row-major
    /// over `w`, which pins the RNG stream layout.
    pub fn init<R: Rng>(in_c: usize, out_c: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = Array2::from_shape_fn((out_c, in_c * k * k), |_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        });
        let b = Array1::zeros(out_c);
        Self {
            w,
            b,
            in_c,
            out_c,
            k,
            stride,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.k / 2;
        (
            (h + 2 * pad - self.k) / self.stride + 1,
            (w + 2 * pad - self.k) / self.stride + 1,
        )
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

fn im2col(x: &Array3<f64>, k: usize, stride: usize) -> (Array2<f64>, usize, usize) {
    let (c, h, w) = x.dim();
    let pad = (k / 2) as isize;
    let ho = (h + 2 * (k / 2) - k) / stride + 1;
    let wo = (w + 2 * (k / 2) - k) / stride + 1;
    let mut cols = Array2::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for di in 0..k {
            for dj in 0..k {
                let row = (ci * k + di) * k + dj;
                for oi in 0..ho {
                    let ii = (oi * stride + di) as isize - pad;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + dj) as isize - pad;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[(row, oi * wo + oj)] = x[(ci, ii as usize, jj as usize)];
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im(
    dcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> Array3<f64> {
    let pad = (k / 2) as isize;
    let ho = (h + 2 * (k / 2) - k) / stride + 1;
    let wo = (w + 2 * (k / 2) - k) / stride + 1;
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for di in 0..k {
            for dj in 0..k {
                let row = (ci * k + di) * k + dj;
                for oi in 0..ho {
                    let ii = (oi * stride + di) as isize - pad;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + dj) as isize - pad;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dx[(ci, ii as usize, jj as usize)] += dcols[(row, oi * wo + oj)];
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn conv_forward(p: &ConvParams, x: &Array3<f64>) -> Array3<f64> {
    let (cols, ho, wo) = im2col(x, p.k, p.stride);
    debug_assert_eq!((ho, wo), p.out_hw(x.dim().1, x.dim().2));
    let mut y = p.w.dot(&cols);
    for (mut row, &bi) in y.outer_iter_mut().zip(p.b.iter()) {
        row += bi;
    }
    y.into_shape_with_order((p.out_c, ho, wo))
        .expect("matmul output is contiguous")
}

pub(crate) struct ConvGrad {
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
}

/// Returns the input gradient and the parameter gradients for one conv,
/// given the forward input `x` and the output gradient `dy`.
pub(crate) fn conv_backward(
    p: &ConvParams,
    x: &Array3<f64>,
    dy: &Array3<f64>,
) -> (Array3<f64>, ConvGrad) {
    let (c, h, w) = x.dim();
    let (out_c, ho, wo) = dy.dim();
    let (cols, _, _) = im2col(x, p.k, p.stride);
    let dy_mat = dy
        .to_owned()
        .into_shape_with_order((out_c, ho * wo))
        .expect("dy is contiguous");
    let dw = dy_mat.dot(&cols.t());
    let db = dy_mat.sum_axis(Axis(1));
    let dcols = p.w.t().dot(&dy_mat);
    let dx = col2im(&dcols, c, h, w, p.k, p.stride);
    (dx, ConvGrad { dw, db })
}

/// ReLU. Returns the activation and a 0/1 mask; the derivative at exactly
/// zero is taken as zero.
pub(crate) fn relu_forward(x: &Array3<f64>) -> (Array3<f64>, Array3<f64>) {
    let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    (x * &mask, mask)
}

/// 2×2 max pooling with stride 2; trailing odd rows/columns are dropped.
/// Ties keep the first maximum in (0,0),(0,1),(1,0),(1,1) scan order, and
/// the gradient routes to that element alone.
pub(crate) fn maxpool2_forward(x: &Array3<f64>) -> (Array3<f64>, Vec<u8>) {
    let (c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Array3::zeros((c, ho, wo));
    let mut arg = vec![0u8; c * ho * wo];
    for ci in 0..c {
        for oi in 0..ho {
            for oj in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut bidx = 0u8;
                for (t, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let v = x[(ci, 2 * oi + di, 2 * oj + dj)];
                    if v > best {
                        best = v;
                        bidx = t as u8;
                    }
                }
                y[(ci, oi, oj)] = best;
                arg[(ci * ho + oi) * wo + oj] = bidx;
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool2_backward(
    dy: &Array3<f64>,
    arg: &[u8],
    in_dim: (usize, usize, usize),
) -> Array3<f64> {
    let (c, h, w) = in_dim;
    let (_, ho, wo) = dy.dim();
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for oi in 0..ho {
            for oj in 0..wo {
                let t = arg[(ci * ho + oi) * wo + oj] as usize;
                let (di, dj) = [(0, 0), (0, 1), (1, 0), (1, 1)][t];
                dx[(ci, 2 * oi + di, 2 * oj + dj)] += dy[(ci, oi, oj)];
            }
        }
    }
    dx
}

/// Global average pooling over the spatial axes: `(C, H, W)` to `(C,)`.
pub(crate) fn gap_forward(x: &Array3<f64>) -> Array1<f64> {
    let (c, h, w) = x.dim();
    let n = (h * w) as f64;
    let mut y = Array1::zeros(c);
    for ci in 0..c {
        let mut acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                acc += x[(ci, i, j)];
            }
        }
        y[ci] = acc / n;
    }
    y
}

pub(crate) fn gap_backward(dy: &Array1<f64>, in_dim: (usize, usize, usize)) -> Array3<f64> {
    let (c, h, w) = in_dim;
    let n = (h * w) as f64;
    Array3::from_shape_fn((c, h, w), |(ci, _, _)| dy[ci] / n)
}

pub(crate) fn dense_forward(w: &Array2<f64>, b: &Array1<f64>, x: &Array1<f64>) -> Array1<f64> {
    w.dot(x) + b
}

pub(crate) struct DenseGrad {
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
}

pub(crate) fn dense_backward(
    w: &Array2<f64>,
    x: &Array1<f64>,
    dy: &Array1<f64>,
) -> (Array1<f64>, DenseGrad) {
    let dw = dy
        .view()
        .insert_axis(Axis(1))
        .dot(&x.view().insert_axis(Axis(0)));
    let db = dy.clone();
    let dx = w.t().dot(dy);
    (dx, DenseGrad { dw, db })
}

/// Two 3×3 convolutions with a shortcut. The shortcut is the identity when
/// stride is 1 and channel counts match, otherwise a 1×1 projection.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ResBlock {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub proj: Option<ConvParams>,
}

impl ResBlock {
    pub fn init<R: Rng>(in_c: usize, out_c: usize, stride: usize, rng: &mut R) -> Self {
        let conv1 = ConvParams::init(in_c, out_c, 3, stride, rng);
        let conv2 = ConvParams::init(out_c, out_c, 3, 1, rng);
        let proj = if stride != 1 || in_c != out_c {
            Some(ConvParams::init(in_c, out_c, 1, stride, rng))
        } else {
            None
        };
        Self { conv1, conv2, proj }
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.conv2.param_count()
            + self.proj.as_ref().map_or(0, |p| p.param_count())
    }
}

pub(crate) struct ResCache {
    pub x: Array3<f64>,
    pub mask1: Array3<f64>,
    pub h1: Array3<f64>,
    pub out_mask: Array3<f64>,
}

pub(crate) fn res_forward(rb: &ResBlock, x: &Array3<f64>) -> (Array3<f64>, ResCache) {
    let a1 = conv_forward(&rb.conv1, x);
    let (h1, mask1) = relu_forward(&a1);
    let a2 = conv_forward(&rb.conv2, &h1);
    let sc = match &rb.proj {
        Some(p) => conv_forward(p, x),
        None => x.clone(),
    };
    let s = a2 + sc;
    let (y, out_mask) = relu_forward(&s);
    (
        y,
        ResCache {
            x: x.clone(),
            mask1,
            h1,
            out_mask,
        },
    )
}

pub(crate) struct ResGrad {
    pub conv1: ConvGrad,
    pub conv2: ConvGrad,
    pub proj: Option<ConvGrad>,
}

pub(crate) fn res_backward(rb: &ResBlock, cache: &ResCache, dy: &Array3<f64>) -> (Array3<f64>, ResGrad) {
    let ds = dy * &cache.out_mask;
    let (dh1, g2) = conv_backward(&rb.conv2, &cache.h1, &ds);
    let da1 = dh1 * &cache.mask1;
    let (dx_main, g1) = conv_backward(&rb.conv1, &cache.x, &da1);
    let (dx_short, gp) = match &rb.proj {
        Some(p) => {
            let (dxp, g) = conv_backward(p, &cache.x, &ds);
            (dxp, Some(g))
        }
        None => (ds, None),
    };
    (
        dx_main + dx_short,
        ResGrad {
            conv1: g1,
            conv2: g2,
            proj: gp,
        },
    )
}

/// One step of the network, with featuremap tap and head included.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layer {
    Conv(ConvParams),
    Relu,
    MaxPool2,
    Res(ResBlock),
    /// Marker: the map flowing past this point is the network's featuremap.
    FeatureTap,
    GlobalAvgPool,
    Dense { w: Array2<f64>, b: Array1<f64> },
}

/// Per-layer forward state needed by the backward pass.
pub(crate) enum Cache {
    Conv { x: Array3<f64> },
    Relu { mask: Array3<f64> },
    MaxPool { in_dim: (usize, usize, usize), arg: Vec<u8> },
    Res(Box<ResCache>),
    Tap,
    Gap { in_dim: (usize, usize, usize) },
    Dense { x: Array1<f64> },
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0))
    }

    fn conv_naive(p: &ConvParams, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let pad = (p.k / 2) as isize;
        let (ho, wo) = p.out_hw(h, w);
        let mut y = Array3::zeros((p.out_c, ho, wo));
        for o in 0..p.out_c {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = p.b[o];
                    for ci in 0..c {
                        for di in 0..p.k {
                            for dj in 0..p.k {
                                let ii = (oi * p.stride + di) as isize - pad;
                                let jj = (oj * p.stride + dj) as isize - pad;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                    continue;
                                }
                                acc += p.w[(o, (ci * p.k + di) * p.k + dj)]
                                    * x[(ci, ii as usize, jj as usize)];
                            }
                        }
                    }
                    y[(o, oi, oj)] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (k, stride) in [(3, 1), (3, 2), (1, 1), (1, 2)] {
            let p = ConvParams::init(3, 5, k, stride, &mut rng);
            let x = rand_map(&mut rng, 3, 9, 8);
            let fast = conv_forward(&p, &x);
            let slow = conv_naive(&p, &x);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // With zero bias the conv is linear, so <dy, conv(x)> must equal
        // <conv_backward_dx(dy), x> up to rounding.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (k, stride) in [(3, 1), (3, 2), (1, 2)] {
            let mut p = ConvParams::init(4, 6, k, stride, &mut rng);
            p.b.fill(0.0);
            let x = rand_map(&mut rng, 4, 8, 8);
            let y = conv_forward(&p, &x);
            let dy = rand_map(&mut rng, y.dim().0, y.dim().1, y.dim().2);
            let (dx, _) = conv_backward(&p, &x, &dy);
            let lhs: f64 = y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(dx.iter()).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0),
                "k={k} s={stride}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn conv_weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = ConvParams::init(2, 3, 3, 1, &mut rng);
        let x = rand_map(&mut rng, 2, 6, 6);
        let y = conv_forward(&p, &x);
        let dy = Array3::ones(y.dim());
        let (_, g) = conv_backward(&p, &x, &dy);
        let h = 1e-6;
        for &(r, c) in &[(0usize, 0usize), (1, 7), (2, 17), (0, 9)] {
            let mut pp = p.clone();
            pp.w[(r, c)] += h;
            let up: f64 = conv_forward(&pp, &x).iter().sum();
            pp.w[(r, c)] -= 2.0 * h;
            let dn: f64 = conv_forward(&pp, &x).iter().sum();
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (fd - g.dw[(r, c)]).abs() < 1e-6,
                "dw[{r},{c}]: fd {fd} vs {}",
                g.dw[(r, c)]
            );
        }
        for o in 0..3 {
            let mut pp = p.clone();
            pp.b[o] += h;
            let up: f64 = conv_forward(&pp, &x).iter().sum();
            pp.b[o] -= 2.0 * h;
            let dn: f64 = conv_forward(&pp, &x).iter().sum();
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g.db[o]).abs() < 1e-6);
        }
    }

    #[test]
    fn maxpool_ties_take_first_in_scan_order() {
        let mut x = Array3::zeros((1, 2, 2));
        x.fill(5.0);
        let (y, arg) = maxpool2_forward(&x);
        assert_eq!(y[(0, 0, 0)], 5.0);
        assert_eq!(arg[0], 0);

        let mut x2 = Array3::zeros((1, 2, 2));
        x2[(0, 0, 1)] = 7.0;
        x2[(0, 1, 0)] = 7.0;
        let (_, arg2) = maxpool2_forward(&x2);
        assert_eq!(arg2[0], 1);
    }

    #[test]
    fn maxpool_backward_routes_to_argmax_only() {
        let mut x = Array3::zeros((1, 4, 4));
        x[(0, 1, 0)] = 3.0;
        x[(0, 2, 3)] = 4.0;
        let (y, arg) = maxpool2_forward(&x);
        assert_eq!(y.dim(), (1, 2, 2));
        let mut dy = Array3::zeros((1, 2, 2));
        dy.fill(1.0);
        let dx = maxpool2_backward(&dy, &arg, (1, 4, 4));
        assert_eq!(dx[(0, 1, 0)], 1.0);
        assert_eq!(dx[(0, 2, 3)], 1.0);
        let total: f64 = dx.iter().sum();
        assert_eq!(total, 4.0);
    }

    #[test]
    fn maxpool_drops_trailing_odd_row_and_column() {
        let x = Array3::from_shape_fn((2, 5, 7), |(c, i, j)| (c * 100 + i * 10 + j) as f64);
        let (y, _) = maxpool2_forward(&x);
        assert_eq!(y.dim(), (2, 2, 3));
    }

    #[test]
    fn relu_zero_input_has_zero_gradient() {
        let mut x = Array3::zeros((1, 2, 2));
        x[(0, 0, 0)] = -1.0;
        x[(0, 0, 1)] = 0.0;
        x[(0, 1, 0)] = 2.0;
        let (y, mask) = relu_forward(&x);
        assert_eq!(y[(0, 0, 0)], 0.0);
        assert_eq!(mask[(0, 0, 1)], 0.0);
        assert_eq!(mask[(0, 1, 0)], 1.0);
    }

    #[test]
    fn gap_roundtrip_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_map(&mut rng, 3, 4, 4);
        let y = gap_forward(&x);
        assert_eq!(y.len(), 3);
        let dy = Array1::from_vec(vec![1.0, 2.0, 3.0]);
        let dx = gap_backward(&dy, (3, 4, 4));
        assert_eq!(dx[(0, 0, 0)], 1.0 / 16.0);
        assert_eq!(dx[(2, 3, 3)], 3.0 / 16.0);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let w = Array2::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
        let b = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let x = Array1::from_shape_fn(6, |_| rng.random_range(-1.0..1.0));
        let dy = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let (dx, g) = dense_backward(&w, &x, &dy);
        let loss = |w: &Array2<f64>, x: &Array1<f64>| -> f64 {
            dense_forward(w, &b, x)
                .iter()
                .zip(dy.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-6;
        for i in 0..6 {
            let mut xp = x.clone();
            xp[i] += h;
            let up = loss(&w, &xp);
            xp[i] -= 2.0 * h;
            let dn = loss(&w, &xp);
            assert!(((up - dn) / (2.0 * h) - dx[i]).abs() < 1e-6);
        }
        for r in 0..4 {
            for c in 0..6 {
                let mut wp = w.clone();
                wp[(r, c)] += h;
                let up = loss(&wp, &x);
                wp[(r, c)] -= 2.0 * h;
                let dn = loss(&wp, &x);
                assert!(((up - dn) / (2.0 * h) - g.dw[(r, c)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn res_block_shapes_and_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for (in_c, out_c, stride) in [(4, 4, 1), (4, 8, 2)] {
            let rb = ResBlock::init(in_c, out_c, stride, &mut rng);
            assert_eq!(rb.proj.is_some(), stride != 1 || in_c != out_c);
            let x = rand_map(&mut rng, in_c, 8, 8);
            let (y, cache) = res_forward(&rb, &x);
            assert_eq!(y.dim(), (out_c, 8 / stride, 8 / stride));

            // FD check of the scalar sum(res(x)) against the backward pass.
            let dy = Array3::ones(y.dim());
            let (dx, _) = res_backward(&rb, &cache, &dy);
            let h = 1e-6;
            for &(ci, i, j) in &[(0usize, 0usize, 0usize), (1, 3, 5), (in_c - 1, 7, 7)] {
                let mut xp = x.clone();
                xp[(ci, i, j)] += h;
                let up: f64 = res_forward(&rb, &xp).0.iter().sum();
                xp[(ci, i, j)] -= 2.0 * h;
                let dn: f64 = res_forward(&rb, &xp).0.iter().sum();
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (fd - dx[(ci, i, j)]).abs() < 1e-5,
                    "stride {stride} ({ci},{i},{j}): {fd} vs {}",
                    dx[(ci, i, j)]
                );
            }
        }
    }
}
