//! 2-D and 3-D convolutions, channels innermost, lowered to GEMM via im2col.
//!
//! Padding follows the "same" rule: a stride-`s` convolution maps an extent
//! `n` to `ceil(n / s)`, with the total padding split so the smaller half
//! sits before the data. A transposed convolution with stride `s` maps `n` to
//! `n * s` and is the exact adjoint of the forward convolution that maps
//! `n * s` back to `n` with the same weights.
//!
//! Forward weights are laid out `[kd, kh, kw, Cin, Cout]` (2-D drops `kd`).
//! Transposed weights are `[kd, kh, kw, Cout, Cin]`, i.e. the weights of the
//! forward convolution they are the adjoint of.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Kernel geometry of a convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    /// Kernel extents over (depth, height, width). Depth is 1 for 2-D.
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub out_channels: usize,
    pub transposed: bool,
}

impl ConvSpec {
    pub fn conv2d(kernel: usize, stride: usize, out_channels: usize) -> Self {
        ConvSpec {
            kernel: [1, kernel, kernel],
            stride: [1, stride, stride],
            out_channels,
            transposed: false,
        }
    }

    pub fn conv3d(kernel: usize, stride: usize, out_channels: usize) -> Self {
        ConvSpec {
            kernel: [kernel; 3],
            stride: [stride; 3],
            out_channels,
            transposed: false,
        }
    }

    pub fn conv3d_transposed(kernel: usize, stride: usize, out_channels: usize) -> Self {
        ConvSpec {
            transposed: true,
            ..Self::conv3d(kernel, stride, out_channels)
        }
    }

    pub fn is_2d(&self) -> bool {
        self.kernel[0] == 1 && self.stride[0] == 1
    }

    /// Number of kernel taps.
    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Expected weight shape for `in_channels` input channels on a grid with
    /// `spatial_dims` (2 or 3) spatial axes.
    pub fn weight_shape(&self, in_channels: usize, spatial_dims: usize) -> Vec<usize> {
        let (a, b) = if self.transposed {
            (self.out_channels, in_channels)
        } else {
            (in_channels, self.out_channels)
        };
        if spatial_dims == 2 {
            vec![self.kernel[1], self.kernel[2], a, b]
        } else {
            vec![self.kernel[0], self.kernel[1], self.kernel[2], a, b]
        }
    }

    /// Learnable scalars in weights plus bias.
    pub fn param_count(&self, in_channels: usize) -> usize {
        self.taps() * in_channels * self.out_channels + self.out_channels
    }

    /// Output spatial extents for the given input extents.
    pub fn output_extents(&self, input: [usize; 3]) -> [usize; 3] {
        std::array::from_fn(|a| {
            if self.transposed {
                input[a] * self.stride[a]
            } else {
                input[a].div_ceil(self.stride[a])
            }
        })
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.stride.contains(&0) {
            return Err(Error::invalid(op, "strides must be >= 1"));
        }
        if self.kernel.contains(&0) || self.out_channels == 0 {
            return Err(Error::invalid(op, "kernel extents and output channels must be >= 1"));
        }
        Ok(())
    }
}

/// Resolved geometry of a forward convolution from the large grid (`big`) to
/// the small grid (`small`). A transposed convolution runs it in reverse.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub big: [usize; 3],
    pub small: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    /// Channels on the big grid.
    pub big_ch: usize,
    /// Channels on the small grid.
    pub small_ch: usize,
}

impl Geometry {
    fn new(big: [usize; 3], small: [usize; 3], spec: &ConvSpec, big_ch: usize, small_ch: usize) -> Self {
        let pad = std::array::from_fn(|a| {
            let needed = (small[a] - 1) * spec.stride[a] + spec.kernel[a];
            needed.saturating_sub(big[a]) / 2
        });
        Geometry {
            big,
            small,
            kernel: spec.kernel,
            stride: spec.stride,
            pad,
            big_ch,
            small_ch,
        }
    }

    fn row_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.big_ch
    }

    fn small_sites(&self) -> usize {
        self.small.iter().product()
    }

    fn big_sites(&self) -> usize {
        self.big.iter().product()
    }

    /// Number of small-grid sites processed per GEMM.
    fn chunk(&self) -> usize {
        const TARGET: usize = 1 << 18;
        (TARGET / self.row_len().max(1)).max(16)
    }

    fn chunks(&self) -> impl Iterator<Item = Range<usize>> {
        let n = self.small_sites();
        let step = self.chunk();
        (0..n).step_by(step).map(move |s| s..(s + step).min(n))
    }

    /// Calls `f(row_offset, big_offset)` for every in-bounds kernel tap of
    /// every small-grid site in `sites`; out-of-bounds taps are skipped.
    #[inline]
    fn for_each_tap(&self, sites: Range<usize>, mut f: impl FnMut(usize, Option<usize>)) {
        let [_, sh, sw] = self.small;
        let [bd, bh, bw] = self.big;
        let [kd, kh, kw] = self.kernel;
        let ch = self.big_ch;
        for (r, site) in sites.enumerate() {
            let od = site / (sh * sw);
            let oh = (site / sw) % sh;
            let ow = site % sw;
            let mut col = r * self.row_len();
            for a in 0..kd {
                let id = (od * self.stride[0] + a) as isize - self.pad[0] as isize;
                let din = id >= 0 && (id as usize) < bd;
                for b in 0..kh {
                    let ih = (oh * self.stride[1] + b) as isize - self.pad[1] as isize;
                    let hin = din && ih >= 0 && (ih as usize) < bh;
                    for c in 0..kw {
                        let iw = (ow * self.stride[2] + c) as isize - self.pad[2] as isize;
                        if hin && iw >= 0 && (iw as usize) < bw {
                            let src = ((id as usize * bh + ih as usize) * bw + iw as usize) * ch;
                            f(col, Some(src));
                        } else {
                            f(col, None);
                        }
                        col += ch;
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, big: &[T], sites: Range<usize>, cols: &mut [T]) {
        let ch = self.big_ch;
        self.for_each_tap(sites, |col, src| match src {
            Some(s) => cols[col..col + ch].copy_from_slice(&big[s..s + ch]),
            None => cols[col..col + ch].fill(T::zero()),
        });
    }

    fn col2im<T: Scalar>(&self, cols: &[T], sites: Range<usize>, big: &mut [T]) {
        let ch = self.big_ch;
        self.for_each_tap(sites, |col, src| {
            if let Some(s) = src {
                for (d, &v) in big[s..s + ch].iter_mut().zip(&cols[col..col + ch]) {
                    *d += v;
                }
            }
        });
    }
}

fn spatial(op: &'static str, shape: &[usize], two_d: bool) -> Result<([usize; 3], usize)> {
    match (two_d, shape) {
        (true, &[h, w, c]) => Ok(([1, h, w], c)),
        (false, &[d, h, w, c]) => Ok(([d, h, w], c)),
        _ => Err(Error::shape(
            op,
            "input rank",
            if two_d { "3 (H,W,C)" } else { "4 (D,H,W,C)" },
            format!("{} {shape:?}", shape.len()),
        )),
    }
}

fn check_params<T: Scalar>(
    op: &'static str,
    spec: &ConvSpec,
    in_channels: usize,
    spatial_dims: usize,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<()> {
    spec.validate(op)?;
    let expected = spec.weight_shape(in_channels, spatial_dims);
    if weights.shape() != expected.as_slice() {
        // Report the first offending axis.
        let axis = if weights.rank() != expected.len() {
            "weight rank".to_string()
        } else {
            let i = (0..expected.len()).find(|&i| weights.shape()[i] != expected[i]).unwrap_or(0);
            let names: &[&str] = match (expected.len(), spec.transposed) {
                (4, false) => &["kh", "kw", "Cin", "Cout"],
                (4, true) => &["kh", "kw", "Cout", "Cin"],
                (_, false) => &["kd", "kh", "kw", "Cin", "Cout"],
                (_, true) => &["kd", "kh", "kw", "Cout", "Cin"],
            };
            format!("weight axis {i} ({})", names[i])
        };
        return Err(Error::shape(
            op,
            axis,
            format!("{expected:?}"),
            format!("{:?}", weights.shape()),
        ));
    }
    if bias.shape() != [spec.out_channels] {
        return Err(Error::shape(
            op,
            "bias",
            format!("[{}]", spec.out_channels),
            format!("{:?}", bias.shape()),
        ));
    }
    Ok(())
}

/// Planned convolution: the geometry plus the output tensor shape.
#[derive(Clone, Debug)]
pub(crate) struct ConvPlan {
    pub geom: Geometry,
    pub out_shape: Vec<usize>,
    pub transposed: bool,
}

pub(crate) fn plan<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    out_extents: Option<[usize; 3]>,
) -> Result<ConvPlan> {
    let two_d = input.rank() == 3;
    if two_d && !spec.is_2d() {
        return Err(Error::invalid(op, "2-D input needs a kernel and stride of 1 along depth"));
    }
    let (ext, cin) = spatial(op, input.shape(), two_d)?;
    check_params(op, spec, cin, if two_d { 2 } else { 3 }, weights, bias)?;
    let out = match out_extents {
        None => spec.output_extents(ext),
        Some(out) => {
            if !spec.transposed {
                return Err(Error::invalid(op, "explicit output extents only apply to transposed convs"));
            }
            for a in 0..3 {
                if out[a].div_ceil(spec.stride[a]) != ext[a] {
                    return Err(Error::shape(
                        op,
                        format!("output spatial axis {a}"),
                        format!("extent e with ceil(e/{}) = {}", spec.stride[a], ext[a]),
                        out[a],
                    ));
                }
            }
            out
        }
    };
    let geom = if spec.transposed {
        Geometry::new(out, ext, spec, spec.out_channels, cin)
    } else {
        Geometry::new(ext, out, spec, cin, spec.out_channels)
    };
    let mut out_shape: Vec<usize> = if two_d { out[1..].to_vec() } else { out.to_vec() };
    out_shape.push(spec.out_channels);
    Ok(ConvPlan {
        geom,
        out_shape,
        transposed: spec.transposed,
    })
}

fn broadcast_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        row.copy_from_slice(bias);
    }
}

fn bias_grad<T: Scalar>(dy: &[T], channels: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for row in dy.chunks_exact(channels) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    db
}

/// Large grid → small grid.
fn forward_conv<T: Scalar>(g: &Geometry, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let (kc, co) = (g.row_len(), g.small_ch);
    let mut out = vec![T::zero(); g.small_sites() * co];
    broadcast_bias(&mut out, bias);
    let mut cols = vec![T::zero(); g.chunk() * kc];
    for sites in g.chunks() {
        let n = sites.len();
        g.im2col(x, sites.clone(), &mut cols[..n * kc]);
        let dst = &mut out[sites.start * co..sites.end * co];
        T::gemm(n, kc, co, T::one(), (&cols, kc, 1), (w, co, 1), T::one(), (dst, co, 1));
    }
    out
}

/// Small grid → large grid (adjoint of [`forward_conv`] without bias).
fn transposed_conv<T: Scalar>(g: &Geometry, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let (kc, ci) = (g.row_len(), g.small_ch);
    let mut out = vec![T::zero(); g.big_sites() * g.big_ch];
    broadcast_bias(&mut out, bias);
    let mut cols = vec![T::zero(); g.chunk() * kc];
    for sites in g.chunks() {
        let n = sites.len();
        let src = &x[sites.start * ci..sites.end * ci];
        T::gemm(n, ci, kc, T::one(), (src, ci, 1), (w, 1, ci), T::zero(), (&mut cols[..n * kc], kc, 1));
        g.col2im(&cols[..n * kc], sites, &mut out);
    }
    out
}

/// Gradient of the large-grid tensor given the small-grid gradient.
fn grad_big<T: Scalar>(g: &Geometry, w: &[T], d_small: &[T]) -> Vec<T> {
    transposed_conv(g, d_small, w, &vec![T::zero(); g.big_ch])
}

/// Gradient of the small-grid tensor given the large-grid gradient.
fn grad_small<T: Scalar>(g: &Geometry, w: &[T], d_big: &[T]) -> Vec<T> {
    forward_conv(g, d_big, w, &vec![T::zero(); g.small_ch])
}

/// Weight gradient `[K*big_ch, small_ch]` from the large-grid and small-grid tensors.
fn grad_weights<T: Scalar>(g: &Geometry, big: &[T], small: &[T]) -> Vec<T> {
    let (kc, cs) = (g.row_len(), g.small_ch);
    let mut dw = vec![T::zero(); kc * cs];
    let mut cols = vec![T::zero(); g.chunk() * kc];
    for sites in g.chunks() {
        let n = sites.len();
        g.im2col(big, sites.clone(), &mut cols[..n * kc]);
        let ds = &small[sites.start * cs..sites.end * cs];
        T::gemm(kc, n, cs, T::one(), (&cols, 1, kc), (ds, cs, 1), T::one(), (&mut dw, cs, 1));
    }
    dw
}

pub(crate) fn run<T: Scalar>(p: &ConvPlan, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = if p.transposed {
        transposed_conv(&p.geom, x.data(), w.data(), b.data())
    } else {
        forward_conv(&p.geom, x.data(), w.data(), b.data())
    };
    Tensor::new(&p.out_shape, data).expect("planned shape")
}

/// Gradients of a planned convolution w.r.t. input (when `need_input`),
/// weights and bias.
pub(crate) fn backward<T: Scalar>(
    p: &ConvPlan,
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let g = &p.geom;
    let (dx, dw, db) = if p.transposed {
        (
            need_input.then(|| grad_small(g, w.data(), dy.data())),
            grad_weights(g, dy.data(), x.data()),
            bias_grad(dy.data(), g.big_ch),
        )
    } else {
        (
            need_input.then(|| grad_big(g, w.data(), dy.data())),
            grad_weights(g, x.data(), dy.data()),
            bias_grad(dy.data(), g.small_ch),
        )
    };
    (
        dx.map(|dx| Tensor::new(x.shape(), dx).expect("input shape")),
        Tensor::new(w.shape(), dw).expect("weight shape"),
        Tensor::new(&[db.len()], db).expect("bias shape"),
    )
}

/// Zero-padded 2-D cross-correlation of an `[H, W, Cin]` image.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() != 3 {
        return Err(Error::shape("conv2d", "input rank", "3 (H,W,C)", input.rank()));
    }
    let p = plan("conv2d", input, spec, weights, bias, None)?;
    Ok(run(&p, input, weights, bias))
}

/// Zero-padded 3-D cross-correlation of a `[D, H, W, Cin]` volume.
pub fn conv3d<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() != 4 {
        return Err(Error::shape("conv3d", "input rank", "4 (D,H,W,C)", input.rank()));
    }
    if spec.transposed {
        return Err(Error::invalid("conv3d", "spec is transposed; use conv3d_transposed"));
    }
    let p = plan("conv3d", input, spec, weights, bias, None)?;
    Ok(run(&p, input, weights, bias))
}

/// 3-D transposed convolution; each spatial extent is multiplied by the stride.
pub fn conv3d_transposed<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    conv3d_transposed_to(input, spec, weights, bias, None)
}

/// Like [`conv3d_transposed`] with explicit output extents, which must map
/// back onto the input extents under the forward `ceil(n / s)` rule.
pub fn conv3d_transposed_to<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    out_extents: Option<[usize; 3]>,
) -> Result<Tensor<T>> {
    if !spec.transposed {
        return Err(Error::invalid("conv3d_transposed", "spec must have the transposed flag set"));
    }
    if input.rank() != 4 {
        return Err(Error::shape("conv3d_transposed", "input rank", "4 (D,H,W,C)", input.rank()));
    }
    let p = plan("conv3d_transposed", input, spec, weights, bias, out_extents)?;
    Ok(run(&p, input, weights, bias))
}
