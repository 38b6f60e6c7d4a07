//! Grouped, dilated 2-D cross-correlation via im2col.

use rayon::prelude::*;

use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
}

/// `floor((input + 2·pad − dilation·(kernel − 1) − 1) / stride) + 1`, or an
/// error when that is not positive.
pub fn conv_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Result<usize> {
    if stride == 0 || dilation == 0 || kernel == 0 {
        return Err(Error::InvalidArgument(
            "stride, dilation and kernel size must be positive".into(),
        ));
    }
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * pad;
    if padded < span {
        return Err(Error::InvalidArgument(format!(
            "non-positive conv output size: input {input}, pad {pad}, kernel {kernel}, dilation {dilation}"
        )));
    }
    Ok((padded - span) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    groups: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn geometry(x: &[usize], w: &[usize], spec: &Conv2dSpec) -> Result<Geometry> {
    let (&[batch, cin, h, wd], &[cout, cin_g, kh, kw]) = (x, w) else {
        return Err(Error::shape("conv2d", x, w));
    };
    let g = spec.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 {
        return Err(Error::InvalidArgument(format!(
            "conv2d: channels in {cin} / out {cout} not divisible by groups {g}"
        )));
    }
    if cin / g != cin_g {
        return Err(Error::shape("conv2d weight", x, w));
    }
    let ho = conv_output_size(h, kh, spec.stride.0, spec.padding.0, spec.dilation.0)?;
    let wo = conv_output_size(wd, kw, spec.stride.1, spec.padding.1, spec.dilation.1)?;
    Ok(Geometry {
        batch,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        ho,
        wo,
        groups: g,
    })
}

/// Fills `col[rows, ho·wo]` for one image and one channel group.
fn im2col<T: Real>(img: &[T], geo: &Geometry, spec: &Conv2dSpec, group: usize, col: &mut [T]) {
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let cols = geo.cols();
    let mut r = 0;
    for ci in 0..geo.cin_g() {
        let plane = &img[(group * geo.cin_g() + ci) * geo.h * geo.w..][..geo.h * geo.w];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = &mut col[r * cols..(r + 1) * cols];
                for oy in 0..geo.ho {
                    let iy = (oy * sh + ky * dh) as isize - ph as isize;
                    let dst = &mut row[oy * geo.wo..(oy + 1) * geo.wo];
                    if iy < 0 || iy >= geo.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * geo.w..][..geo.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * sw + kx * dw) as isize - pw as isize;
                        *d = if ix < 0 || ix >= geo.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                r += 1;
            }
        }
    }
}

/// Scatter-adds `col` back into the image gradient `img`.
fn col2im<T: Real>(col: &[T], geo: &Geometry, spec: &Conv2dSpec, group: usize, img: &mut [T]) {
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let cols = geo.cols();
    let mut r = 0;
    for ci in 0..geo.cin_g() {
        let base = (group * geo.cin_g() + ci) * geo.h * geo.w;
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = &col[r * cols..(r + 1) * cols];
                for oy in 0..geo.ho {
                    let iy = (oy * sh + ky * dh) as isize - ph as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    for ox in 0..geo.wo {
                        let ix = (ox * sw + kx * dw) as isize - pw as isize;
                        if ix >= 0 && ix < geo.w as isize {
                            img[base + iy as usize * geo.w + ix as usize] += row[oy * geo.wo + ox];
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

pub fn conv2d_output_shape(
    x: &[usize],
    w: &[usize],
    spec: &Conv2dSpec,
) -> Result<[usize; 4]> {
    let geo = geometry(x, w, spec)?;
    Ok([geo.batch, geo.cout, geo.ho, geo.wo])
}

pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &Conv2dSpec,
) -> Result<Tensor<T>> {
    let geo = geometry(x.shape(), w.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != [geo.cout] {
            return Err(Error::shape("conv2d bias", b.shape(), &[geo.cout]));
        }
    }
    let out_per_image = geo.cout * geo.cols();
    let in_per_image = geo.cin * geo.h * geo.w;
    let w_per_group = geo.cout_g() * geo.rows();
    let mut out = vec![T::zero(); geo.batch * out_per_image];
    out.par_chunks_mut(out_per_image)
        .enumerate()
        .for_each(|(b, out_img)| {
            let img = &x.data()[b * in_per_image..(b + 1) * in_per_image];
            let mut col = vec![T::zero(); geo.rows() * geo.cols()];
            for g in 0..geo.groups {
                im2col(img, &geo, spec, g, &mut col);
                gemm_nn(
                    geo.cout_g(),
                    geo.rows(),
                    geo.cols(),
                    &w.data()[g * w_per_group..(g + 1) * w_per_group],
                    &col,
                    &mut out_img[g * geo.cout_g() * geo.cols()..(g + 1) * geo.cout_g() * geo.cols()],
                );
            }
            if let Some(bias) = bias {
                for (o, plane) in out_img.chunks_mut(geo.cols()).enumerate() {
                    let bv = bias.data()[o];
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    Tensor::new(vec![geo.batch, geo.cout, geo.ho, geo.wo], out)
}

pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Input, weight and bias gradients. Per-image weight partials are summed in
/// batch order so the result does not depend on the thread count.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &Conv2dSpec,
) -> Result<Conv2dGrads<T>> {
    let geo = geometry(x.shape(), w.shape(), spec)?;
    if dy.shape() != [geo.batch, geo.cout, geo.ho, geo.wo] {
        return Err(Error::shape(
            "conv2d backward",
            dy.shape(),
            &[geo.batch, geo.cout, geo.ho, geo.wo],
        ));
    }
    let out_per_image = geo.cout * geo.cols();
    let in_per_image = geo.cin * geo.h * geo.w;
    let w_per_group = geo.cout_g() * geo.rows();

    let partials: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..geo.batch)
        .into_par_iter()
        .map(|b| {
            let img = &x.data()[b * in_per_image..(b + 1) * in_per_image];
            let dy_img = &dy.data()[b * out_per_image..(b + 1) * out_per_image];
            let mut dx = vec![T::zero(); in_per_image];
            let mut dw = vec![T::zero(); w.len()];
            let mut col = vec![T::zero(); geo.rows() * geo.cols()];
            let mut dcol = vec![T::zero(); geo.rows() * geo.cols()];
            for g in 0..geo.groups {
                let dy_g = &dy_img[g * geo.cout_g() * geo.cols()..(g + 1) * geo.cout_g() * geo.cols()];
                let w_g = &w.data()[g * w_per_group..(g + 1) * w_per_group];
                im2col(img, &geo, spec, g, &mut col);
                gemm_nt(
                    geo.cout_g(),
                    geo.cols(),
                    geo.rows(),
                    dy_g,
                    &col,
                    &mut dw[g * w_per_group..(g + 1) * w_per_group],
                );
                dcol.fill(T::zero());
                gemm_tn(geo.rows(), geo.cout_g(), geo.cols(), w_g, dy_g, &mut dcol);
                col2im(&dcol, &geo, spec, g, &mut dx);
            }
            let db: Vec<T> = dy_img
                .chunks(geo.cols())
                .map(|plane| plane.iter().copied().sum())
                .collect();
            (dx, dw, db)
        })
        .collect();

    let mut dx = Vec::with_capacity(geo.batch * in_per_image);
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); geo.cout];
    for (pdx, pdw, pdb) in partials {
        dx.extend_from_slice(&pdx);
        dw.iter_mut().zip(&pdw).for_each(|(a, &b)| *a += b);
        db.iter_mut().zip(&pdb).for_each(|(a, &b)| *a += b);
    }
    Ok(Conv2dGrads {
        input: Tensor::new(x.shape().to_vec(), dx)?,
        weight: Tensor::new(w.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![geo.cout], db)?,
    })
}
