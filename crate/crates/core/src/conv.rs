//! Differentiable convolution-family operations on [`Var`].

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels::{col2im, gemm, im2col, ConvGeom};
use crate::tensor::Tensor;

/// Stride, zero padding and dilation of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    /// Padding that keeps `ceil(size / stride)` outputs for an odd kernel.
    pub fn same(kernel: usize, stride: usize, dilation: usize) -> Self {
        ConvSpec {
            stride,
            pad: dilation * (kernel - 1) / 2,
            dilation,
        }
    }
}

fn add_bias(y: &mut [f64], bias: &[f64], plane: usize) {
    for (co, &b) in bias.iter().enumerate() {
        for v in &mut y[co * plane..(co + 1) * plane] {
            *v += b;
        }
    }
}

fn bias_grad(g: &Tensor) -> Tensor {
    let (n, c, h, w) = g.dims4();
    let plane = h * w;
    let mut db = Tensor::zeros(&[c]);
    for b in 0..n {
        for co in 0..c {
            let start = (b * c + co) * plane;
            db.data_mut()[co] += g.data()[start..start + plane].iter().sum::<f64>();
        }
    }
    db
}

impl<'t> Var<'t> {
    /// 2-D convolution. `self` is `[N, C, H, W]`, `weight` is `[Co, C, k, k]`,
    /// `bias` is `[Co]`.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, spec: ConvSpec) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let (n, c, h, wd) = x.dims4();
        let (co, ci, kh, kw) = w.dims4();
        if ci != c || kh != kw {
            return Err(Error::shape(format!(
                "conv2d: input {:?} vs weight {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let g = ConvGeom::new(c, h, wd, kh, spec.stride, spec.pad, spec.dilation)
            .ok_or_else(|| Error::shape(format!("conv2d: kernel does not fit {h}x{wd}")))?;
        let (rows, ncols) = (g.col_rows(), g.col_cols());
        let mut out = Tensor::zeros(&[n, co, g.out_h, g.out_w]);
        let mut cols = vec![0.0; rows * ncols];
        let bias_val = bias.map(|b| b.value());
        for b in 0..n {
            im2col(&x.data()[b * g.image_len()..(b + 1) * g.image_len()], &g, &mut cols);
            let y = &mut out.data_mut()[b * co * ncols..(b + 1) * co * ncols];
            gemm(co, rows, ncols, 1.0, w.data(), false, &cols, false, 0.0, y);
            if let Some(bv) = &bias_val {
                add_bias(y, bv.data(), ncols);
            }
        }
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.tape().push(out, &parents, move |gy, needs| {
            let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
            let mut dw = needs[1].then(|| Tensor::zeros(w.shape()));
            let mut cols = vec![0.0; rows * ncols];
            let mut dcols = vec![0.0; rows * ncols];
            for b in 0..n {
                let gyb = &gy.data()[b * co * ncols..(b + 1) * co * ncols];
                if let Some(dw) = &mut dw {
                    im2col(&x.data()[b * g.image_len()..(b + 1) * g.image_len()], &g, &mut cols);
                    gemm(co, ncols, rows, 1.0, gyb, false, &cols, true, 1.0, dw.data_mut());
                }
                if let Some(dx) = &mut dx {
                    gemm(rows, co, ncols, 1.0, w.data(), true, gyb, false, 0.0, &mut dcols);
                    col2im(
                        &dcols,
                        &g,
                        &mut dx.data_mut()[b * g.image_len()..(b + 1) * g.image_len()],
                    );
                }
            }
            let mut grads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| bias_grad(gy)));
            }
            grads
        }))
    }

    /// Transposed 2-D convolution. `self` is `[N, Ci, H, W]`, `weight` is
    /// `[Ci, Co, k, k]`; the output is `(H-1)·stride - 2·pad + k + output_pad` high.
    pub fn conv_transpose2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let (n, ci, h, wd) = x.dims4();
        let (wci, co, kh, kw) = w.dims4();
        if wci != ci || kh != kw {
            return Err(Error::shape(format!(
                "conv_transpose2d: input {:?} vs weight {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let out_h = (h - 1) * stride + kh + output_pad - 2 * pad;
        let out_w = (wd - 1) * stride + kw + output_pad - 2 * pad;
        let g = ConvGeom::new(co, out_h, out_w, kh, stride, pad, 1)
            .filter(|g| g.out_h == h && g.out_w == wd)
            .ok_or_else(|| Error::shape("conv_transpose2d: inconsistent geometry"))?;
        let (rows, ncols) = (g.col_rows(), g.col_cols());
        let in_len = ci * h * wd;
        let mut out = Tensor::zeros(&[n, co, out_h, out_w]);
        let mut cols = vec![0.0; rows * ncols];
        let bias_val = bias.map(|b| b.value());
        for b in 0..n {
            gemm(
                rows,
                ci,
                ncols,
                1.0,
                w.data(),
                true,
                &x.data()[b * in_len..(b + 1) * in_len],
                false,
                0.0,
                &mut cols,
            );
            let y = &mut out.data_mut()[b * g.image_len()..(b + 1) * g.image_len()];
            col2im(&cols, &g, y);
            if let Some(bv) = &bias_val {
                add_bias(y, bv.data(), out_h * out_w);
            }
        }
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.tape().push(out, &parents, move |gy, needs| {
            let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
            let mut dw = needs[1].then(|| Tensor::zeros(w.shape()));
            let mut dcols = vec![0.0; rows * ncols];
            for b in 0..n {
                im2col(
                    &gy.data()[b * g.image_len()..(b + 1) * g.image_len()],
                    &g,
                    &mut dcols,
                );
                if let Some(dx) = &mut dx {
                    gemm(
                        ci,
                        rows,
                        ncols,
                        1.0,
                        w.data(),
                        false,
                        &dcols,
                        false,
                        0.0,
                        &mut dx.data_mut()[b * in_len..(b + 1) * in_len],
                    );
                }
                if let Some(dw) = &mut dw {
                    gemm(
                        ci,
                        ncols,
                        rows,
                        1.0,
                        &x.data()[b * in_len..(b + 1) * in_len],
                        false,
                        &dcols,
                        true,
                        1.0,
                        dw.data_mut(),
                    );
                }
            }
            let mut grads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| bias_grad(gy)));
            }
            grads
        }))
    }

    /// Extracts every `k×k` patch of a single `[1, C, H, W]` map as the rows
    /// of a `(locations) × (C·k·k)` matrix, row-major over output locations.
    pub fn patches(self, kernel: usize, stride: usize, pad: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        if n != 1 {
            return Err(Error::shape("patches: expects a single feature map"));
        }
        let g = ConvGeom::new(c, h, w, kernel, stride, pad, 1)
            .ok_or_else(|| Error::shape("patches: kernel does not fit"))?;
        let (rows, ncols) = (g.col_rows(), g.col_cols());
        let mut cols = vec![0.0; rows * ncols];
        im2col(x.data(), &g, &mut cols);
        let out = Tensor::from_vec(&[ncols, rows], transpose(rows, ncols, &cols));
        Ok(self.tape().push(out, &[self], move |gp, needs| {
            vec![needs[0].then(|| {
                let cols = transpose(ncols, rows, gp.data());
                let mut dx = Tensor::zeros(&[1, c, h, w]);
                col2im(&cols, &g, dx.data_mut());
                dx
            })]
        }))
    }

    /// Pastes `k×k`, stride-`s` patches (rows of `rows`, `C·k·k` wide) onto
    /// the footprints of the coarse-grid locations `locations`, averaging
    /// overlaps. Only pixels where `mask` is 1 and at least one patch lands
    /// take the pasted value; every other pixel keeps `self`.
    #[allow(clippy::too_many_arguments)]
    pub fn paste_patches(
        self,
        rows: Var<'t>,
        locations: &[usize],
        mask: &[f64],
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let base = self.value();
        let r = rows.value();
        let (n, c, h, w) = base.dims4();
        if n != 1 || mask.len() != h * w {
            return Err(Error::shape("paste_patches: expects one map and a matching mask"));
        }
        let g = ConvGeom::new(c, h, w, kernel, stride, pad, 1)
            .ok_or_else(|| Error::shape("paste_patches: kernel does not fit"))?;
        let (prow, pcol) = r.dims2();
        if prow != locations.len() || pcol != g.col_rows() {
            return Err(Error::shape(format!(
                "paste_patches: {prow}x{pcol} patches for {} locations of width {}",
                locations.len(),
                g.col_rows()
            )));
        }
        let ncols = g.col_cols();
        if let Some(&bad) = locations.iter().find(|&&l| l >= ncols) {
            return Err(Error::shape(format!("paste_patches: location {bad} >= {ncols}")));
        }

        let mut cols = vec![0.0; g.col_rows() * ncols];
        for (j, &loc) in locations.iter().enumerate() {
            for d in 0..pcol {
                cols[d * ncols + loc] = r.data()[j * pcol + d];
            }
        }
        let mut sum = vec![0.0; c * h * w];
        col2im(&cols, &g, &mut sum);

        let count_geom = ConvGeom { channels: 1, ..g };
        let mut ones = vec![0.0; count_geom.col_rows() * ncols];
        for &loc in locations {
            for d in 0..count_geom.col_rows() {
                ones[d * ncols + loc] = 1.0;
            }
        }
        let mut count = vec![0.0; h * w];
        col2im(&ones, &count_geom, &mut count);
        // Per-pixel divisor, or 0 where the base value is kept.
        let divisor: Vec<f64> = count
            .iter()
            .zip(mask)
            .map(|(&k, &m)| if m == 1.0 && k > 0.0 { k } else { 0.0 })
            .collect();

        let mut out = (*base).clone();
        for ch in 0..c {
            for p in 0..h * w {
                if divisor[p] > 0.0 {
                    out.data_mut()[ch * h * w + p] = sum[ch * h * w + p] / divisor[p];
                }
            }
        }
        let locations = locations.to_vec();
        Ok(self.tape().push(out, &[self, rows], move |gy, needs| {
            let d_base = needs[0].then(|| {
                let mut d = gy.clone();
                for ch in 0..c {
                    for p in 0..h * w {
                        if divisor[p] > 0.0 {
                            d.data_mut()[ch * h * w + p] = 0.0;
                        }
                    }
                }
                d
            });
            let d_rows = needs[1].then(|| {
                let mut d_sum = vec![0.0; c * h * w];
                for ch in 0..c {
                    for p in 0..h * w {
                        if divisor[p] > 0.0 {
                            d_sum[ch * h * w + p] = gy.data()[ch * h * w + p] / divisor[p];
                        }
                    }
                }
                let mut dcols = vec![0.0; g.col_rows() * ncols];
                im2col(&d_sum, &g, &mut dcols);
                let mut dr = Tensor::zeros(&[prow, pcol]);
                for (j, &loc) in locations.iter().enumerate() {
                    for d in 0..pcol {
                        dr.data_mut()[j * pcol + d] = dcols[d * ncols + loc];
                    }
                }
                dr
            });
            vec![d_base, d_rows]
        }))
    }

    /// `W / σ` with `σ = uᵀ W v`, treating the power-iteration vectors as
    /// constants. `W` is viewed as a `rows × rest` matrix.
    pub fn spectral_normalize(self, u: &[f64], v: &[f64]) -> Result<Var<'t>> {
        let w = self.value();
        let rows = w.shape()[0];
        let rest = w.numel() / rows.max(1);
        if u.len() != rows || v.len() != rest {
            return Err(Error::shape("spectral_normalize: vector sizes do not match weight"));
        }
        let sigma = bilinear(u, w.data(), v);
        if sigma.abs() < 1e-12 {
            return Err(Error::shape("spectral_normalize: degenerate weight (σ ≈ 0)"));
        }
        let out = w.scale(1.0 / sigma);
        let (u, v) = (u.to_vec(), v.to_vec());
        Ok(self.tape().push(out, &[self], move |g, needs| {
            vec![needs[0].then(|| {
                let gw: f64 = g.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
                let k = gw / (sigma * sigma);
                let mut d = g.scale(1.0 / sigma);
                for i in 0..rows {
                    for j in 0..rest {
                        d.data_mut()[i * rest + j] -= k * u[i] * v[j];
                    }
                }
                d
            })]
        }))
    }
}

/// `uᵀ W v` for `W` stored row-major as `u.len() × v.len()`.
pub fn bilinear(u: &[f64], w: &[f64], v: &[f64]) -> f64 {
    u.iter()
        .enumerate()
        .map(|(i, &ui)| {
            ui * w[i * v.len()..(i + 1) * v.len()]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .sum()
}

fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}
