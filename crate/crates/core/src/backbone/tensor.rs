//! Minimal real-valued tensors and the two layer kinds the backbone needs,
//! each with a hand-written backward pass. Convolutions are same-padding
//! direct stencils with the inner loop over the row axis so the compiler can
//! vectorize them; training throughput lives and dies here.

use rayon::prelude::*;

/// Dense row-major tensor of `f64` with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape: shape.to_vec(), data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel plane of a `[c, h, w]` tensor.
    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.shape[1] * self.shape[2];
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let hw = self.shape[1] * self.shape[2];
        &mut self.data[c * hw..(c + 1) * hw]
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Symmetric parameter-free attention activation: `sigmoid(x) - 0.5`.
pub fn symmetric_activation(x: f64) -> f64 {
    sigmoid(x) - 0.5
}

/// 2D convolution with odd square kernels and same padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[out_c, in_c, k, k]`
    pub w: Tensor,
    /// `[out_c]`
    pub b: Tensor,
}

impl Conv2d {
    pub fn zeros(out_c: usize, in_c: usize, k: usize) -> Self {
        assert!(k % 2 == 1);
        Self { w: Tensor::zeros(&[out_c, in_c, k, k]), b: Tensor::zeros(&[out_c]) }
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape[0]
    }

    pub fn in_channels(&self) -> usize {
        self.w.shape[1]
    }

    pub fn kernel(&self) -> usize {
        self.w.shape[2]
    }

    /// `input: [in_c, h, w] -> [out_c, h, w]`.
    pub fn forward(&self, input: &Tensor) -> Tensor {
        let (in_c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
        assert_eq!(in_c, self.in_channels(), "conv input channels");
        let out_c = self.out_channels();
        let k = self.kernel();
        let hw = h * w;
        let mut out = Tensor::zeros(&[out_c, h, w]);

        if k == 1 {
            out.data
                .par_chunks_exact_mut(hw)
                .enumerate()
                .for_each(|(oc, out_plane)| {
                    out_plane.fill(self.b.data[oc]);
                    for ic in 0..in_c {
                        let wgt = self.w.data[oc * in_c + ic];
                        let in_plane = input.plane(ic);
                        for (o, &v) in out_plane.iter_mut().zip(in_plane) {
                            *o += wgt * v;
                        }
                    }
                });
            return out;
        }
        assert_eq!(k, 3, "only 1x1 and 3x3 kernels are used");

        let zero_row = vec![0.0f64; w];
        out.data
            .par_chunks_exact_mut(hw)
            .enumerate()
            .for_each(|(oc, out_plane)| {
                out_plane.fill(self.b.data[oc]);
                for ic in 0..in_c {
                    let in_plane = input.plane(ic);
                    let wk = &self.w.data[(oc * in_c + ic) * 9..(oc * in_c + ic) * 9 + 9];
                    let (w00, w01, w02) = (wk[0], wk[1], wk[2]);
                    let (w10, w11, w12) = (wk[3], wk[4], wk[5]);
                    let (w20, w21, w22) = (wk[6], wk[7], wk[8]);
                    for y in 0..h {
                        let r0 = if y > 0 { &in_plane[(y - 1) * w..y * w] } else { &zero_row[..] };
                        let r1 = &in_plane[y * w..(y + 1) * w];
                        let r2 = if y + 1 < h {
                            &in_plane[(y + 1) * w..(y + 2) * w]
                        } else {
                            &zero_row[..]
                        };
                        let out_row = &mut out_plane[y * w..(y + 1) * w];
                        // Fused 9-tap stencil over the interior; borders peel.
                        out_row[0] += w01 * r0[0] + w02 * r0[1]
                            + w11 * r1[0] + w12 * r1[1]
                            + w21 * r2[0] + w22 * r2[1];
                        for x in 1..w - 1 {
                            out_row[x] += w00 * r0[x - 1] + w01 * r0[x] + w02 * r0[x + 1]
                                + w10 * r1[x - 1] + w11 * r1[x] + w12 * r1[x + 1]
                                + w20 * r2[x - 1] + w21 * r2[x] + w22 * r2[x + 1];
                        }
                        out_row[w - 1] += w00 * r0[w - 2] + w01 * r0[w - 1]
                            + w10 * r1[w - 2] + w11 * r1[w - 1]
                            + w20 * r2[w - 2] + w21 * r2[w - 1];
                    }
                }
            });
        out
    }

    /// Backward pass. Accumulates parameter gradients into `gw`/`gb` and
    /// returns the gradient with respect to the input unless `need_input_grad`
    /// is false (the first layer skips it).
    pub fn backward(
        &self,
        input: &Tensor,
        grad_out: &Tensor,
        gw: &mut Tensor,
        gb: &mut Tensor,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let (in_c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
        let out_c = self.out_channels();
        let k = self.kernel();
        assert_eq!(grad_out.shape, vec![out_c, h, w]);
        assert_eq!(gw.shape, self.w.shape);

        // Parameter gradients, parallel over output channels.
        let zero_row = vec![0.0f64; w];
        gw.data
            .par_chunks_exact_mut(in_c * k * k)
            .zip(gb.data.par_iter_mut())
            .enumerate()
            .for_each(|(oc, (gw_oc, gb_oc))| {
                let go_plane = grad_out.plane(oc);
                *gb_oc += go_plane.iter().sum::<f64>();
                for ic in 0..in_c {
                    let in_plane = input.plane(ic);
                    if k == 1 {
                        gw_oc[ic] += go_plane.iter().zip(in_plane).map(|(a, b)| a * b).sum::<f64>();
                        continue;
                    }
                    // Nine accumulators in one pass over the plane.
                    let mut acc = [0.0f64; 9];
                    for y in 0..h {
                        let r0 = if y > 0 { &in_plane[(y - 1) * w..y * w] } else { &zero_row[..] };
                        let r1 = &in_plane[y * w..(y + 1) * w];
                        let r2 = if y + 1 < h {
                            &in_plane[(y + 1) * w..(y + 2) * w]
                        } else {
                            &zero_row[..]
                        };
                        let go_row = &go_plane[y * w..(y + 1) * w];
                        let g0 = go_row[0];
                        acc[1] += g0 * r0[0];
                        acc[2] += g0 * r0[1];
                        acc[4] += g0 * r1[0];
                        acc[5] += g0 * r1[1];
                        acc[7] += g0 * r2[0];
                        acc[8] += g0 * r2[1];
                        for x in 1..w - 1 {
                            let g = go_row[x];
                            acc[0] += g * r0[x - 1];
                            acc[1] += g * r0[x];
                            acc[2] += g * r0[x + 1];
                            acc[3] += g * r1[x - 1];
                            acc[4] += g * r1[x];
                            acc[5] += g * r1[x + 1];
                            acc[6] += g * r2[x - 1];
                            acc[7] += g * r2[x];
                            acc[8] += g * r2[x + 1];
                        }
                        let gl = go_row[w - 1];
                        acc[0] += gl * r0[w - 2];
                        acc[1] += gl * r0[w - 1];
                        acc[3] += gl * r1[w - 2];
                        acc[4] += gl * r1[w - 1];
                        acc[6] += gl * r2[w - 2];
                        acc[7] += gl * r2[w - 1];
                    }
                    for (slot, a) in acc.iter().enumerate() {
                        gw_oc[ic * 9 + slot] += a;
                    }
                }
            });

        if !need_input_grad {
            return None;
        }

        // grad_in[ic] = sum_oc flip(w[oc][ic]) * grad_out[oc]: run the
        // forward stencil with transposed, flipped weights and zero bias.
        let mut wt = Tensor::zeros(&[in_c, out_c, k, k]);
        for oc in 0..out_c {
            for ic in 0..in_c {
                for t in 0..k * k {
                    wt.data[(ic * out_c + oc) * k * k + (k * k - 1 - t)] =
                        self.w.data[(oc * in_c + ic) * k * k + t];
                }
            }
        }
        let flipped = Conv2d { w: wt, b: Tensor::zeros(&[in_c]) };
        Some(flipped.forward(grad_out))
    }
}

/// Fully connected layer on flat vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[out, in]`
    pub w: Tensor,
    /// `[out]`
    pub b: Tensor,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self { w: Tensor::zeros(&[out_dim, in_dim]), b: Tensor::zeros(&[out_dim]) }
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape[0]
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape[1]
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let (out_dim, in_dim) = (self.out_dim(), self.in_dim());
        assert_eq!(input.len(), in_dim);
        let mut out = self.b.data.clone();
        for o in 0..out_dim {
            let row = &self.w.data[o * in_dim..(o + 1) * in_dim];
            out[o] += row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
        }
        out
    }

    pub fn backward(
        &self,
        input: &[f64],
        grad_out: &[f64],
        gw: &mut Tensor,
        gb: &mut Tensor,
    ) -> Vec<f64> {
        let (out_dim, in_dim) = (self.out_dim(), self.in_dim());
        for o in 0..out_dim {
            gb.data[o] += grad_out[o];
            let gw_row = &mut gw.data[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                gw_row[i] += grad_out[o] * input[i];
            }
        }
        let mut grad_in = vec![0.0; in_dim];
        for o in 0..out_dim {
            let row = &self.w.data[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                grad_in[i] += row[i] * grad_out[o];
            }
        }
        grad_in
    }
}
