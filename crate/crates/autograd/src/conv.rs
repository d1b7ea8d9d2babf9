//! Patch extraction (`im2col`) and its adjoint (`col2im`) for 3D convolutions.
//!
//! A convolution over one sample is computed as `W · cols` with `W` of shape
//! `(out_channels, in_channels * kd * kh * kw)` and `cols` of shape
//! `(in_channels * kd * kh * kw, od * oh * ow)`.

/// Hyperparameters of a 3D convolution, independent of input size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvParams {
    pub fn cubic(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel: [kernel; 3],
            stride: [stride; 3],
            padding: [padding; 3],
        }
    }

    /// Spatial output extent for a given input extent, or `None` when the
    /// kernel does not fit.
    pub fn output_extent(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    /// Spatial extent produced by the transposed convolution.
    pub fn transposed_extent(&self, input: [usize; 3], output_padding: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a].checked_sub(1)?) * self.stride[a] + self.kernel[a] + output_padding[a];
            out[a] = full.checked_sub(2 * self.padding[a])?;
            if out[a] == 0 || output_padding[a] >= self.stride[a].max(1) {
                return None;
            }
        }
        Some(out)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Geometry of one convolution application: `channels` planes of extent
/// `input` mapped to extent `output`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub params: ConvParams,
    pub channels: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn rows(&self) -> usize {
        self.channels * self.params.kernel_volume()
    }

    pub fn cols(&self) -> usize {
        self.output.iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.input.iter().product::<usize>()
    }
}

/// Input coordinate touched by output coordinate `o` and kernel tap `k`.
#[inline]
fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + k).checked_sub(pad)?;
    (i < extent).then_some(i)
}

/// Fills `cols` (`rows x cols`, row-major) with input patches.
pub fn im2col<T: Copy + Default>(geom: &ConvGeometry, input: &[T], cols: &mut [T]) {
    let [id, ih, iw] = geom.input;
    let [od, oh, ow] = geom.output;
    let [kd, kh, kw] = geom.params.kernel;
    let [sd, sh, sw] = geom.params.stride;
    let [pd, ph, pw] = geom.params.padding;
    let ncols = geom.cols();
    debug_assert_eq!(input.len(), geom.input_len());
    debug_assert_eq!(cols.len(), geom.rows() * ncols);

    let mut row = 0;
    for c in 0..geom.channels {
        let plane = &input[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    let mut at = 0;
                    for oz in 0..od {
                        let z = source(oz, kz, sd, pd, id);
                        for oy in 0..oh {
                            let y = source(oy, ky, sh, ph, ih);
                            let line = &mut dst[at..at + ow];
                            at += ow;
                            match (z, y) {
                                (Some(z), Some(y)) => {
                                    let src = &plane[(z * ih + y) * iw..(z * ih + y + 1) * iw];
                                    for (ox, v) in line.iter_mut().enumerate() {
                                        *v = match source(ox, kx, sw, pw, iw) {
                                            Some(x) => src[x],
                                            None => T::default(),
                                        };
                                    }
                                }
                                _ => line.fill(T::default()),
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `cols` back into `input`.
pub fn col2im<T: Copy + std::ops::AddAssign>(geom: &ConvGeometry, cols: &[T], input: &mut [T]) {
    let [id, ih, iw] = geom.input;
    let [od, oh, ow] = geom.output;
    let [kd, kh, kw] = geom.params.kernel;
    let [sd, sh, sw] = geom.params.stride;
    let [pd, ph, pw] = geom.params.padding;
    let ncols = geom.cols();
    debug_assert_eq!(input.len(), geom.input_len());
    debug_assert_eq!(cols.len(), geom.rows() * ncols);

    let mut row = 0;
    for c in 0..geom.channels {
        let plane = &mut input[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    let mut at = 0;
                    for oz in 0..od {
                        let z = source(oz, kz, sd, pd, id);
                        for oy in 0..oh {
                            let y = source(oy, ky, sh, ph, ih);
                            let line = &src[at..at + ow];
                            at += ow;
                            if let (Some(z), Some(y)) = (z, y) {
                                let dst = &mut plane[(z * ih + y) * iw..(z * ih + y + 1) * iw];
                                for (ox, &v) in line.iter().enumerate() {
                                    if let Some(x) = source(ox, kx, sw, pw, iw) {
                                        dst[x] += v;
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_matches_formula() {
        let p = ConvParams::cubic(3, 2, 1);
        assert_eq!(p.output_extent([128, 64, 32]), Some([64, 32, 16]));
        assert_eq!(p.transposed_extent([16, 8, 4], [1; 3]), Some([32, 16, 8]));
        assert_eq!(ConvParams::cubic(5, 1, 0).output_extent([4, 4, 4]), None);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for arbitrary x, c.
        let params = ConvParams {
            kernel: [3, 2, 3],
            stride: [2, 1, 2],
            padding: [1, 0, 1],
        };
        let input = [5, 4, 6];
        let geom = ConvGeometry {
            params,
            channels: 2,
            input,
            output: params.output_extent(input).unwrap(),
        };
        let x: Vec<f64> = (0..geom.input_len()).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let c: Vec<f64> = (0..geom.rows() * geom.cols()).map(|i| ((i * 5) % 13) as f64 - 6.0).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&geom, &x, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&geom, &c, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
