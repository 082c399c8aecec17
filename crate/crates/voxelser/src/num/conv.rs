//! 3x3x3 convolution with stride 1 and zero padding, so output dims equal
//! input dims. Volumes are `[channels, n0, n1, n2]` row-major.

use crate::error::{Error, Result};

use super::{Buf, Tape, Var};

const K: usize = 3;

impl Tape {
    /// `input [c_in, n0, n1, n2] * weight [c_out, c_in, 3, 3, 3] + bias [c_out]`.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let in_shape = self.value(input).shape().to_vec();
        let w_shape = self.value(weight).shape().to_vec();
        if in_shape.len() != 4 {
            return Err(Error::shape("conv3d", format!("input shape {in_shape:?}")));
        }
        if w_shape.len() != 5 || w_shape[1] != in_shape[0] || w_shape[2..] != [K, K, K] {
            return Err(Error::shape(
                "conv3d",
                format!("weight shape {w_shape:?} for input {in_shape:?}"),
            ));
        }
        let c_out = w_shape[0];
        if self.value(bias).len() != c_out {
            return Err(Error::shape("conv3d", format!("bias len vs {c_out} output channels")));
        }
        let dims = [in_shape[1], in_shape[2], in_shape[3]];
        let c_in = in_shape[0];

        let vin = self.value(input).clone();
        let vw = self.value(weight).clone();
        let vb = self.value(bias).clone();

        let value = conv_forward(&vin, &vw, &vb, c_in, c_out, dims);
        Ok(self.push(value, &[input, weight, bias], Box::new(move |g| {
            let (di, dw, db) = conv_backward(g, &vin, &vw, c_in, c_out, dims);
            vec![(input.0, di), (weight.0, dw), (bias.0, db)]
        })))
    }
}

fn vol_index(c: usize, p: [usize; 3], dims: [usize; 3]) -> usize {
    ((c * dims[0] + p[0]) * dims[1] + p[1]) * dims[2] + p[2]
}

fn w_index(o: usize, i: usize, k: [usize; 3], c_in: usize) -> usize {
    (((o * c_in + i) * K + k[0]) * K + k[1]) * K + k[2]
}

fn conv_forward(input: &Buf, weight: &Buf, bias: &Buf, c_in: usize, c_out: usize, dims: [usize; 3]) -> Buf {
    let mut out = Buf::zeros(&[c_out, dims[0], dims[1], dims[2]]);
    for o in 0..c_out {
        for p0 in 0..dims[0] {
            for p1 in 0..dims[1] {
                for p2 in 0..dims[2] {
                    let mut acc = bias.data()[o];
                    for i in 0..c_in {
                        for (k0, q0) in kernel_span(p0, dims[0]) {
                            for (k1, q1) in kernel_span(p1, dims[1]) {
                                for (k2, q2) in kernel_span(p2, dims[2]) {
                                    acc += weight.data()[w_index(o, i, [k0, k1, k2], c_in)]
                                        * input.data()[vol_index(i, [q0, q1, q2], dims)];
                                }
                            }
                        }
                    }
                    out.data_mut()[vol_index(o, [p0, p1, p2], dims)] = acc;
                }
            }
        }
    }
    out
}

fn conv_backward(
    g: &Buf,
    input: &Buf,
    weight: &Buf,
    c_in: usize,
    c_out: usize,
    dims: [usize; 3],
) -> (Buf, Buf, Buf) {
    let mut di = Buf::zeros(input.shape());
    let mut dw = Buf::zeros(weight.shape());
    let mut db = Buf::zeros(&[c_out]);
    for o in 0..c_out {
        for p0 in 0..dims[0] {
            for p1 in 0..dims[1] {
                for p2 in 0..dims[2] {
                    let gv = g.data()[vol_index(o, [p0, p1, p2], dims)];
                    if gv == 0.0 {
                        continue;
                    }
                    db.data_mut()[o] += gv;
                    for i in 0..c_in {
                        for (k0, q0) in kernel_span(p0, dims[0]) {
                            for (k1, q1) in kernel_span(p1, dims[1]) {
                                for (k2, q2) in kernel_span(p2, dims[2]) {
                                    let wi = w_index(o, i, [k0, k1, k2], c_in);
                                    let vi = vol_index(i, [q0, q1, q2], dims);
                                    dw.data_mut()[wi] += gv * input.data()[vi];
                                    di.data_mut()[vi] += gv * weight.data()[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (di, dw, db)
}

/// Kernel offsets whose padded source position falls inside the volume.
fn kernel_span(p: usize, n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..K).filter_map(move |k| {
        let q = p + k;
        if q >= 1 && q - 1 < n {
            Some((k, q - 1))
        } else {
            None
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_preserves_volume() {
        let mut t = Tape::new();
        let dims = [3, 3, 3];
        let vals: Vec<f64> = (0..27).map(|i| i as f64 * 0.5 - 3.0).collect();
        let input = t.leaf(Buf::from_vec(&[1, 3, 3, 3], vals.clone()).unwrap(), true);
        let mut w = Buf::zeros(&[1, 1, 3, 3, 3]);
        w.data_mut()[w_index(0, 0, [1, 1, 1], 1)] = 1.0;
        let weight = t.leaf(w, true);
        let bias = t.leaf(Buf::zeros(&[1]), true);
        let out = t.conv3d(input, weight, bias).unwrap();
        assert_eq!(t.value(out).shape(), &[1, 3, 3, 3]);
        // Zero padding + centered identity tap reproduces the input everywhere,
        // interior and boundary alike.
        for (a, b) in t.value(out).data().iter().zip(&vals) {
            assert_eq!(a, b, "{dims:?}");
        }
    }

    #[test]
    fn bias_only_fills_output() {
        let mut t = Tape::new();
        let input = t.leaf(Buf::zeros(&[2, 2, 2, 2]), false);
        let weight = t.leaf(Buf::zeros(&[3, 2, 3, 3, 3]), true);
        let bias = t.leaf(Buf::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let out = t.conv3d(input, weight, bias).unwrap();
        let v = t.value(out);
        assert_eq!(v.shape(), &[3, 2, 2, 2]);
        for o in 0..3 {
            for &x in &v.data()[o * 8..(o + 1) * 8] {
                assert_eq!(x, [1.0, -2.0, 0.5][o]);
            }
        }
    }

    #[test]
    fn rejects_wrong_weight_shape() {
        let mut t = Tape::new();
        let input = t.leaf(Buf::zeros(&[2, 2, 2, 2]), false);
        let weight = t.leaf(Buf::zeros(&[3, 1, 3, 3, 3]), true);
        let bias = t.leaf(Buf::zeros(&[3]), true);
        assert!(t.conv3d(input, weight, bias).is_err());
    }
}
