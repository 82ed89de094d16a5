use super::{same_shape, Scalar, Shape, Tensor};
use crate::error::{check_dim, Error, Result};

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient passes where the forward input was positive.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_shape("relu_backward", x.shape(), grad_out.shape())?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// clamp((t + 3) / 6, 0, 1)
pub fn hard_sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| ((v + 3.0) / 6.0).clamp(0.0, 1.0))
}

pub fn hard_sigmoid_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_shape("hard_sigmoid_backward", x.shape(), grad_out.shape())?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > -3.0 && v < 3.0 { g / 6.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

fn check_vector(op: &'static str, t: &Tensor) -> Result<()> {
    check_dim(op, "H", 1, t.shape().h)?;
    check_dim(op, "W", 1, t.shape().w)
}

/// Dense layer on (N, in, 1, 1) inputs. Weights are (out, in, 1, 1), bias (1, out, 1, 1).
pub fn fully_connected(x: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    check_vector("fully_connected", x)?;
    let ws = weights.shape();
    check_dim("fully_connected", "C", ws.c, x.shape().c)?;
    if let Some(b) = bias {
        check_dim("fully_connected", "bias", ws.n, b.len())?;
    }
    let n = x.shape().n;
    let (out, inp) = (ws.n, ws.c);
    let mut y = Tensor::zeros(Shape::new(n, out, 1, 1));
    let w = weights.data();
    for s in 0..n {
        let xs = &x.data()[s * inp..(s + 1) * inp];
        for o in 0..out {
            let mut acc = bias.map_or(0.0, |b| b.data()[o]);
            for (a, b) in w[o * inp..(o + 1) * inp].iter().zip(xs) {
                acc += a * b;
            }
            y.data_mut()[s * out + o] = acc;
        }
    }
    Ok(y)
}

#[derive(Clone, Debug)]
pub struct FcGrads {
    pub x: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn fully_connected_backward(
    x: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
) -> Result<FcGrads> {
    check_vector("fully_connected_backward", x)?;
    let ws = weights.shape();
    let (out, inp) = (ws.n, ws.c);
    check_dim("fully_connected_backward", "C", inp, x.shape().c)?;
    same_shape(
        "fully_connected_backward",
        Shape::new(x.shape().n, out, 1, 1),
        grad_out.shape(),
    )?;
    let n = x.shape().n;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(ws);
    let mut gb = Tensor::zeros(Shape::new(1, out, 1, 1));
    let w = weights.data();
    for s in 0..n {
        let xs = &x.data()[s * inp..(s + 1) * inp];
        for o in 0..out {
            let g = grad_out.data()[s * out + o];
            gb.data_mut()[o] += g;
            let row = &mut gw.data_mut()[o * inp..(o + 1) * inp];
            for (r, &xv) in row.iter_mut().zip(xs) {
                *r += g * xv;
            }
            let gxs = &mut gx.data_mut()[s * inp..(s + 1) * inp];
            for (gv, &wv) in gxs.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                *gv += g * wv;
            }
        }
    }
    Ok(FcGrads {
        x: gx,
        weights: gw,
        bias: gb,
    })
}

/// Stacks along the channel axis. Batch and spatial sizes must agree.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::config("concat_channels needs at least one input"))?
        .shape();
    let mut c = 0;
    for p in parts {
        let s = p.shape();
        check_dim("concat_channels", "N", first.n, s.n)?;
        check_dim("concat_channels", "H", first.h, s.h)?;
        check_dim("concat_channels", "W", first.w, s.w)?;
        c += s.c;
    }
    let shape = first.with_channels(c);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..first.n {
        for p in parts {
            let per = p.shape().sample();
            data.extend_from_slice(&p.data()[n * per..(n + 1) * per]);
        }
    }
    Tensor::from_vec(shape, data)
}

/// Splits a gradient back into per-input pieces of the given channel counts.
pub fn concat_channels_backward(grad_out: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let total: usize = channels.iter().sum();
    check_dim("concat_channels_backward", "C", grad_out.shape().c, total)?;
    let mut out = Vec::with_capacity(channels.len());
    let mut start = 0;
    for &c in channels {
        out.push(slice_channels(grad_out, start, c)?);
        start += c;
    }
    Ok(out)
}

/// Channels `start..start + len`.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = x.shape();
    if start + len > s.c {
        return Err(Error::Dimension {
            op: "slice_channels",
            axis: "C",
            expected: start + len,
            got: s.c,
        });
    }
    let shape = s.with_channels(len);
    let p = s.plane();
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..s.n {
        let base = (n * s.c + start) * p;
        data.extend_from_slice(&x.data()[base..base + len * p]);
    }
    Tensor::from_vec(shape, data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

/// x + v where v is (N, C, 1, 1) and is broadcast over each plane.
pub fn add_broadcast_channel(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    same_shape(
        "add_broadcast_channel",
        Shape::new(s.n, s.c, 1, 1),
        v.shape(),
    )?;
    let p = s.plane();
    let mut out = x.clone();
    for (i, val) in out.data_mut().iter_mut().enumerate() {
        *val += v.data()[i / p];
    }
    Ok(out)
}

/// Gradient of the broadcast operand: the plane sums of `grad_out`.
pub fn add_backward_broadcast(grad_out: &Tensor) -> Tensor {
    let s = grad_out.shape();
    let mut g = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            g.data_mut()[n * s.c + c] = grad_out.plane(n, c).iter().sum();
        }
    }
    g
}

/// Multiplies each (sample, channel) plane by the matching entry of `gate` (N, C, 1, 1).
pub fn scale_channels(x: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    same_shape("scale_channels", Shape::new(s.n, s.c, 1, 1), gate.shape())?;
    let p = s.plane();
    let mut out = x.clone();
    for (i, val) in out.data_mut().iter_mut().enumerate() {
        *val *= gate.data()[i / p];
    }
    Ok(out)
}

/// Returns (grad wrt x, grad wrt gate).
pub fn scale_channels_backward(
    x: &Tensor,
    gate: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    same_shape("scale_channels_backward", x.shape(), grad_out.shape())?;
    let gx = scale_channels(grad_out, gate)?;
    let s = x.shape();
    let mut gg = Tensor::zeros(gate.shape());
    for n in 0..s.n {
        for c in 0..s.c {
            let acc: Scalar = x
                .plane(n, c)
                .iter()
                .zip(grad_out.plane(n, c))
                .map(|(a, b)| a * b)
                .sum();
            gg.data_mut()[n * s.c + c] = acc;
        }
    }
    Ok((gx, gg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: Shape) -> Tensor {
        Tensor::from_fn(shape, |i| (i as Scalar * 0.37).sin())
    }

    #[test]
    fn relu_and_gradient() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::vector(vec![5.0, 5.0, 5.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn hard_sigmoid_values() {
        let x = Tensor::vector(vec![-4.0, -3.0, 0.0, 3.0, 5.0]);
        assert_eq!(hard_sigmoid(&x).data(), &[0.0, 0.0, 0.5, 1.0, 1.0]);
        let g = hard_sigmoid_backward(&x, &Tensor::full(x.shape(), 6.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn fully_connected_matches_manual() {
        let x = Tensor::from_vec(Shape::new(2, 2, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w =
            Tensor::from_vec(Shape::new(3, 2, 1, 1), vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::vector(vec![0.5, 0.0, -1.0]);
        let y = fully_connected(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[1.5, 2.0, 2.0, 3.5, 4.0, 6.0]);
        let g = fully_connected_backward(&x, &w, &Tensor::full(y.shape(), 1.0)).unwrap();
        assert_eq!(g.bias.data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.x.data(), &[2.0, 2.0, 2.0, 2.0]);
        assert_eq!(g.weights.data(), &[4.0, 6.0, 4.0, 6.0, 4.0, 6.0]);
    }

    #[test]
    fn fully_connected_rejects_spatial_input() {
        let x = Tensor::zeros(Shape::new(1, 2, 2, 1));
        let w = Tensor::zeros(Shape::new(1, 2, 1, 1));
        assert!(matches!(
            fully_connected(&x, &w, None),
            Err(Error::Dimension { axis: "H", .. })
        ));
    }

    #[test]
    fn concat_then_split_roundtrip() {
        let a = seq(Shape::new(2, 3, 2, 2));
        let b = seq(Shape::new(2, 1, 2, 2)).scale(-1.0);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(2, 4, 2, 2));
        assert_eq!(cat.plane(1, 3), b.plane(1, 0));
        assert_eq!(cat.plane(1, 2), a.plane(1, 2));
        let parts = concat_channels_backward(&cat, &[3, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn concat_checks_spatial() {
        let a = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let b = Tensor::zeros(Shape::new(1, 1, 3, 2));
        assert!(matches!(
            concat_channels(&[&a, &b]),
            Err(Error::Dimension { axis: "H", .. })
        ));
        assert!(concat_channels(&[]).is_err());
    }

    #[test]
    fn slice_out_of_range() {
        let a = Tensor::zeros(Shape::new(1, 3, 1, 1));
        assert!(slice_channels(&a, 2, 2).is_err());
        assert_eq!(slice_channels(&a, 1, 2).unwrap().shape().c, 2);
    }

    #[test]
    fn broadcast_add_and_gradient() {
        let x = Tensor::zeros(Shape::new(1, 2, 2, 2));
        let v = Tensor::vector(vec![1.0, -2.0]);
        let y = add_broadcast_channel(&x, &v).unwrap();
        assert!(y.plane(0, 1).iter().all(|&t| t == -2.0));
        assert_eq!(
            add_backward_broadcast(&Tensor::full(y.shape(), 1.0)).data(),
            &[4.0, 4.0]
        );
    }

    #[test]
    fn scale_channels_gradient() {
        let x = seq(Shape::new(1, 2, 2, 1));
        let gate = Tensor::vector(vec![2.0, 0.0]);
        let y = scale_channels(&x, &gate).unwrap();
        assert!(y.plane(0, 1).iter().all(|&t| t == 0.0));
        let (gx, gg) = scale_channels_backward(&x, &gate, &Tensor::full(x.shape(), 1.0)).unwrap();
        assert_eq!(gx.plane(0, 0), &[2.0, 2.0]);
        assert_eq!(gg.data()[1], x.plane(0, 1).iter().sum::<Scalar>());
    }
}
