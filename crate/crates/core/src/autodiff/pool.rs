//! Windowed average/max pooling and global average pooling over `[N,C,H,W]`.

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Average,
    Max,
    GlobalAverage,
}

fn pooled_len(input: usize, window: usize, stride: usize) -> Result<usize> {
    ensure!(window > 0 && stride > 0, "pool window and stride must be positive");
    ensure!(
        window <= input,
        "pool window {} larger than input extent {}",
        window,
        input
    );
    Ok((input - window) / stride + 1)
}

pub fn avg_pool_forward(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    let oh = pooled_len(h, window, stride)?;
    let ow = pooled_len(w, window, stride)?;
    let x = input.data();
    let inv = 1.0 / (window * window) as f64;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let xp = &x[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..window {
                    let row = &xp[(oy * stride + dy) * w..];
                    for dx in 0..window {
                        acc += row[ox * stride + dx];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avg_pool_backward(
    grad_out: &Tensor,
    input_shape: &[usize],
    window: usize,
    stride: usize,
) -> Result<Tensor> {
    let [n, c, h, w] = [input_shape[0], input_shape[1], input_shape[2], input_shape[3]];
    let [_, _, oh, ow] = grad_out.dims4()?;
    let go = grad_out.data();
    let inv = 1.0 / (window * window) as f64;
    let mut gin = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let gp = &mut gin[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = go[(plane * oh + oy) * ow + ox] * inv;
                for dy in 0..window {
                    for dx in 0..window {
                        gp[(oy * stride + dy) * w + ox * stride + dx] += gv;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gin)
}

/// Max pooling; also returns the flat input index chosen for each output.
/// Ties resolve to the first tap in row-major window order.
pub fn max_pool_forward(
    input: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = input.dims4()?;
    let oh = pooled_len(h, window, stride)?;
    let ow = pooled_len(w, window, stride)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

pub fn max_pool_backward(grad_out: &Tensor, input_shape: &[usize], argmax: &[usize]) -> Tensor {
    let mut gin = Tensor::zeros(input_shape.to_vec());
    let g = gin.data_mut();
    for (&idx, &gv) in argmax.iter().zip(grad_out.data()) {
        g[idx] += gv;
    }
    gin
}

/// Spatial mean of each channel map: `[N,C,H,W] -> [N,C,1,1]`.
pub fn global_avg_pool_forward(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    let hw = h * w;
    let out = input
        .data()
        .chunks(hw)
        .map(|p| p.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new(vec![n, c, 1, 1], out)
}

pub fn global_avg_pool_backward(grad_out: &Tensor, input_shape: &[usize]) -> Tensor {
    let hw = input_shape[2] * input_shape[3];
    let inv = 1.0 / hw as f64;
    let mut gin = Vec::with_capacity(grad_out.len() * hw);
    for &g in grad_out.data() {
        gin.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::new(input_shape.to_vec(), gin).expect("shape derived from input")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_average_of_small_map() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 1.0, 2.0]).unwrap();
        assert_eq!(global_avg_pool_forward(&x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn max_pool_picks_maximum() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = max_pool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn max_pool_tie_routes_to_first_index() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 5.0, 5.0, 5.0]).unwrap();
        let (_, arg) = max_pool_forward(&x, 2, 2).unwrap();
        assert_eq!(arg, vec![1]);
        let g = max_pool_backward(&Tensor::full(vec![1, 1, 1, 1], 1.0), x.shape(), &arg);
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn average_pool_keeps_constant_maps() {
        let x = Tensor::full(vec![2, 3, 8, 8], 0.7);
        let y = avg_pool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 4]);
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn window_larger_than_input_is_rejected() {
        let x = Tensor::zeros(vec![1, 1, 3, 3]);
        assert!(avg_pool_forward(&x, 4, 4).is_err());
        assert!(max_pool_forward(&x, 4, 1).is_err());
    }
}
