//! Dense f64 tensors, a reverse-mode tape, parameters and seeded randomness.

pub mod gradcheck;
mod params;
mod rng;
mod tape;
mod tensor;

pub use params::{ParamId, ParamStore};
pub use rng::{gumbel_from_uniform, gumbel_sample, mix_seed, Rng, GUMBEL_EPS};
pub use tape::{sigmoid, softmax, Gradients, Tape, Var, MIN_NEIGHBOR_WEIGHT, MIN_ROW_NORM};
pub use tensor::Tensor;

/// Glorot-uniform initialisation for a `[fan_in, fan_out]` weight.
pub fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.uniform_range(-a, a)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("sized")
}

/// Uniform `[-a, a]` tensor.
pub fn uniform_tensor(rng: &mut Rng, shape: &[usize], a: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-a, a)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_tensor, rel_err};
    use super::*;
    use crate::error::Result;

    fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor {
        uniform_tensor(rng, shape, 2.0).with_grad()
    }

    /// Checks d(sum(w * f(x)))/dx with a fixed random weighting `w`.
    fn check_unary(shape: &[usize], seed: u64, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> f64 {
        let mut rng = Rng::new(seed);
        let x = rand_t(&mut rng, shape);
        let run = |x: &Tensor, tape: &mut Tape| -> Result<(Var, Var)> {
            let xv = tape.leaf(x.clone());
            let y = f(tape, xv)?;
            let n = tape.value(y).len();
            let w = Tensor::new(
                tape.shape(y).to_vec(),
                (0..n).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3 + 0.1).collect(),
            )?;
            let wv = tape.constant(w);
            let p = tape.mul(y, wv)?;
            Ok((xv, tape.sum(p)))
        };
        let mut tape = Tape::new();
        let (xv, loss) = run(&x, &mut tape).unwrap();
        let g = tape.backward(loss).unwrap();
        let analytic = g.get(xv).unwrap().to_vec();
        let coords: Vec<usize> = (0..x.numel()).collect();
        check_tensor(&x, &analytic, &coords, 1e-5, 1e-6, |xp| {
            let mut t = Tape::new();
            let (_, l) = run(xp, &mut t)?;
            Ok(t.scalar_value(l))
        })
        .unwrap()
        .max_rel_err
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.sigmoid(x);
        assert_eq!(t.scalar_value(y), 0.5);
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![3.3; 4]));
        let y = t.softmax(x);
        for v in t.value(y) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_of_matmul() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.leaf(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[3.0, 7.0]);
        let m = t.mean(c);
        assert_eq!(t.scalar_value(m), 5.0);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2, 3]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0).with_grad());
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0).with_grad());
        let y = t.sigmoid(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.25]);
    }

    #[test]
    fn non_scalar_backward_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2, 2]).with_grad());
        let y = t.relu(x);
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let w = t.leaf(Tensor::scalar(3.0).with_grad());
        let y = t.mul(x, w).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap(), &[2.0]);
    }

    #[test]
    fn param_grads_accumulate_until_zeroed() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(3.0)).unwrap();
        for _ in 0..2 {
            let mut t = Tape::new();
            let w = t.param(&store, id);
            let y = t.mul(w, w).unwrap();
            let g = t.backward(y).unwrap();
            t.accumulate_into(&g, &mut store);
        }
        assert_eq!(store.grad(id), &[12.0]);
        store.zero_grad();
        assert_eq!(store.grad(id), &[0.0]);
    }

    #[test]
    fn three_layer_network_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let x = uniform_tensor(&mut rng, &[5, 4], 2.0);
        let mut store = ParamStore::new();
        let w1 = store.add("w1", glorot(&mut rng, 4, 6)).unwrap();
        let b1 = store.add("b1", uniform_tensor(&mut rng, &[6], 0.5)).unwrap();
        let w2 = store.add("w2", glorot(&mut rng, 6, 6)).unwrap();
        let w3 = store.add("w3", glorot(&mut rng, 6, 1)).unwrap();
        let forward = |store: &ParamStore, tape: &mut Tape| -> Result<Var> {
            let xv = tape.constant(x.clone());
            let p1 = tape.param(store, w1);
            let pb = tape.param(store, b1);
            let h = tape.matmul(xv, p1)?;
            let h = tape.add_bias(h, pb)?;
            let h = tape.sigmoid(h);
            let p2 = tape.param(store, w2);
            let h = tape.matmul(h, p2)?;
            let h = tape.relu(h);
            let p3 = tape.param(store, w3);
            let o = tape.matmul(h, p3)?;
            let o = tape.mul(o, o)?;
            Ok(tape.mean(o))
        };
        let mut tape = Tape::new();
        let loss = forward(&store, &mut tape).unwrap();
        let g = tape.backward(loss).unwrap();
        tape.accumulate_into(&g, &mut store);
        let mut worst: f64 = 0.0;
        for id in store.ids().collect::<Vec<_>>() {
            let analytic = store.grad(id).to_vec();
            let coords: Vec<usize> = (0..analytic.len()).collect();
            let fd = gradcheck::param_finite_diff(&mut store, id, &coords, 1e-5, |s| {
                let mut t = Tape::new();
                let l = forward(s, &mut t)?;
                Ok(t.scalar_value(l))
            })
            .unwrap();
            for (a, f) in analytic.iter().zip(&fd) {
                worst = worst.max(rel_err(*a, *f, 1e-6));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        type OpFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;
        let w = Tensor::matrix(
            4,
            3,
            vec![0.3, -0.2, 0.5, 1.1, 0.7, -0.4, -0.9, 0.2, 0.6, 0.1, -1.3, 0.8],
        )
        .unwrap();
        let w2 = w.clone();
        let ops: Vec<(&str, OpFn)> = vec![
            (
                "matmul_left",
                Box::new(move |t, x| {
                    let c = t.constant(w.clone());
                    t.matmul(x, c)
                }),
            ),
            (
                "matmul_right",
                Box::new(move |t, x| {
                    let c = t.constant(w2.clone().reshape(vec![2, 6])?);
                    let y = t.matmul(c, x)?;
                    t.transpose(y)
                }),
            ),
            ("add_self", Box::new(|t, x| t.add(x, x))),
            (
                "sub",
                Box::new(|t, x| {
                    let y = t.scale(x, 0.5);
                    let y = t.mul(y, x)?;
                    t.sub(x, y)
                }),
            ),
            ("mul", Box::new(|t, x| t.mul(x, x))),
            (
                "add_bias",
                Box::new(|t, x| {
                    let b = t.gather(x, vec![0, 1, 2, 3], &[4])?;
                    t.add_bias(x, b)
                }),
            ),
            (
                "scale_by",
                Box::new(|t, x| {
                    let s = t.gather(x, vec![5], &[1])?;
                    t.scale_by(x, s)
                }),
            ),
            ("relu", Box::new(|t, x| Ok(t.relu(x)))),
            ("sigmoid", Box::new(|t, x| Ok(t.sigmoid(x)))),
            ("exp", Box::new(|t, x| Ok(t.exp(x)))),
            (
                "log",
                Box::new(|t, x| {
                    let y = t.mul(x, x)?;
                    let y = t.add_scalar(y, 0.5);
                    Ok(t.log(y))
                }),
            ),
            ("clamp", Box::new(|t, x| Ok(t.clamp(x, -1.5, 1.5)))),
            (
                "concat_cols",
                Box::new(|t, x| {
                    let y = t.sigmoid(x);
                    t.concat_cols(x, y)
                }),
            ),
            (
                "concat_rows",
                Box::new(|t, x| {
                    let y = t.exp(x);
                    t.concat_rows(&[x, y, x])
                }),
            ),
            (
                "sum",
                Box::new(|t, x| {
                    let y = t.mul(x, x)?;
                    Ok(t.sum(y))
                }),
            ),
            (
                "mean",
                Box::new(|t, x| {
                    let y = t.exp(x);
                    Ok(t.mean(y))
                }),
            ),
            (
                "mean_rows",
                Box::new(|t, x| {
                    let y = t.mul(x, x)?;
                    t.mean_rows(y)
                }),
            ),
            (
                "group_mean_rows",
                Box::new(|t, x| {
                    let y = t.mul(x, x)?;
                    t.group_mean_rows(y, 3)
                }),
            ),
            ("softmax", Box::new(|t, x| Ok(t.softmax(x)))),
            ("log_softmax_rows", Box::new(|t, x| Ok(t.log_softmax_rows(x)))),
            ("l2_normalize_rows", Box::new(|t, x| t.l2_normalize_rows(x))),
            ("gather", Box::new(|t, x| t.gather(x, vec![3, 3, 0, 11, 7, 3], &[2, 3]))),
            ("gather_rows", Box::new(|t, x| t.gather_rows(x, vec![2, 0, 2, 5]))),
            (
                "reshape",
                Box::new(|t, x| {
                    let y = t.reshape(x, &[3, 8])?;
                    let y = t.mul(y, y)?;
                    t.mean_rows(y)
                }),
            ),
            (
                "neighbor_mean",
                Box::new(|t, x| {
                    let w = t.gather(x, vec![0, 5, 9, 13, 17, 21], &[6])?;
                    let w = t.sigmoid(w);
                    t.neighbor_mean(x, w, vec![0, 1, 2, 3, 4, 1], vec![1, 0, 0, 4, 3, 2])
                }),
            ),
        ];
        for (name, f) in ops {
            for seed in 0..3 {
                let err = check_unary(&[6, 4], seed, &f);
                assert!(err < 1e-4, "{name} seed {seed}: relative error {err}");
            }
        }
    }

    #[test]
    fn softmax_sums_to_one_and_is_positive() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let x = uniform_tensor(&mut rng, &[7], 30.0);
            let y = softmax(x.data());
            let s: f64 = y.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(y.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn l2_normalize_gives_unit_rows() {
        let mut rng = Rng::new(4);
        let mut t = Tape::new();
        let x = t.leaf(uniform_tensor(&mut rng, &[10, 5], 100.0));
        let y = t.l2_normalize_rows(x).unwrap();
        for r in t.value(y).chunks(5) {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let z = t.leaf(Tensor::zeros(&[1, 5]));
        assert!(t.l2_normalize_rows(z).is_err());
    }

    #[test]
    fn neighbor_mean_zero_weight_is_isolated() {
        let mut t = Tape::new();
        let h = t.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 3.0, 2.0]).unwrap().with_grad());
        let w = t.leaf(Tensor::new(vec![1], vec![0.0]).unwrap().with_grad());
        let m = t.neighbor_mean(h, w, vec![1], vec![0]).unwrap();
        assert_eq!(t.value(m), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut rng = Rng::new(77);
            let mut t = Tape::new();
            let x = t.leaf(uniform_tensor(&mut rng, &[4, 4], 2.0).with_grad());
            let g = t.leaf(gumbel_sample(&mut rng, 16).reshape(vec![4, 4]).unwrap());
            let y = t.add(x, g).unwrap();
            let y = t.log_softmax_rows(y);
            let l = t.sum(y);
            let gr = t.backward(l).unwrap();
            (
                t.scalar_value(l).to_bits(),
                gr.get(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
