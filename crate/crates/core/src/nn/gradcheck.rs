use std::collections::BTreeMap;

use super::graph::{Bindings, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Below this magnitude on both sides the comparison is absolute.
const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// How many times the roundoff resolution of the difference quotient a
/// derivative must exceed before its relative error is taken at face value.
const RESOLUTION_MARGIN: f64 = 1e5;

/// Error between an analytic and a numeric derivative: relative when either
/// is at least [`ABS_FLOOR`], absolute otherwise.
pub fn derivative_error(analytic: f64, numeric: f64) -> f64 {
    resolved_error(analytic, numeric, 0.0)
}

/// Like [`derivative_error`], but the relative denominator never drops below
/// `resolution`, the smallest derivative the finite difference can measure.
fn resolved_error(analytic: f64, numeric: f64, resolution: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FLOOR {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale.max(resolution)
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with step `eps`, in double precision. At most `max_coords`
/// coordinates per parameter are perturbed (evenly strided).
pub fn gradient_check<L>(
    params: &BTreeMap<String, Tensor<f64>>,
    eps: f64,
    max_coords: usize,
    f: L,
) -> Result<GradCheckReport>
where
    L: Fn(&mut Graph<f64>, &Bindings) -> Result<Var>,
{
    let eval = |p: &BTreeMap<String, Tensor<f64>>| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let b = g.bind(p);
        let loss = f(&mut g, &b)?;
        let v = g.value(loss);
        if v.len() != 1 || !v.item().is_finite() {
            return Err(Error::GradCheck("loss is not a finite scalar".into()));
        }
        Ok(v.item())
    };

    let mut g = Graph::<f64>::new();
    let b = g.bind(params);
    let loss = f(&mut g, &b)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::GradCheck("loss is not finite".into()));
    }
    let analytic = g.backward(loss)?.named(&g, &b);
    // each loss evaluation carries ~|L|*ulp of rounding, amplified by 1/eps
    let resolution = RESOLUTION_MARGIN * g.value(loss).item().abs() * f64::EPSILON / eps;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work = params.clone();
    for (name, t) in params {
        let n = t.len();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = t.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = resolved_error(analytic[name].data()[i], numeric, resolution);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::*;
    use crate::nn::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn input(shape: &[usize], k: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i as f64 + 1.0) * k).sin()).collect()).unwrap()
    }

    fn sq_loss(g: &mut Graph<f64>, y: Var, target: &Tensor<f64>) -> Result<Var> {
        let t = g.constant(target.clone());
        let d = g.sub(y, t)?;
        let s = g.mul(d, d)?;
        Ok(g.mean(s))
    }

    #[test]
    fn linear_squared_loss() {
        let lin = Linear::new("l", 4, 3);
        let mut s = ParamStore::new(0);
        lin.init(&mut s, Init::Default, &mut rng()).unwrap();
        let x = input(&[5, 4], 0.7);
        let target = input(&[5, 3], 1.3);
        let r = gradient_check(&s.tensors(), 1e-3, 1000, |g, p| {
            let xv = g.constant(x.clone());
            let y = lin.forward(g, p, xv)?;
            sq_loss(g, y, &target)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn film_block() {
        let f = FilmGenerator::new("f", 3, 6, 4);
        let mut s = ParamStore::new(0);
        f.init(&mut s, &mut rng()).unwrap();
        // move the output layer off zero so every path carries gradient
        let mut p = s.tensors::<f64>();
        for v in p.get_mut("f.o.w").unwrap().data_mut().iter_mut().enumerate() {
            *v.1 = ((v.0 as f64) * 0.37).cos() * 0.3;
        }
        let x = input(&[3, 2, 4], 0.4);
        let c = input(&[3, 3], 0.9);
        let target = input(&[3, 2, 4], 2.1);
        let r = gradient_check(&p, 1e-3, 1000, |g, p| {
            let xv = g.constant(x.clone());
            let cv = g.constant(c.clone());
            let y = f.apply(g, p, xv, cv)?;
            sq_loss(g, y, &target)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn constant_module_uses_absolute_rule() {
        let mut p = BTreeMap::new();
        p.insert("unused".to_string(), input(&[3], 1.0));
        let r = gradient_check(&p, 1e-3, 10, |g, _| Ok(g.constant(Tensor::scalar(4.0)))).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_err < 1e-8);
        assert_eq!(derivative_error(1e-9, 0.0), 1e-9);
        assert!((derivative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn resolution_only_guards_unmeasurable_derivatives() {
        // roundoff-sized disagreement on a tiny derivative
        assert!(resolved_error(1.643e-7, 1.6414e-7, 1e-6) < 2e-4);
        // a derivative off by half is still caught above the resolution
        assert!((resolved_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!(resolved_error(2e-6, 1e-6, 1e-6) >= 0.5);
    }

    #[test]
    fn encoder_block() {
        let enc = TransformerEncoder::new("e", 8, 1, 2, 2).unwrap();
        let mut s = ParamStore::new(0);
        enc.init(&mut s, &mut rng()).unwrap();
        let mut p = s.tensors::<f64>();
        // non-trivial norm parameters
        for (name, t) in p.iter_mut() {
            if name.ends_with(".g") || name.ends_with("ln1.b") {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v += 0.1 * (i as f64).sin();
                }
            }
        }
        let x = input(&[4, 8], 0.3);
        let target = input(&[4, 8], 0.8);
        let r = gradient_check(&p, 1e-3, 40, |g, p| {
            let xv = g.constant(x.clone());
            let y = enc.forward(g, p, xv)?;
            sq_loss(g, y, &target)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn temporal_resnet_block() {
        let net = TemporalResNet::new("r", 3, 2, 3).unwrap();
        let mut s = ParamStore::new(0);
        net.init(&mut s, &mut rng()).unwrap();
        let mut p = s.tensors::<f64>();
        for (name, t) in p.iter_mut() {
            if name.contains("conv2") {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = 0.2 * ((i as f64) * 1.7).sin();
                }
            }
        }
        let x = input(&[6, 3], 0.5);
        let target = input(&[6, 3], 1.1);
        let r = gradient_check(&p, 1e-3, 1000, |g, p| {
            let xv = g.constant(x.clone());
            let y = net.forward(g, p, xv)?;
            sq_loss(g, y, &target)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn graph_conv_strided_conv_and_upsample() {
        let gc = GraphConv::new("gc", 2, 3, 2);
        let mut s = ParamStore::new(0);
        gc.init(&mut s, Init::Default, &mut rng()).unwrap();
        s.init_normal("cw", &[3, 3, 3], 0.4, &mut rng()).unwrap();
        s.init_const("cb", &[3], 0.1).unwrap();
        let adj = vec![input(&[4, 4], 0.2), input(&[4, 4], 0.6)];
        let x = input(&[5, 4, 2], 0.45);
        let target = input(&[5, 2, 3], 0.33);
        let r = gradient_check(&s.tensors(), 1e-3, 1000, |g, p| {
            let xv = g.constant(x.clone());
            let h = gc.forward(g, p, xv, &adj)?;
            let h = g.conv1d(h, p.get("cw")?, p.get("cb")?, 2)?;
            let h = g.upsample2(h, 5)?;
            let h = g.gather(h, &[1, 3])?;
            let h = g.silu(h);
            sq_loss(g, h, &target)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn norms_and_nonsmooth_ops() {
        let mut p = BTreeMap::new();
        p.insert("a".to_string(), input(&[4, 3], 0.8).map(|v| v * 3.0));
        let r = gradient_check(&p, 1e-4, 100, |g, p| {
            let a = p.get("a")?;
            let n = g.norm_last(a);
            let c = g.clamp(a, -1.5, 1.5);
            let ab = g.abs(c);
            let r = g.relu(a);
            let narrow = g.narrow(r, 1, 2)?;
            let cat = g.concat_cols(&[ab, ab])?;
            let s1 = g.sum(n);
            let s2 = g.mean(cat);
            let s3 = g.sum(narrow);
            let t = g.add(s1, s2)?;
            let t = g.add(t, s3)?;
            let d = g.div(t, s1)?;
            Ok(g.mul(d, t)?)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }
}
