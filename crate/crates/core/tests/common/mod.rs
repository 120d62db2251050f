#![allow(dead_code)]

pub mod criteria;
pub mod oracles;

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use protoscan_core::rng::{self, streams, Rng};
use protoscan_core::tensor::{finite_diff_grad, Tape, Tensor, Var};
use protoscan_core::Result;

/// Input sampling domain of one operand.
#[derive(Clone, Copy)]
pub enum Domain {
    Normal,
    /// Uniform on `[lo, hi]`.
    Uniform(f64, f64),
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Domain)>,
    pub build: Box<Build>,
}

fn case(name: &'static str, inputs: Vec<(Vec<usize>, Domain)>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync + 'static) -> Case {
    Case { name, inputs, build: Box::new(build) }
}

fn n(shape: &[usize]) -> (Vec<usize>, Domain) {
    (shape.to_vec(), Domain::Normal)
}

fn u(shape: &[usize], lo: f64, hi: f64) -> (Vec<usize>, Domain) {
    (shape.to_vec(), Domain::Uniform(lo, hi))
}

/// Every differentiable tape primitive, each with operand shapes and domains.
pub fn primitive_cases() -> Vec<Case> {
    let perm: Arc<[usize]> = Arc::from(vec![3, 0, 4, 1, 2]);
    let perm2 = perm.clone();
    vec![
        case("add", vec![n(&[3, 4]), n(&[3, 4])], |t, v| t.add(v[0], v[1])),
        case("sub", vec![n(&[3, 4]), n(&[3, 4])], |t, v| t.sub(v[0], v[1])),
        case("mul", vec![n(&[3, 4]), n(&[3, 4])], |t, v| t.mul(v[0], v[1])),
        case("scale", vec![n(&[5])], |t, v| Ok(t.scale(v[0], -1.7))),
        case("silu", vec![n(&[6])], |t, v| Ok(t.silu(v[0]))),
        case("exp", vec![n(&[6])], |t, v| Ok(t.exp(v[0]))),
        case("softplus", vec![n(&[6])], |t, v| Ok(t.softplus(v[0]))),
        case("matmul", vec![n(&[3, 4]), n(&[4, 2])], |t, v| t.matmul(v[0], v[1])),
        case("add_row", vec![n(&[3, 4]), n(&[4])], |t, v| t.add_row(v[0], v[1])),
        case("conv2d", vec![n(&[2, 5, 5]), n(&[3, 2, 3, 3]), n(&[3])], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        case("conv2d_strided", vec![n(&[2, 6, 6]), n(&[2, 2, 3, 3])], |t, v| t.conv2d(v[0], v[1], None, 2, 1)),
        case("dwconv1d", vec![n(&[7, 3]), n(&[3, 4]), n(&[3])], |t, v| t.dwconv1d(v[0], v[1], v[2])),
        case("layer_norm", vec![n(&[3, 5]), n(&[5]), n(&[5])], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        case("sum", vec![n(&[2, 3])], |t, v| Ok(t.sum(v[0]))),
        case("mean", vec![n(&[2, 3])], |t, v| Ok(t.mean(v[0]))),
        case("reshape", vec![n(&[2, 6])], |t, v| t.reshape(v[0], [3, 4])),
        case("transpose", vec![n(&[3, 4])], |t, v| t.transpose(v[0])),
        case("gather_rows", vec![n(&[5, 2])], move |t, v| t.gather_rows(v[0], perm.clone())),
        case("scatter_rows", vec![n(&[5, 2])], move |t, v| t.scatter_rows(v[0], perm2.clone())),
        case("cosine_rows", vec![n(&[4, 3]), n(&[4, 3])], |t, v| t.cosine_rows(v[0], v[1])),
        case("mse", vec![n(&[3, 3]), n(&[3, 3])], |t, v| t.mse(v[0], v[1])),
        case("avg_pool2", vec![n(&[2, 4, 6])], |t, v| t.avg_pool2(v[0])),
        case("upsample_nearest2", vec![n(&[2, 3, 2])], |t, v| t.upsample_nearest2(v[0])),
        case("pad_reflect", vec![n(&[2, 4, 5])], |t, v| t.pad_reflect(v[0], 2)),
        case("upsample_bilinear", vec![n(&[2, 3, 3])], |t, v| t.upsample_bilinear(v[0], 6, 9)),
        case(
            "selective_scan",
            vec![n(&[9, 3]), u(&[9, 3], 0.05, 1.0), u(&[3, 2], -2.0, -0.1), n(&[9, 2]), n(&[9, 2]), n(&[3])],
            |t, v| t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]),
        ),
        case("window_distance", vec![n(&[2, 16, 3]), n(&[16, 3])], |t, v| t.window_distance(v[0], v[1], 4, 4, 3)),
    ]
}

fn sample(rng: &mut Rng, shape: &[usize], d: Domain) -> Vec<f64> {
    let numel: usize = shape.iter().product();
    (0..numel)
        .map(|_| match d {
            Domain::Normal => StandardNormal.sample(rng),
            Domain::Uniform(lo, hi) => rng.random_range(lo..hi),
        })
        .collect()
}

/// Scalar objective `sum(out * proj)` and its tape gradient.
fn evaluate(case: &Case, point: &[f64], proj: &mut Option<Vec<f64>>, proj_rng: &mut Rng, grad: bool) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let mut off = 0;
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|(shape, _)| {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape.clone(), point[off..off + n].to_vec()).unwrap();
            off += n;
            if grad {
                tape.leaf(t.requiring_grad())
            } else {
                tape.constant(t)
            }
        })
        .collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    let shape = tape.shape(out).to_vec();
    let p = proj.get_or_insert_with(|| sample(proj_rng, &shape, Domain::Normal)).clone();
    let p = tape.constant(Tensor::new(shape, p).unwrap());
    let prod = tape.mul(out, p).unwrap();
    let loss = tape.sum(prod);
    let value = tape.data(loss)[0];
    if !grad {
        return (value, Vec::new());
    }
    let mut g = tape.backward(loss).unwrap();
    let flat = vars.iter().flat_map(|&v| g.take(v).unwrap()).collect();
    (value, flat)
}

/// Largest relative error of analytic vs central-difference gradients over
/// `points` random points. Near-zero gradients are compared against `floor`.
pub fn check_case(case: &Case, points: usize, seed: u64, step: f64, floor: f64) -> f64 {
    let mut rng = rng::indexed(seed, streams::TESTS, case.name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)));
    let mut worst = 0.0f64;
    for _ in 0..points {
        let point: Vec<f64> = case.inputs.iter().flat_map(|(s, d)| sample(&mut rng, s, *d)).collect();
        let mut proj = None;
        let (_, analytic) = evaluate(case, &point, &mut proj, &mut rng, true);
        let numeric = finite_diff_grad(|x| evaluate(case, x, &mut proj.clone(), &mut rng.clone(), false).0, &point, step).unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(floor));
        }
    }
    worst
}
