//! Random instances of every registered operation, for gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, DiffError, GradcheckError, GradcheckOptions, Tape, Tensor, Var};

pub type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, DiffError> + Send + Sync>;

pub struct OpInstance {
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

pub type OpBuilder = fn(&mut ChaCha8Rng) -> OpInstance;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for inputs to kinks and divisions.
fn rand_signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
}

fn inst(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var, DiffError> + Send + Sync + 'static) -> OpInstance {
    OpInstance { inputs, f: Box::new(f) }
}

fn add(r: &mut ChaCha8Rng) -> OpInstance {
    inst(vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4], -1.0, 1.0)], |t, v| t.add(v[0], v[1]))
}

fn sub(r: &mut ChaCha8Rng) -> OpInstance {
    inst(vec![rand_tensor(r, &[2, 1, 3], -1.0, 1.0), rand_tensor(r, &[4, 1], -1.0, 1.0)], |t, v| t.sub(v[0], v[1]))
}

fn mul(r: &mut ChaCha8Rng) -> OpInstance {
    inst(vec![rand_tensor(r, &[3, 1, 2], -1.0, 1.0), rand_tensor(r, &[1, 4, 2], -1.0, 1.0)], |t, v| t.mul(v[0], v[1]))
}

fn div(r: &mut ChaCha8Rng) -> OpInstance {
    inst(vec![rand_tensor(r, &[3, 2], -1.0, 1.0), rand_signed(r, &[2], 0.5, 2.0)], |t, v| t.div(v[0], v[1]))
}

fn scale(r: &mut ChaCha8Rng) -> OpInstance {
    let c = r.gen_range(-3.0..3.0);
    inst(vec![rand_tensor(r, &[5], -1.0, 1.0)], move |t, v| t.scale(v[0], c))
}

fn add_scalar(r: &mut ChaCha8Rng) -> OpInstance {
    let c = r.gen_range(-3.0..3.0);
    inst(vec![rand_tensor(r, &[5], -1.0, 1.0)], move |t, v| t.add_scalar(v[0], c))
}

fn matmul(r: &mut ChaCha8Rng) -> OpInstance {
    inst(vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4, 2], -1.0, 1.0)], |t, v| t.matmul(v[0], v[1]))
}

fn conv2d(r: &mut ChaCha8Rng) -> OpInstance {
    let stride = r.gen_range(1..=2);
    inst(
        vec![rand_tensor(r, &[2, 2, 7, 6], -1.0, 1.0), rand_tensor(r, &[3, 2, 3, 3], -1.0, 1.0), rand_tensor(r, &[3], -1.0, 1.0)],
        move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, 1),
    )
}

fn relu(r: &mut ChaCha8Rng) -> OpInstance {
    inst(vec![rand_signed(r, &[6], 0.05, 1.0)], |t, v| t.relu(v[0]))
}

fn sigmoid(r: &mut ChaCha8Rng) -> OpInstance {
    inst(vec![rand_tensor(r, &[6], -4.0, 4.0)], |t, v| t.sigmoid(v[0]))
}

fn exp(r: &mut ChaCha8Rng) -> OpInstance {
    inst(vec![rand_tensor(r, &[6], -2.0, 2.0)], |t, v| t.exp(v[0]))
}

fn abs(r: &mut ChaCha8Rng) -> OpInstance {
    inst(vec![rand_signed(r, &[6], 0.05, 1.0)], |t, v| t.abs(v[0]))
}

fn clamp_min(r: &mut ChaCha8Rng) -> OpInstance {
    inst(vec![rand_signed(r, &[6], 0.05, 1.0)], |t, v| t.clamp_min(v[0], 0.0))
}

fn softmax(r: &mut ChaCha8Rng) -> OpInstance {
    let axis = r.gen_range(0..2);
    inst(vec![rand_tensor(r, &[3, 5], -2.0, 2.0)], move |t, v| t.softmax(v[0], axis))
}

fn concat(r: &mut ChaCha8Rng) -> OpInstance {
    inst(vec![rand_tensor(r, &[2, 3], -1.0, 1.0), rand_tensor(r, &[2, 1], -1.0, 1.0)], |t, v| t.concat(&[v[0], v[1]], 1))
}

fn reshape(r: &mut ChaCha8Rng) -> OpInstance {
    inst(vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0)], |t, v| t.reshape(v[0], &[6, 4]))
}

fn slice(r: &mut ChaCha8Rng) -> OpInstance {
    inst(vec![rand_tensor(r, &[3, 5], -1.0, 1.0)], |t, v| t.slice(v[0], 1, 1, 4))
}

fn permute(r: &mut ChaCha8Rng) -> OpInstance {
    inst(vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0)], |t, v| t.permute(v[0], &[2, 0, 1]))
}

fn reduce_sum(r: &mut ChaCha8Rng) -> OpInstance {
    inst(vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0)], |t, v| t.reduce_sum(v[0], 1))
}

fn reduce_mean(r: &mut ChaCha8Rng) -> OpInstance {
    inst(vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0)], |t, v| t.reduce_mean(v[0], 2))
}

fn sum_all(r: &mut ChaCha8Rng) -> OpInstance {
    inst(vec![rand_tensor(r, &[3, 3], -1.0, 1.0)], |t, v| t.sum_all(v[0]))
}

fn exclusive_cumprod(r: &mut ChaCha8Rng) -> OpInstance {
    inst(vec![rand_tensor(r, &[3, 5], 0.1, 1.0)], |t, v| t.exclusive_cumprod(v[0]))
}

/// Coordinates away from lattice lines, partly outside the lattice.
fn off_lattice(r: &mut ChaCha8Rng, n: usize, dims: &[usize]) -> Tensor {
    Tensor::from_fn(&[n, dims.len()], |i| {
        let extent = dims[i % dims.len()] as f64;
        let cell = r.gen_range(-1..extent as i64) as f64;
        cell + r.gen_range(0.05..0.95)
    })
}

fn bilinear_sample_2d(r: &mut ChaCha8Rng) -> OpInstance {
    let coords = off_lattice(r, 6, &[5, 4]);
    inst(vec![rand_tensor(r, &[2, 4, 5], -1.0, 1.0), coords], |t, v| t.bilinear_sample_2d(v[0], v[1]))
}

fn trilinear_sample_3d(r: &mut ChaCha8Rng) -> OpInstance {
    let coords = off_lattice(r, 6, &[4, 3, 2]);
    inst(vec![rand_tensor(r, &[2, 2, 3, 4], -1.0, 1.0), coords], |t, v| t.trilinear_sample_3d(v[0], v[1]))
}

fn scatter_add(r: &mut ChaCha8Rng) -> OpInstance {
    let index: Vec<Option<usize>> = (0..7).map(|_| if r.gen_bool(0.2) { None } else { Some(r.gen_range(0..4)) }).collect();
    inst(vec![rand_tensor(r, &[2, 7], -1.0, 1.0)], move |t, v| t.scatter_add(v[0], &index, 4))
}

/// Every differentiable operation with a random-instance builder.
pub fn registered_ops() -> Vec<(&'static str, OpBuilder)> {
    vec![
        ("add", add),
        ("sub", sub),
        ("mul", mul),
        ("div", div),
        ("scale", scale),
        ("add_scalar", add_scalar),
        ("matmul", matmul),
        ("conv2d", conv2d),
        ("relu", relu),
        ("sigmoid", sigmoid),
        ("exp", exp),
        ("abs", abs),
        ("clamp_min", clamp_min),
        ("softmax", softmax),
        ("concat", concat),
        ("reshape", reshape),
        ("slice", slice),
        ("permute", permute),
        ("reduce_sum", reduce_sum),
        ("reduce_mean", reduce_mean),
        ("sum_all", sum_all),
        ("exclusive_cumprod", exclusive_cumprod),
        ("bilinear_sample_2d", bilinear_sample_2d),
        ("trilinear_sample_3d", trilinear_sample_3d),
        ("scatter_add", scatter_add),
    ]
}

/// Max relative error of `builder` over `instances` random draws. A draw
/// landing on a kink is redrawn (up to 20 times per instance).
pub fn check_op(builder: OpBuilder, instances: usize, seed: u64) -> Result<f64, GradcheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradcheckOptions { perturbation: 1e-6, ..Default::default() };
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let mut attempts = 0;
        loop {
            let case = builder(&mut rng);
            match gradcheck(&case.f, &case.inputs, &opts) {
                Ok(report) => {
                    worst = worst.max(report.max_rel_error);
                    break;
                }
                Err(GradcheckError::NonDifferentiable { .. }) if attempts < 20 => attempts += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(worst)
}
