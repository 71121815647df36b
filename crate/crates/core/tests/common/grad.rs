//! Finite-difference cases for every differentiable op.

use augdiff::attention::multi_head;
use augdiff::diffusion::NoisePredictor;
use augdiff::lora::{effective_forward, LoraLayer};
use augdiff::model::DiffusionModel;
use augdiff::rng::RngStream;
use augdiff::tensor::ops::{Conv2dGeom, KeyMask};
use augdiff::tensor::{backward, no_grad, Tensor};
use augdiff::Result;

use super::{fd_check, fd_slope, rel_err};

type Inputs = Vec<(Vec<usize>, Vec<f32>)>;

pub struct OpCase {
    pub name: &'static str,
    pub make: fn(&mut RngStream) -> Inputs,
    pub f: fn(&[Tensor]) -> Result<Tensor>,
}

fn normal(shape: &[usize], rng: &mut RngStream) -> (Vec<usize>, Vec<f32>) {
    let n = shape.iter().product();
    (shape.to_vec(), rng.normal_vec(n, 0.0, 1.0))
}

/// Values at least 0.05 away from zero so kinks stay outside the stencil.
fn off_zero(shape: &[usize], rng: &mut RngStream) -> (Vec<usize>, Vec<f32>) {
    let (s, mut d) = normal(shape, rng);
    d.iter_mut().for_each(|v| *v = v.signum() * (0.05 + v.abs()));
    (s, d)
}

fn key_mask() -> KeyMask {
    KeyMask::new(2, 4, vec![true, true, false, true, true, false, false, true]).unwrap()
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "matmul", make: |r| vec![normal(&[3, 4], r), normal(&[4, 5], r)], f: |t| t[0].matmul(&t[1]) },
        OpCase { name: "bmm", make: |r| vec![normal(&[2, 3, 4], r), normal(&[2, 4, 5], r)], f: |t| t[0].bmm(&t[1]) },
        OpCase { name: "add", make: |r| vec![normal(&[3, 4], r), normal(&[3, 4], r)], f: |t| t[0].add(&t[1]) },
        OpCase { name: "sub", make: |r| vec![normal(&[3, 4], r), normal(&[3, 4], r)], f: |t| t[0].sub(&t[1]) },
        OpCase { name: "mul", make: |r| vec![normal(&[3, 4], r), normal(&[3, 4], r)], f: |t| t[0].mul(&t[1]) },
        OpCase { name: "scale", make: |r| vec![normal(&[3, 4], r)], f: |t| t[0].scale(-1.7) },
        OpCase { name: "add_bias", make: |r| vec![normal(&[3, 4], r), normal(&[4], r)], f: |t| t[0].add_bias(&t[1]) },
        OpCase {
            name: "add_channel",
            make: |r| vec![normal(&[2, 3, 2, 2], r), normal(&[2, 3], r)],
            f: |t| t[0].add_channel(&t[1]),
        },
        OpCase { name: "silu", make: |r| vec![normal(&[3, 4], r)], f: |t| t[0].silu() },
        OpCase { name: "relu", make: |r| vec![off_zero(&[3, 4], r)], f: |t| t[0].relu() },
        OpCase { name: "softmax", make: |r| vec![normal(&[3, 5], r)], f: |t| t[0].softmax() },
        OpCase { name: "masked_softmax", make: |r| vec![normal(&[2, 3, 4], r)], f: |t| t[0].masked_softmax(&key_mask()) },
        OpCase { name: "reshape", make: |r| vec![normal(&[2, 6], r)], f: |t| t[0].reshape(&[3, 4]) },
        OpCase { name: "permute", make: |r| vec![normal(&[2, 3, 4], r)], f: |t| t[0].permute(&[2, 0, 1]) },
        OpCase { name: "transpose", make: |r| vec![normal(&[3, 4], r)], f: |t| t[0].t() },
        OpCase {
            name: "concat",
            make: |r| vec![normal(&[2, 3, 2], r), normal(&[2, 1, 2], r)],
            f: |t| Tensor::concat(&[t[0].clone(), t[1].clone()], 1),
        },
        OpCase { name: "embedding", make: |r| vec![normal(&[10, 4], r)], f: |t| t[0].embedding(&[1, 3, 3, 7, 0]) },
        OpCase {
            name: "fill_rows",
            make: |r| vec![normal(&[6, 4], r), normal(&[4], r)],
            f: |t| t[0].fill_rows(&[true, false, true, true, false, false], &t[1]),
        },
        OpCase { name: "sum", make: |r| vec![normal(&[3, 4], r)], f: |t| t[0].sum() },
        OpCase { name: "mean", make: |r| vec![normal(&[3, 4], r)], f: |t| t[0].mean() },
        OpCase { name: "mse", make: |r| vec![normal(&[3, 4], r), normal(&[3, 4], r)], f: |t| t[0].mse(&t[1]) },
        OpCase { name: "mean_spatial", make: |r| vec![normal(&[2, 3, 4, 4], r)], f: |t| t[0].mean_spatial() },
        OpCase { name: "cross_entropy", make: |r| vec![normal(&[4, 3], r)], f: |t| t[0].cross_entropy(&[0, 2, 1, 2]) },
        OpCase {
            name: "conv2d_same",
            make: |r| vec![normal(&[2, 3, 5, 5], r), normal(&[4, 3, 3, 3], r), normal(&[4], r)],
            f: |t| t[0].conv2d(&t[1], Some(&t[2]), Conv2dGeom { stride: 1, padding: 1 }),
        },
        OpCase {
            name: "conv2d_strided",
            make: |r| vec![normal(&[2, 2, 6, 6], r), normal(&[3, 2, 3, 3], r), normal(&[3], r)],
            f: |t| t[0].conv2d(&t[1], Some(&t[2]), Conv2dGeom { stride: 2, padding: 1 }),
        },
        OpCase {
            name: "conv2d_pointwise",
            make: |r| vec![normal(&[2, 3, 4, 4], r), normal(&[2, 3, 1, 1], r)],
            f: |t| t[0].conv2d(&t[1], None, Conv2dGeom { stride: 1, padding: 0 }),
        },
        OpCase { name: "upsample2x", make: |r| vec![normal(&[2, 2, 3, 3], r)], f: |t| t[0].upsample2x() },
        OpCase {
            name: "group_norm",
            make: |r| vec![normal(&[2, 4, 3, 3], r), normal(&[4], r), normal(&[4], r)],
            f: |t| t[0].group_norm(2, &t[1], &t[2], 1e-5),
        },
        OpCase {
            name: "attention",
            make: |r| vec![normal(&[6, 8], r), normal(&[8, 8], r), normal(&[8, 8], r)],
            f: |t| multi_head(&t[0], &t[1], &t[2], 2, 2, &key_mask()),
        },
        OpCase {
            name: "lora_effective_forward",
            make: |r| vec![normal(&[3, 6], r), normal(&[6, 5], r), normal(&[6, 2], r), normal(&[2, 5], r)],
            f: |t| effective_forward(&t[0], &t[1], &LoraLayer::new("w", t[2].clone(), t[3].clone(), 1.0)?),
        },
    ]
}

/// Worst relative error of one op over `draws` random inputs.
pub fn check_op(case: &OpCase, draws: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, case.name);
    (0..draws)
        .map(|_| {
            let inputs = (case.make)(&mut rng);
            fd_check(&inputs, &case.f, 6, &mut rng)
        })
        .fold(0.0, f64::max)
}

/// Worst relative error over `draws` random (parameter, entry) pairs of
/// the denoiser plus one input pixel per draw.
pub fn check_unet(model: &DiffusionModel, draws: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, "unet-fd");
    let [c, s, _] = model.image_shape();
    let n = 2;
    let z = rng.normal_vec(n * c * s * s, 0.0, 1.0);
    let t = vec![rng.below(model.schedule.len()), rng.below(model.schedule.len())];
    let cond = no_grad(|| model.encode_prompts(&["benign".into(), "dark ultrasound image of no tumor".into()])).unwrap();
    let zp = Tensor::param(&[n, c, s, s], z.clone()).unwrap();
    let y = model.predict_noise(&zp, &t, &cond).unwrap();
    let w = rng.normal_vec(y.len(), 0.0, 1.0);
    let loss = y.mul(&Tensor::new(y.shape(), w.clone()).unwrap()).unwrap().sum().unwrap();
    let grads = backward(&loss).unwrap();
    let eval = |m: &DiffusionModel, z: Vec<f32>| -> f64 {
        let zt = Tensor::new(&[n, c, s, s], z).unwrap();
        let y = no_grad(|| m.predict_noise(&zt, &t, &cond)).unwrap();
        y.data().iter().zip(&w).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum()
    };
    let names: Vec<String> = model.params.names().filter(|n| !n.starts_with("text.")).map(str::to_owned).collect();
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let name = &names[rng.below(names.len())];
        let p = model.params.get(name).unwrap();
        let g = grads.get_or_zeros(p);
        let i = rng.below(p.len());
        let numeric = fd_slope(p.data()[i], |v| {
            let mut data = p.to_vec();
            data[i] = v;
            let mut m = model.clone();
            m.params.set(name, Tensor::new(p.shape(), data).unwrap()).unwrap();
            eval(&m, z.clone())
        });
        worst = worst.max(rel_err(f64::from(g[i]), numeric));

        let gz = grads.get_or_zeros(&zp);
        let j = rng.below(z.len());
        let numeric = fd_slope(z[j], |v| {
            let mut moved = z.clone();
            moved[j] = v;
            eval(model, moved)
        });
        worst = worst.max(rel_err(f64::from(gz[j]), numeric));
    }
    worst
}
