//! Registry of gradient checks runnable from the command line.
//!
//! Each entry builds a small f64 instance of one operation or block and
//! compares its taped gradient against central differences at step 1e-5.

use gdgt_core::attention::{DdsaConfig, Ddsa, Dmrsa, RwinAttention};
use gdgt_core::dfa::Dfa;
use gdgt_core::dgg::Dgg;
use gdgt_core::geometry::distortion_map;
use gdgt_core::gradcheck::grad_check;
use gdgt_core::model::{Dal, Gdgt, ModelConfig};
use gdgt_core::params::{Binding, ParamBuilder, ParamStore};
use gdgt_core::tape::{PadMode, Tape, Var};
use gdgt_core::tensor::Tensor;
use gdgt_core::windowing::WindowSpec;
use gdgt_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

pub struct CheckOutcome {
    pub name: &'static str,
    pub max_relative_error: f64,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn run(
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync,
    point: &[Tensor<f64>],
) -> Result<f64> {
    grad_check(&f, point, STEP)
}

type CheckFn = fn() -> Result<f64>;

pub const MODULES: &[(&str, CheckFn)] = &[
    ("matmul", check_matmul),
    ("softmax", check_softmax),
    ("conv2d", check_conv2d),
    ("depthwise-separable", check_depthwise),
    ("bilinear-sample", check_bilinear),
    ("pixel-shuffle", check_pixel_shuffle),
    ("layer-norm", check_layer_norm),
    ("window-partition", check_windows),
    ("rpe", check_rpe),
    ("dgg", check_dgg),
    ("rwin-sa", check_rwin),
    ("dmrsa", check_dmrsa),
    ("ddsa", check_ddsa),
    ("dfa", check_dfa),
    ("dal", check_dal),
    ("model", check_model),
];

pub fn names() -> Vec<&'static str> {
    MODULES.iter().map(|(n, _)| *n).collect()
}

pub fn run_module(name: &str) -> Option<Result<CheckOutcome>> {
    MODULES.iter().find(|(n, _)| *n == name).map(|(n, f)| {
        f().map(|e| CheckOutcome {
            name: n,
            max_relative_error: e,
        })
    })
}

fn check_matmul() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let a = randn(&mut rng, &[2, 3, 4]);
    let b = randn(&mut rng, &[4, 5]);
    run(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &[a, b],
    )
}

fn check_softmax() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let a = randn(&mut rng, &[3, 6]);
    run(
        |t, v| {
            let s = t.softmax(v[0], 1)?;
            let sq = t.mul(s, s)?;
            Ok(t.sum_all(sq))
        },
        &[a],
    )
}

fn check_conv2d() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let x = randn(&mut rng, &[1, 3, 6, 7]);
    let k = randn(&mut rng, &[4, 3, 3, 3]);
    run(
        |t, v| {
            let y = t.conv2d(v[0], v[1], 1, PadMode::Replicate)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &[x, k],
    )
}

fn check_depthwise() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let x = randn(&mut rng, &[1, 4, 6, 6]);
    let kd = randn(&mut rng, &[4, 3, 3]);
    let kp = randn(&mut rng, &[4, 4, 1, 1]);
    run(
        |t, v| {
            let y = t.depthwise_separable_conv(v[0], v[1], v[2], PadMode::Replicate)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &[x, kd, kp],
    )
}

fn check_bilinear() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let x = randn(&mut rng, &[1, 3, 5, 6]);
    let coords = Tensor::from_fn(&[1, 5, 2], |i| {
        0.3 + 0.71 * i[1] as f64 + 0.17 * i[2] as f64
    });
    run(
        |t, v| {
            let y = t.bilinear_sample(v[0], v[1])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &[x, coords],
    )
}

fn check_pixel_shuffle() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let x = randn(&mut rng, &[1, 8, 3, 4]);
    run(
        |t, v| {
            let y = t.pixel_shuffle(v[0], 2)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &[x],
    )
}

fn check_layer_norm() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let x = randn(&mut rng, &[1, 5, 3, 3]);
    let g = randn(&mut rng, &[5]);
    let b = randn(&mut rng, &[5]);
    run(
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1, 1e-5)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &[x, g, b],
    )
}

fn check_windows() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let x = randn(&mut rng, &[1, 3, 4, 8]);
    run(
        |t, v| {
            let w = t.partition(v[0], 2, 4)?;
            let sq = t.mul(w, w)?;
            let m = t.merge_windows(sq, 2, 4, 4, 8)?;
            Ok(t.sum_all(m))
        },
        &[x],
    )
}

fn check_rpe() -> Result<f64> {
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let mut b = ParamBuilder::new(&mut store, &mut rng);
    let rpe = gdgt_core::windowing::RelPosBias::register(&mut b.child("rpe"), 16, 2);
    let point: Vec<Tensor<f64>> = store.iter().map(|(_, p)| p.value.clone()).collect();
    run(
        move |t, vs| {
            let bind = Binding::from_vars(vs.to_vec());
            let bias = rpe.bias(t, &bind, WindowSpec { rh: 2, rw: 3 })?;
            let sq = t.mul(bias, bias)?;
            Ok(t.sum_all(sq))
        },
        &point,
    )
}

fn check_dgg() -> Result<f64> {
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let mut b = ParamBuilder::new(&mut store, &mut rng);
    let dgg = Dgg::register(&mut b.child("dgg"), 16);
    let d = distortion_map(8, 16)?.to_tensor::<f64>();
    let point: Vec<Tensor<f64>> = store.iter().map(|(_, p)| p.value.clone()).collect();
    run(
        move |t, vs| {
            let bind = Binding::from_vars(vs.to_vec());
            let dv = t.constant(d.clone());
            let g = dgg.forward(t, &bind, dv)?;
            let sq = t.mul(g, g)?;
            Ok(t.sum_all(sq))
        },
        &point,
    )
}

fn desk_windows() -> (WindowSpec, WindowSpec) {
    (WindowSpec { rh: 2, rw: 8 }, WindowSpec { rh: 8, rw: 2 })
}

fn check_rwin() -> Result<f64> {
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let mut b = ParamBuilder::new(&mut store, &mut rng);
    let (hw, vw) = desk_windows();
    let attn = RwinAttention::register(&mut b.child("attn"), 8, 2, hw, vw, 32)?;
    let mut rng2 = ChaCha8Rng::seed_from_u64(112);
    let x = randn(&mut rng2, &[1, 8, 8, 16]);
    let mut point: Vec<Tensor<f64>> = store.iter().map(|(_, p)| p.value.clone()).collect();
    point.push(x);
    run(
        move |t, vs| {
            let bind = Binding::from_vars(vs[..vs.len() - 1].to_vec());
            let y = attn.forward(t, &bind, vs[vs.len() - 1], None)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &point,
    )
}

fn check_dmrsa() -> Result<f64> {
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(113);
    let mut b = ParamBuilder::new(&mut store, &mut rng);
    let (hw, vw) = desk_windows();
    let dmrsa = Dmrsa::register(&mut b.child("dmrsa"), 8, 2, hw, vw, 32, true)?;
    let mut rng2 = ChaCha8Rng::seed_from_u64(114);
    let x = randn(&mut rng2, &[1, 8, 8, 16]);
    let g = randn(&mut rng2, &[1, 8, 8, 16]);
    let mut point: Vec<Tensor<f64>> = store.iter().map(|(_, p)| p.value.clone()).collect();
    point.push(x);
    point.push(g);
    run(
        move |t, vs| {
            let bind = Binding::from_vars(vs[..vs.len() - 2].to_vec());
            let y = dmrsa.forward(t, &bind, vs[vs.len() - 2], Some(vs[vs.len() - 1]))?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &point,
    )
}

fn check_ddsa() -> Result<f64> {
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(115);
    let mut b = ParamBuilder::new(&mut store, &mut rng);
    let ddsa = Ddsa::register(
        &mut b.child("ddsa"),
        8,
        2,
        DdsaConfig { samples: 9, clamp_radius: 4.0 },
    )?;
    let mut rng2 = ChaCha8Rng::seed_from_u64(116);
    let x = randn(&mut rng2, &[1, 8, 8, 16]);
    let d = distortion_map(8, 16)?.to_tensor::<f64>();
    let mut point: Vec<Tensor<f64>> = store.iter().map(|(_, p)| p.value.clone()).collect();
    point.push(x);
    run(
        move |t, vs| {
            let bind = Binding::from_vars(vs[..vs.len() - 1].to_vec());
            let dv = t.constant(d.clone());
            let y = ddsa.forward(t, &bind, vs[vs.len() - 1], dv)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &point,
    )
}

fn check_dfa() -> Result<f64> {
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(117);
    let mut b = ParamBuilder::new(&mut store, &mut rng);
    let dfa = Dfa::register(&mut b.child("dfa"), 8, 4, true)?;
    let mut rng2 = ChaCha8Rng::seed_from_u64(118);
    let f1 = randn(&mut rng2, &[1, 8, 4, 4]);
    let f2 = randn(&mut rng2, &[1, 8, 4, 4]);
    let mut point: Vec<Tensor<f64>> = store.iter().map(|(_, p)| p.value.clone()).collect();
    point.push(f1);
    point.push(f2);
    run(
        move |t, vs| {
            let bind = Binding::from_vars(vs[..vs.len() - 2].to_vec());
            let y = dfa.forward(t, &bind, vs[vs.len() - 2], vs[vs.len() - 1])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &point,
    )
}

fn desk_cfg() -> ModelConfig {
    ModelConfig {
        num_dabs: 2,
        dals_per_dab: 1,
        embed_dim: 8,
        heads: 2,
        hwin: WindowSpec { rh: 2, rw: 4 },
        vwin: WindowSpec { rh: 4, rw: 2 },
        ddsa: DdsaConfig { samples: 9, clamp_radius: 2.0 },
        scale: 2,
        ..ModelConfig::default()
    }
}

fn check_dal() -> Result<f64> {
    let cfg = ModelConfig {
        hwin: WindowSpec { rh: 2, rw: 8 },
        vwin: WindowSpec { rh: 8, rw: 2 },
        ..desk_cfg()
    };
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(119);
    let mut b = ParamBuilder::new(&mut store, &mut rng);
    let dal = Dal::register(&mut b.child("dal"), &cfg)?;
    let mut rng2 = ChaCha8Rng::seed_from_u64(120);
    let x = randn(&mut rng2, &[1, 8, 8, 16]);
    let d = distortion_map(8, 16)?.to_tensor::<f64>();
    let mut point: Vec<Tensor<f64>> = store.iter().map(|(_, p)| p.value.clone()).collect();
    point.push(x);
    run(
        move |t, vs| {
            let bind = Binding::from_vars(vs[..vs.len() - 1].to_vec());
            let dv = t.constant(d.clone());
            let y = dal.forward(t, &bind, vs[vs.len() - 1], dv)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &point,
    )
}

fn check_model() -> Result<f64> {
    let cfg = desk_cfg();
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(121);
    let model = Gdgt::build(&cfg, &mut store, &mut rng)?;
    let mut rng2 = ChaCha8Rng::seed_from_u64(122);
    let x = Tensor::from_fn(&[1, 3, 4, 8], |_| rng2.random_range(-0.5..0.5));
    let point: Vec<Tensor<f64>> = store.iter().map(|(_, p)| p.value.clone()).collect();
    run(
        move |t, vs| {
            let bind = Binding::from_vars(vs.to_vec());
            let xv = t.constant(x.clone());
            let y = model.forward(t, &bind, xv, None)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &point,
    )
}
