//! Seeded finite-difference checks for every op and sharing unit.
//!
//! Each case puts all of its inputs into a `ParamStore` so the checker
//! perturbs them, and reduces the op output to a scalar through a fixed
//! random weighting (a plain sum would hide errors in gradients that sum
//! to zero over the output).

use cas_core::backbone::{NetConfig, SharingKind, SharingNetwork, StageSpec};
use cas_core::gradcheck::{grad_check_all, GradCheckReport};
use cas_core::sharing::{
    cas_forward, cross_stitch_forward, sluice_forward, AblationConfig, CasParams, CrossStitchParams, SluiceParams,
};
use cas_core::{Error, Initializer, ParamStore, Result, Shape, Tape, Tensor, Var};
use rand::Rng;

use super::{random_tensor, rng};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
/// Resamples allowed per instance when the draw lands near a kink.
const MAX_DRAWS: u64 = 50;

type Loss = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var>>;

pub struct Case {
    pub store: ParamStore,
    pub loss: Loss,
}

pub const OPS: [&str; 17] = [
    "gap",
    "linear",
    "relu",
    "sigmoid",
    "conv2d_3x3_s1",
    "conv2d_3x3_s2",
    "conv2d_7x7",
    "concat_channels",
    "slice_channels",
    "channel_mean",
    "channel_max",
    "channel_stats",
    "mul_broadcast",
    "add_broadcast",
    "scale",
    "weighted_sum",
    "bce_loss",
];

fn readout(tape: &mut Tape, x: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.input(w.clone());
    let p = tape.mul(x, wv)?;
    tape.sum(p)
}

/// One random instance of a tape op.
pub fn op_case(op: &str, seed: u64) -> Case {
    let mut r = rng(seed);
    let n = r.gen_range(1..=2);
    let h = r.gen_range(2..=5);
    let w = r.gen_range(2..=5);
    let c = r.gen_range(1..=4);
    let mut store = ParamStore::new();
    let t = |store: &mut ParamStore, name: &str, s: Shape, r: &mut rand_chacha::ChaCha8Rng| {
        store.add(name, random_tensor(r, s, -1.0, 1.0))
    };
    let x_shape = Shape::new(n, h, w, c);

    macro_rules! unary_case {
        ($out:expr, $apply:expr) => {{
            let x = t(&mut store, "x", x_shape, &mut r);
            let wt = random_tensor(&mut r, $out, -1.0, 1.0);
            let loss: Loss = Box::new(move |tape, s| {
                let xv = tape.param(s, x);
                #[allow(clippy::redundant_closure_call)]
                let y = ($apply)(tape, xv)?;
                readout(tape, y, &wt)
            });
            Case { store, loss }
        }};
    }

    match op {
        "gap" => unary_case!(Shape::new(n, 1, 1, c), |tape: &mut Tape, x| tape.gap(x)),
        "relu" => unary_case!(x_shape, |tape: &mut Tape, x| tape.relu(x)),
        "sigmoid" => unary_case!(x_shape, |tape: &mut Tape, x| tape.sigmoid(x)),
        "channel_mean" => unary_case!(Shape::new(n, h, w, 1), |tape: &mut Tape, x| tape.channel_mean(x)),
        "channel_max" => unary_case!(Shape::new(n, h, w, 1), |tape: &mut Tape, x| tape.channel_max(x)),
        "scale" => {
            let f = r.gen_range(-3.0..3.0);
            unary_case!(x_shape, move |tape: &mut Tape, x| tape.scale(x, f))
        }
        "channel_stats" => {
            let x = t(&mut store, "x", x_shape, &mut r);
            let wa = random_tensor(&mut r, Shape::new(n, h, w, 1), -1.0, 1.0);
            let wm = random_tensor(&mut r, Shape::new(n, h, w, 1), -1.0, 1.0);
            let loss: Loss = Box::new(move |tape, s| {
                let xv = tape.param(s, x);
                let (a, m) = tape.channel_stats(xv)?;
                let la = readout(tape, a, &wa)?;
                let lm = readout(tape, m, &wm)?;
                tape.add(la, lm)
            });
            Case { store, loss }
        }
        "slice_channels" => {
            let c = c + 1;
            let start = r.gen_range(0..c);
            let len = r.gen_range(1..=c - start);
            let x = t(&mut store, "x", Shape::new(n, h, w, c), &mut r);
            let wt = random_tensor(&mut r, Shape::new(n, h, w, len), -1.0, 1.0);
            let loss: Loss = Box::new(move |tape, s| {
                let xv = tape.param(s, x);
                let y = tape.slice_channels(xv, start, len)?;
                readout(tape, y, &wt)
            });
            Case { store, loss }
        }
        "linear" => {
            let cout = r.gen_range(1..=5);
            let x = t(&mut store, "x", Shape::new(n, 1, 1, c), &mut r);
            let wp = t(&mut store, "w", Shape::matrix(cout, c), &mut r);
            let b = t(&mut store, "b", Shape::vector(cout), &mut r);
            let wt = random_tensor(&mut r, Shape::new(n, 1, 1, cout), -1.0, 1.0);
            let loss: Loss = Box::new(move |tape, s| {
                let (xv, wv, bv) = (tape.param(s, x), tape.param(s, wp), tape.param(s, b));
                let y = tape.linear(xv, wv, bv)?;
                readout(tape, y, &wt)
            });
            Case { store, loss }
        }
        "conv2d_3x3_s1" | "conv2d_3x3_s2" | "conv2d_7x7" => {
            let (k, stride, pad) = match op {
                "conv2d_3x3_s1" => (3, 1, 1),
                "conv2d_3x3_s2" => (3, 2, r.gen_range(0..=1)),
                _ => (7, 1, 3),
            };
            let (h, w) = (h + 2, w + 2);
            let cout = r.gen_range(1..=3);
            let x = t(&mut store, "x", Shape::new(n, h, w, c), &mut r);
            let kp = t(&mut store, "k", Shape::new(k, k, c, cout), &mut r);
            let b = t(&mut store, "b", Shape::vector(cout), &mut r);
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (w + 2 * pad - k) / stride + 1;
            let wt = random_tensor(&mut r, Shape::new(n, oh, ow, cout), -1.0, 1.0);
            let loss: Loss = Box::new(move |tape, s| {
                let (xv, kv, bv) = (tape.param(s, x), tape.param(s, kp), tape.param(s, b));
                let y = tape.conv2d(xv, kv, bv, stride, pad)?;
                readout(tape, y, &wt)
            });
            Case { store, loss }
        }
        "concat_channels" => {
            let c2 = r.gen_range(1..=3);
            let a = t(&mut store, "a", x_shape, &mut r);
            let b = t(&mut store, "b", Shape::new(n, h, w, c2), &mut r);
            let wt = random_tensor(&mut r, Shape::new(n, h, w, c + c2), -1.0, 1.0);
            let loss: Loss = Box::new(move |tape, s| {
                let (av, bv) = (tape.param(s, a), tape.param(s, b));
                let y = tape.concat_channels(av, bv)?;
                readout(tape, y, &wt)
            });
            Case { store, loss }
        }
        "mul_broadcast" | "add_broadcast" => {
            // Second operand drops to a singleton on a random subset of axes.
            let mut ys = x_shape.0;
            for d in ys.iter_mut() {
                if r.gen_bool(0.5) {
                    *d = 1;
                }
            }
            let swap = r.gen_bool(0.5);
            let a = t(&mut store, "a", x_shape, &mut r);
            let b = t(&mut store, "b", Shape(ys), &mut r);
            let wt = random_tensor(&mut r, x_shape, -1.0, 1.0);
            let is_mul = op == "mul_broadcast";
            let loss: Loss = Box::new(move |tape, s| {
                let (mut av, mut bv) = (tape.param(s, a), tape.param(s, b));
                if swap {
                    std::mem::swap(&mut av, &mut bv);
                }
                let y = if is_mul { tape.mul(av, bv)? } else { tape.add(av, bv)? };
                readout(tape, y, &wt)
            });
            Case { store, loss }
        }
        "weighted_sum" => {
            let k = r.gen_range(1..=4);
            let rows = r.gen_range(1..=3);
            let row = r.gen_range(0..rows);
            let ids: Vec<_> = (0..k).map(|j| t(&mut store, &format!("x{j}"), x_shape, &mut r)).collect();
            let wp = t(&mut store, "w", Shape::matrix(rows, k), &mut r);
            let wt = random_tensor(&mut r, x_shape, -1.0, 1.0);
            let loss: Loss = Box::new(move |tape, s| {
                let xs: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
                let wv = tape.param(s, wp);
                let y = tape.weighted_sum(&xs, wv, row)?;
                readout(tape, y, &wt)
            });
            Case { store, loss }
        }
        "bce_loss" => {
            let z = store.add("z", random_tensor(&mut r, x_shape, -4.0, 4.0));
            let targets = Tensor::from_fn(x_shape, |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
            let loss: Loss = Box::new(move |tape, s| {
                let zv = tape.param(s, z);
                tape.bce_loss(zv, &targets)
            });
            Case { store, loss }
        }
        other => panic!("unknown op {other}"),
    }
}

/// The CAS variants: full plus the six single-component ablations.
pub fn cas_variants() -> Vec<(&'static str, AblationConfig)> {
    AblationConfig::table()
}

pub enum Unit {
    Cas(AblationConfig),
    CrossStitch,
    Sluice,
}

/// A random sharing unit of `unit`'s kind with random parameters and
/// inputs; the loss reads out both outputs and, for CAS, both spatial maps.
pub fn unit_case(unit: &Unit, seed: u64) -> Case {
    let mut r = rng(seed);
    let n = r.gen_range(1..=2);
    let h = r.gen_range(2..=4);
    let w = r.gen_range(2..=4);
    let c = 2 * r.gen_range(1..=3);
    let s = Shape::new(n, h, w, c);
    let mut store = ParamStore::new();
    enum Built {
        Cas(CasParams),
        Stitch(CrossStitchParams),
        Sluice(SluiceParams),
    }
    let built = match unit {
        Unit::Cas(ab) => {
            let red = [1, 2][r.gen_range(0..2)];
            Built::Cas(CasParams::new(&mut store, &mut Initializer::new(seed), "u", c, red, *ab).unwrap())
        }
        Unit::CrossStitch => Built::Stitch(CrossStitchParams::new(&mut store, "u", c).unwrap()),
        Unit::Sluice => Built::Sluice(SluiceParams::new(&mut store, "u", c).unwrap()),
    };
    // Generic parameters rather than the structured initial values.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape();
        *store.value_mut(id) = random_tensor(&mut r, shape, -0.8, 0.8);
    }
    let fa = store.add("feat_a", random_tensor(&mut r, s, -1.0, 1.0));
    let fb = store.add("feat_b", random_tensor(&mut r, s, -1.0, 1.0));
    let wa = random_tensor(&mut r, s, -1.0, 1.0);
    let wb = random_tensor(&mut r, s, -1.0, 1.0);
    let wma = random_tensor(&mut r, Shape::new(n, h, w, 1), -1.0, 1.0);
    let wmb = random_tensor(&mut r, Shape::new(n, h, w, 1), -1.0, 1.0);
    let loss: Loss = Box::new(move |tape, st| {
        let a = tape.param(st, fa);
        let b = tape.param(st, fb);
        let out = match &built {
            Built::Cas(p) => cas_forward(tape, st, p, a, b)?,
            Built::Stitch(p) => cross_stitch_forward(tape, st, p, a, b)?,
            Built::Sluice(p) => sluice_forward(tape, st, p, a, b)?,
        };
        let mut total = readout(tape, out.a, &wa)?;
        let lb = readout(tape, out.b, &wb)?;
        total = tape.add(total, lb)?;
        if let Some((ma, mb)) = out.maps {
            let la = readout(tape, ma, &wma)?;
            let lb = readout(tape, mb, &wmb)?;
            total = tape.add(total, la)?;
            total = tape.add(total, lb)?;
        }
        Ok(total)
    });
    Case { store, loss }
}

/// Two-stage CAS network on an 8x8 image, checked end to end through the
/// BCE loss.
pub fn network_case(seed: u64) -> Case {
    let mut r = rng(seed);
    let cfg = NetConfig {
        stages: vec![
            StageSpec {
                out_channels: 4,
                stride: 2,
                blocks: 1,
            },
            StageSpec {
                out_channels: 8,
                stride: 2,
                blocks: 1,
            },
        ],
        insertion_mask: vec![true, true],
        sharing: SharingKind::Cas,
        reduction: 2,
        labels_a: 2,
        labels_b: 3,
        seed,
        ..NetConfig::default()
    };
    let net = SharingNetwork::build(&cfg).unwrap();
    let mut store = net.store.clone();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape();
        *store.value_mut(id) = random_tensor(&mut r, shape, -0.6, 0.6);
    }
    let images = random_tensor(&mut r, Shape::new(2, 8, 8, 3), 0.0, 1.0);
    let ta = Tensor::from_fn(Shape::new(2, 1, 1, 2), |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
    let tb = Tensor::from_fn(Shape::new(2, 1, 1, 3), |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
    let loss: Loss = Box::new(move |tape, st| {
        let x = tape.input(images.clone());
        let out = net.forward_tape(tape, st, x, &mut Vec::new())?;
        let la = tape.bce_loss(out.logits_a, &ta)?;
        let lb = tape.bce_loss(out.logits_b, &tb)?;
        tape.add(la, lb)
    });
    Case { store, loss }
}

/// Checks one instance, redrawing (with a derived seed) when the draw sits
/// within the checker's margin of a non-differentiable point.
pub fn check_instance(make: impl Fn(u64) -> Case, seed: u64) -> GradCheckReport {
    for draw in 0..MAX_DRAWS {
        let case = make(seed.wrapping_mul(1000).wrapping_add(draw));
        let mut store = case.store;
        match grad_check_all(&case.loss, &mut store, EPS) {
            Ok(rep) => return rep,
            Err(Error::NearKink { .. }) => continue,
            Err(e) => panic!("gradient check failed to run: {e}"),
        }
    }
    panic!("no kink-free draw for seed {seed} in {MAX_DRAWS} attempts");
}

/// Worst report over `instances` seeds.
pub fn worst_of(make: impl Fn(u64) -> Case, instances: u64) -> GradCheckReport {
    let mut worst: Option<GradCheckReport> = None;
    for seed in 0..instances {
        let rep = check_instance(&make, seed);
        if worst.as_ref().map_or(true, |w| rep.max_rel_error > w.max_rel_error) {
            worst = Some(rep);
        }
    }
    worst.expect("at least one instance")
}
