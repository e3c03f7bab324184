//! Finite-difference checks for every differentiable operation, in `f64`.

use adsam::deform::{bilinear_sample, deform_conv2d, offset_mask_predict, DeformKernelContext};
use adsam::fusion::ScaleFusionBlock;
use adsam::gradcheck::check_gradients;
use adsam::losses::{
    composite_loss, dice_loss, focal_loss, lovasz_softmax, surface_loss, DistanceMaps, LossConfig, IGNORE,
};
use adsam::model::DecoderStage;
use adsam::nn::{DeformConv, GroupNorm, Init, ParamGroup, ParamStore};
use adsam::tensor::PoolKind;
use adsam::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: usize = 10;
const STEP: f64 = 1e-4;
const PROBES: usize = 24;

pub struct OpResult {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

/// Deterministic weights so that every output element matters to the
/// scalar being differentiated.
fn weigh(t: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(t.numel() as u64);
    let w: Vec<f64> = (0..t.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(t.mul(&Tensor::new(w, t.shape())?)?.sum())
}

/// Magnitudes in `[0.1, 1]` with random sign, clear of the kinks at 0.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(v, shape).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape).unwrap()
}

/// Offsets whose fractional parts stay in `[0.15, 0.85]`, away from the
/// integer lattice where bilinear sampling has kinks.
fn off_lattice(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v = (0..n).map(|_| rng.random_range(-2i32..2) as f64 + rng.random_range(0.15..0.85)).collect();
    Tensor::new(v, shape).unwrap()
}

fn dims(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(2..=5), rng.random_range(2..=5)]
}

fn labels(rng: &mut ChaCha8Rng, [b, c, h, w]: [usize; 4]) -> Vec<u8> {
    loop {
        let l: Vec<u8> = (0..b * h * w)
            .map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..c) as u8 })
            .collect();
        if l.iter().any(|&v| v != IGNORE) {
            return l;
        }
    }
}

/// Smallest gap between sorted per-class errors; the Lovász extension has
/// kinks where two errors tie.
fn lovasz_gap(logits: &Tensor<f64>, labels: &[u8]) -> f64 {
    let (b, c, h, w) = logits.dims4().unwrap();
    let x = logits.data();
    let hw = h * w;
    let mut gap = f64::INFINITY;
    for k in 0..c {
        let mut errs = Vec::new();
        for n in 0..b {
            for p in 0..hw {
                let l = labels[n * hw + p];
                if l == IGNORE {
                    continue;
                }
                let z: Vec<f64> = (0..c).map(|j| x[(n * c + j) * hw + p]).collect();
                let mx = z.iter().cloned().fold(f64::MIN, f64::max);
                let s: f64 = z.iter().map(|v| (v - mx).exp()).sum();
                let pk = (z[k] - mx).exp() / s;
                errs.push(if l as usize == k { 1.0 - pk } else { pk });
            }
        }
        errs.sort_by(f64::total_cmp);
        for w in errs.windows(2) {
            gap = gap.min(w[1] - w[0]);
        }
    }
    gap
}

fn lovasz_instance(rng: &mut ChaCha8Rng) -> (Tensor<f64>, Vec<u8>) {
    loop {
        let d = [rng.random_range(1..=2), rng.random_range(2..=3), rng.random_range(2..=4), rng.random_range(2..=4)];
        let logits = uniform(rng, &d, -2.0, 2.0);
        let l = labels(rng, d);
        if lovasz_gap(&logits, &l) > 2e-3 {
            return (logits, l);
        }
    }
}

fn randomise(store: &ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let names: Vec<(String, Vec<usize>)> = store.iter().map(|p| (p.name().to_string(), p.tensor().shape().to_vec())).collect();
    for (name, shape) in names {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = if name.ends_with(".offset.bias") {
            // Offsets near 0.4 keep every tap off the lattice.
            (0..n).map(|i| if i < 18 { 0.4 } else { rng.random_range(-1.0..1.0) }).collect()
        } else if name.ends_with(".offset.weight") {
            (0..n).map(|_| rng.random_range(-0.01..0.01)).collect()
        } else {
            (0..n).map(|_| rng.random_range(-0.6..0.6)).collect()
        };
        store.set_by_name(&name, v, &shape).unwrap();
    }
}

struct Runner {
    rng: ChaCha8Rng,
    results: Vec<OpResult>,
}

impl Runner {
    fn op(&mut self, name: &'static str, mut instance: impl FnMut(&mut ChaCha8Rng) -> Result<f64>) {
        let mut worst: f64 = 0.0;
        for _ in 0..INSTANCES {
            let e = instance(&mut self.rng).unwrap_or_else(|e| panic!("{name}: {e}"));
            worst = worst.max(e);
        }
        self.results.push(OpResult { name, instances: INSTANCES, worst });
    }
}

fn check(
    inputs: &[Tensor<f64>],
    wrt: &[bool],
    f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
) -> Result<f64> {
    Ok(check_gradients(inputs, wrt, STEP, PROBES, f)?.max_rel_err)
}

fn unary(r: &mut Runner, name: &'static str, positive: bool, f: fn(&Tensor<f64>) -> Tensor<f64>) {
    r.op(name, |rng| {
        let d = dims(rng);
        let x = if positive { uniform(rng, &d, 0.2, 2.0) } else { signed(rng, &d) };
        check(&[x], &[true], |v| weigh(&f(&v[0])))
    });
}

fn binary(r: &mut Runner, name: &'static str, f: fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>) {
    let mut k = 0;
    r.op(name, |rng| {
        k += 1;
        let d = dims(rng);
        let a = signed(rng, &d);
        // Every other instance broadcasts a per-channel operand.
        let bd = if k % 2 == 0 { [d[0], d[1], 1, 1] } else { d };
        let b = if name == "div" { uniform(rng, &bd, 0.5, 2.0) } else { signed(rng, &bd) };
        check(&[a, b], &[true, true], |v| weigh(&f(&v[0], &v[1])?))
    });
}

pub fn run(seed: u64) -> Vec<OpResult> {
    let mut r = Runner {
        rng: ChaCha8Rng::seed_from_u64(seed),
        results: Vec::new(),
    };

    binary(&mut r, "add", |a, b| a.add(b));
    binary(&mut r, "sub", |a, b| a.sub(b));
    binary(&mut r, "mul", |a, b| a.mul(b));
    binary(&mut r, "div", |a, b| a.div(b));
    unary(&mut r, "neg", false, |x| x.neg());
    unary(&mut r, "relu", false, |x| x.relu());
    unary(&mut r, "sigmoid", false, |x| x.sigmoid());
    unary(&mut r, "gelu", false, |x| x.gelu());
    unary(&mut r, "log", true, |x| x.log());
    unary(&mut r, "exp", false, |x| x.exp());
    unary(&mut r, "abs", false, |x| x.abs());
    unary(&mut r, "sqrt", true, |x| x.sqrt());
    unary(&mut r, "add_scalar", false, |x| x.add_scalar(0.7));
    unary(&mut r, "mul_scalar", false, |x| x.mul_scalar(-1.3));
    unary(&mut r, "rsub_scalar", false, |x| x.rsub_scalar(2.0));
    r.op("powf", |rng| {
        let d = dims(rng);
        let x = uniform(rng, &d, 0.2, 2.0);
        let p = [0.5, 2.0, 3.0, -1.5][rng.random_range(0..4)];
        check(&[x], &[true], |v| weigh(&v[0].powf(p)))
    });
    r.op("clamp", |rng| {
        let d = dims(rng);
        let n: usize = d.iter().product();
        let v: Vec<f64> = (0..n)
            .map(|_| {
                let m = if rng.random_bool(0.5) { rng.random_range(0.05..0.4) } else { rng.random_range(0.6..1.0) };
                if rng.random_bool(0.5) { m } else { -m }
            })
            .collect();
        check(&[Tensor::new(v, &d)?], &[true], |v| weigh(&v[0].clamp(-0.5, 0.5)))
    });

    r.op("sum", |rng| {
        let x = { let d = dims(rng); signed(rng, &d) };
        check(&[x], &[true], |v| Ok(v[0].sum().mul_scalar(1.7)))
    });
    r.op("mean", |rng| {
        let x = { let d = dims(rng); signed(rng, &d) };
        check(&[x], &[true], |v| Ok(v[0].mean().mul_scalar(1.7)))
    });
    r.op("sum_axis", |rng| {
        let x = { let d = dims(rng); signed(rng, &d) };
        let (axis, keep) = (rng.random_range(0..4), rng.random_bool(0.5));
        check(&[x], &[true], |v| weigh(&v[0].sum_axis(axis, keep)?))
    });
    r.op("softmax", |rng| {
        let x = { let d = dims(rng); signed(rng, &d) };
        let axis = rng.random_range(0..4);
        check(&[x], &[true], |v| weigh(&v[0].softmax(axis)?))
    });
    r.op("concat", |rng| {
        let d = dims(rng);
        let a = signed(rng, &d);
        let bd = [d[0], rng.random_range(1..=3), d[2], d[3]];
        let b = signed(rng, &bd);
        check(&[a, b], &[true, true], |v| weigh(&Tensor::concat(&[v[0].clone(), v[1].clone()], 1)?))
    });
    r.op("narrow", |rng| {
        let d = dims(rng);
        let x = signed(rng, &d);
        let axis = rng.random_range(0..4);
        let start = rng.random_range(0..d[axis]);
        let count = rng.random_range(1..=d[axis] - start);
        check(&[x], &[true], |v| weigh(&v[0].narrow(axis, start, count)?))
    });
    r.op("split", |rng| {
        let mut d = dims(rng);
        d[1] += 1;
        let x = signed(rng, &d);
        let first = rng.random_range(1..d[1]);
        check(&[x], &[true], |v| {
            let parts = v[0].split(1, &[first, d[1] - first])?;
            Ok(weigh(&parts[0])?.add(&weigh(&parts[1])?.mul_scalar(-0.6))?)
        })
    });
    r.op("reshape", |rng| {
        let d = dims(rng);
        let x = signed(rng, &d);
        check(&[x], &[true], |v| weigh(&v[0].reshape(&[d[0] * d[1], d[2] * d[3]])?.mul(&v[0].reshape(&[d[0] * d[1], d[2] * d[3]])?)?))
    });
    r.op("matmul", |rng| {
        let (m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
        let a = signed(rng, &[m, k]);
        let b = signed(rng, &[k, n]);
        check(&[a, b], &[true, true], |v| weigh(&v[0].matmul(&v[1])?))
    });
    r.op("pool_global_avg", |rng| {
        let x = { let d = dims(rng); signed(rng, &d) };
        check(&[x], &[true], |v| weigh(&v[0].pool_global(PoolKind::Avg)?))
    });
    r.op("pool_global_max", |rng| {
        let x = { let d = dims(rng); signed(rng, &d) };
        check(&[x], &[true], |v| weigh(&v[0].pool_global(PoolKind::Max)?))
    });

    r.op("conv2d", |rng| {
        let k = [1, 3][rng.random_range(0..2)];
        let stride = rng.random_range(1..=2);
        let pad = if k == 1 { 0 } else { rng.random_range(0..=1) };
        let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
        // Extents chosen so the strided output is integral.
        let h = k - 2 * pad + stride * rng.random_range(1..=3);
        let w = k - 2 * pad + stride * rng.random_range(1..=3);
        let xd = [rng.random_range(1..=2), cin, h, w];
        let x = signed(rng, &xd);
        let wt = signed(rng, &[cout, cin, k, k]);
        let b = signed(rng, &[cout]);
        check(&[x, wt, b], &[true, true, true], |v| weigh(&v[0].conv2d(&v[1], Some(&v[2]), stride, pad)?))
    });
    r.op("group_norm", |rng| {
        let groups = rng.random_range(1..=2);
        let c = groups * rng.random_range(1..=3);
        let d = [rng.random_range(1..=2), c, rng.random_range(2..=4), rng.random_range(2..=4)];
        let x = signed(rng, &d);
        let g = signed(rng, &[c]);
        let b = signed(rng, &[c]);
        check(&[x, g, b], &[true, true, true], |v| weigh(&v[0].group_norm(groups, 1e-5, &v[1], &v[2])?))
    });
    r.op("dropout", |rng| {
        let x = { let d = dims(rng); signed(rng, &d) };
        let seed = rng.random::<u64>();
        check(&[x], &[true], |v| weigh(&v[0].dropout(0.3, true, &mut ChaCha8Rng::seed_from_u64(seed))?))
    });
    r.op("bilinear_resize", |rng| {
        let x = { let d = dims(rng); signed(rng, &d) };
        let (oh, ow) = (rng.random_range(1..=7), rng.random_range(1..=7));
        check(&[x], &[true], |v| weigh(&v[0].bilinear_resize(oh, ow)?))
    });
    r.op("bilinear_sample", |rng| {
        let d = dims(rng);
        let x = signed(rng, &d);
        let n = rng.random_range(1..=6);
        let pts = off_lattice(rng, &[d[0], n, 2]).add_scalar(1.0);
        check(&[x, pts], &[true, true], |v| weigh(&bilinear_sample(&v[0], &v[1])?))
    });
    r.op("offset_mask_predict", |rng| {
        let d = dims(rng);
        let x = signed(rng, &d);
        let w = signed(rng, &[27, d[1], 3, 3]);
        let b = signed(rng, &[27]);
        check(&[x, w, b], &[true, true, true], |v| {
            let ctx = offset_mask_predict(&v[0], &v[1], &v[2], (3, 3))?;
            weigh(&ctx.offsets)?.add(&weigh(&ctx.masks)?)
        })
    });
    r.op("deform_conv2d", |rng| {
        let d = dims(rng);
        let (kh, kw) = ([1, 3][rng.random_range(0..2)], [1, 3][rng.random_range(0..2)]);
        let k = kh * kw;
        let cout = rng.random_range(1..=3);
        let x = signed(rng, &d);
        let w = signed(rng, &[cout, d[1], kh, kw]);
        let b = signed(rng, &[cout]);
        let off = off_lattice(rng, &[d[0], 2 * k, d[2], d[3]]);
        let m = uniform(rng, &[d[0], k, d[2], d[3]], 0.05, 0.95);
        check(&[x, w, b, off, m], &[true; 5], |v| {
            let ctx = DeformKernelContext {
                kernel: (kh, kw),
                offsets: v[3].clone(),
                masks: v[4].clone(),
            };
            weigh(&deform_conv2d(&v[0], &v[1], &v[2], &ctx)?)
        })
    });

    let cfg = LossConfig::default();
    r.op("focal_loss", |rng| {
        let (x, l) = lovasz_instance(rng);
        check(&[x], &[true], |v| focal_loss(&v[0], &l, &cfg))
    });
    r.op("dice_loss", |rng| {
        let (x, l) = lovasz_instance(rng);
        check(&[x], &[true], |v| dice_loss(&v[0], &l, &cfg))
    });
    r.op("lovasz_softmax", |rng| {
        let (x, l) = lovasz_instance(rng);
        check(&[x], &[true], |v| lovasz_softmax(&v[0], &l, &cfg))
    });
    r.op("surface_loss", |rng| {
        let (x, l) = lovasz_instance(rng);
        let (b, c, h, w) = x.dims4()?;
        let maps = DistanceMaps::from_labels(&l, [b, c, h, w], IGNORE)?;
        check(&[x], &[true], |v| surface_loss(&v[0], &l, &maps, &cfg))
    });
    r.op("composite_loss", |rng| {
        let (x, l) = lovasz_instance(rng);
        check(&[x], &[true], |v| Ok(composite_loss(&v[0], &l, &cfg)?.total))
    });

    r.op("scale_fusion", |rng| {
        let mut store = ParamStore::<f64>::new();
        let (e, cl) = (4, rng.random_range(2..=5));
        let block = ScaleFusionBlock::new(&mut store, "fuse", cl, e, 2, rng)?;
        randomise(&store, rng);
        let b = rng.random_range(1..=2);
        let (hg, wg) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let global = signed(rng, &[b, e, hg, wg]);
        let ld = [b, cl, rng.random_range(2..=6), rng.random_range(2..=6)];
        let local = signed(rng, &ld);
        check(&[global, local], &[true, true], |v| weigh(&block.forward(&store, &v[0], &v[1])?))
    });
    r.op("decoder_stage", |rng| {
        let mut store = ParamStore::<f64>::new();
        let (cin, cout) = (rng.random_range(1..=4), 2 * rng.random_range(1..=2));
        let stage = DecoderStage {
            conv: DeformConv::new(&mut store, "dec", ParamGroup::Head, (cin, cout), Init::Kaiming, rng)?,
            norm: GroupNorm::new(&mut store, "dec.norm", ParamGroup::Head, cout, 2)?,
        };
        randomise(&store, rng);
        let xd = [rng.random_range(1..=2), cin, rng.random_range(2..=4), rng.random_range(2..=4)];
        let x = signed(rng, &xd);
        check(&[x], &[true], |v| weigh(&stage.forward(&store, &v[0], 0.0, None)?))
    });

    r.results
}
