mod common;

use std::sync::Arc;

use common::*;
use graphpool::engine::finite_diff_check;
use graphpool::graph::batch_graphs;
use graphpool::{Model64, ModelConfig, Result, Tape64, Tensor64, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const PRIMITIVE_TOL: f64 = 1e-6;
const MARGIN: f64 = 1e-3;
/// ReLU and max margin for whole-model checks, ten finite-difference steps.
const MODEL_KINK_MARGIN: f64 = 1e-4;
const TRIALS: u64 = 20;

/// `r · out · c` with fixed random weights, turning any output into a scalar.
struct Weigh {
    r: Tensor64,
    c: Tensor64,
}

impl Weigh {
    fn new(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Self {
        Self {
            r: random_tensor(rng, 1, rows),
            c: random_tensor(rng, cols, 1),
        }
    }

    fn apply(&self, t: &mut Tape64, out: Var) -> Result<Var> {
        let r = t.constant(self.r.clone());
        let c = t.constant(self.c.clone());
        let left = t.matmul(r, out)?;
        t.matmul(left, c)
    }
}

/// Records `build` once and reports whether it sits at least `MARGIN` away
/// from every ReLU and max kink.
fn smooth_at<F>(build: &F, x: &Tensor64) -> bool
where
    F: Fn(&mut Tape64, Var) -> Result<Var>,
{
    let mut t = Tape64::new();
    let v = t.leaf(x.clone());
    build(&mut t, v).unwrap();
    let k = t.kink_margin();
    k.relu >= MARGIN && k.max >= MARGIN
}

/// Runs `case` for `TRIALS` seeds; each returns the leaf value and the
/// function of it to check, or `None` to resample.
fn check_primitive<F, B>(name: &str, case: F)
where
    F: Fn(&mut ChaCha8Rng) -> Option<(Tensor64, B)>,
    B: Fn(&mut Tape64, Var) -> Result<Var>,
{
    let mut checked = 0;
    let mut seed = 0;
    while checked < TRIALS {
        seed += 1;
        assert!(seed < 50 * TRIALS, "{name}: could not find smooth inputs");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let Some((x, build)) = case(&mut rng) else {
            continue;
        };
        if !smooth_at(&build, &x) {
            continue;
        }
        let err = finite_diff_check(&build, &x, H).unwrap();
        assert!(
            err < PRIMITIVE_TOL,
            "{name} seed {seed}: relative error {err}"
        );
        checked += 1;
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..6), rng.gen_range(1..5))
}

#[test]
fn matmul_both_operands() {
    check_primitive("matmul lhs", |rng| {
        let (n, m) = dims(rng);
        let b = random_tensor(rng, m, 3);
        let w = Weigh::new(rng, n, 3);
        Some((random_tensor(rng, n, m), move |t: &mut Tape64, x: Var| {
            let b = t.constant(b.clone());
            let o = t.matmul(x, b)?;
            w.apply(t, o)
        }))
    });
    check_primitive("matmul rhs", |rng| {
        let (n, m) = dims(rng);
        let a = random_tensor(rng, 3, n);
        let w = Weigh::new(rng, 3, m);
        Some((random_tensor(rng, n, m), move |t: &mut Tape64, x: Var| {
            let a = t.constant(a.clone());
            let o = t.matmul(a, x)?;
            w.apply(t, o)
        }))
    });
}

#[test]
fn add_and_add_row() {
    check_primitive("add", |rng| {
        let (n, m) = dims(rng);
        let b = random_tensor(rng, n, m);
        let w = Weigh::new(rng, n, m);
        Some((random_tensor(rng, n, m), move |t: &mut Tape64, x: Var| {
            let b = t.constant(b.clone());
            let o = t.add(b, x)?;
            w.apply(t, o)
        }))
    });
    check_primitive("add_row matrix", |rng| {
        let (n, m) = dims(rng);
        let b = random_tensor(rng, 1, m);
        let w = Weigh::new(rng, n, m);
        Some((random_tensor(rng, n, m), move |t: &mut Tape64, x: Var| {
            let b = t.constant(b.clone());
            let o = t.add_row(x, b)?;
            w.apply(t, o)
        }))
    });
    check_primitive("add_row bias", |rng| {
        let (n, m) = dims(rng);
        let a = random_tensor(rng, n, m);
        let w = Weigh::new(rng, n, m);
        Some((random_tensor(rng, 1, m), move |t: &mut Tape64, x: Var| {
            let a = t.constant(a.clone());
            let o = t.add_row(a, x)?;
            w.apply(t, o)
        }))
    });
}

#[test]
fn elementwise_activations() {
    check_primitive("relu", |rng| {
        let (n, m) = dims(rng);
        let w = Weigh::new(rng, n, m);
        Some((random_tensor(rng, n, m), move |t: &mut Tape64, x: Var| {
            let o = t.relu(x);
            w.apply(t, o)
        }))
    });
    check_primitive("tanh", |rng| {
        let (n, m) = dims(rng);
        let w = Weigh::new(rng, n, m);
        Some((
            random_tensor(rng, n, m).map(|v| 2.0 * v),
            move |t: &mut Tape64, x: Var| {
                let o = t.tanh(x);
                w.apply(t, o)
            },
        ))
    });
}

#[test]
fn scale_rows_both_operands() {
    check_primitive("scale_rows matrix", |rng| {
        let (n, m) = dims(rng);
        let s = random_tensor(rng, n, 1);
        let w = Weigh::new(rng, n, m);
        Some((random_tensor(rng, n, m), move |t: &mut Tape64, x: Var| {
            let s = t.constant(s.clone());
            let o = t.scale_rows(x, s)?;
            w.apply(t, o)
        }))
    });
    check_primitive("scale_rows scales", |rng| {
        let (n, m) = dims(rng);
        let a = random_tensor(rng, n, m);
        let w = Weigh::new(rng, n, m);
        Some((random_tensor(rng, n, 1), move |t: &mut Tape64, x: Var| {
            let a = t.constant(a.clone());
            let o = t.scale_rows(a, x)?;
            w.apply(t, o)
        }))
    });
}

#[test]
fn spmm_mean_features() {
    check_primitive("spmm_mean", |rng| {
        let n = rng.gen_range(1..12);
        let g = Arc::new(random_graph(rng, n, 0.4));
        let w = Weigh::new(rng, n, 3);
        Some((random_tensor(rng, n, 3), move |t: &mut Tape64, x: Var| {
            let o = t.spmm_mean(&g, x)?;
            w.apply(t, o)
        }))
    });
}

fn random_offsets(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut offs = vec![0];
    for _ in 0..rng.gen_range(1..4) {
        let last = *offs.last().unwrap();
        offs.push(last + rng.gen_range(1..5));
    }
    offs
}

#[test]
fn segment_reductions() {
    check_primitive("segment_mean", |rng| {
        let offs = random_offsets(rng);
        let (n, s) = (*offs.last().unwrap(), offs.len() - 1);
        let w = Weigh::new(rng, s, 3);
        Some((random_tensor(rng, n, 3), move |t: &mut Tape64, x: Var| {
            let o = t.segment_mean(x, &offs)?;
            w.apply(t, o)
        }))
    });
    check_primitive("segment_max", |rng| {
        let offs = random_offsets(rng);
        let (n, s) = (*offs.last().unwrap(), offs.len() - 1);
        let w = Weigh::new(rng, s, 3);
        Some((random_tensor(rng, n, 3), move |t: &mut Tape64, x: Var| {
            let o = t.segment_max(x, &offs)?;
            w.apply(t, o)
        }))
    });
    check_primitive("row_mean", |rng| {
        let (n, m) = dims(rng);
        let w = Weigh::new(rng, 1, m);
        Some((random_tensor(rng, n, m), move |t: &mut Tape64, x: Var| {
            let o = t.row_mean(x)?;
            w.apply(t, o)
        }))
    });
    check_primitive("row_max", |rng| {
        let (n, m) = dims(rng);
        let w = Weigh::new(rng, 1, m);
        Some((random_tensor(rng, n, m), move |t: &mut Tape64, x: Var| {
            let o = t.row_max(x)?;
            w.apply(t, o)
        }))
    });
}

#[test]
fn structural_ops() {
    check_primitive("concat_cols", |rng| {
        let (n, m) = dims(rng);
        let b = random_tensor(rng, n, 2);
        let w = Weigh::new(rng, n, m + 2);
        Some((random_tensor(rng, n, m), move |t: &mut Tape64, x: Var| {
            let b = t.constant(b.clone());
            let o = t.concat_cols(b, x)?;
            w.apply(t, o)
        }))
    });
    check_primitive("sum_tensors", |rng| {
        let (n, m) = dims(rng);
        let b = random_tensor(rng, n, m);
        let w = Weigh::new(rng, n, m);
        Some((random_tensor(rng, n, m), move |t: &mut Tape64, x: Var| {
            let b = t.constant(b.clone());
            let o = t.sum_tensors(&[x, b, x])?;
            w.apply(t, o)
        }))
    });
    check_primitive("gather_rows", |rng| {
        let (n, m) = dims(rng);
        let idx: Vec<usize> = (0..rng.gen_range(1..8))
            .map(|_| rng.gen_range(0..n))
            .collect();
        let w = Weigh::new(rng, idx.len(), m);
        Some((random_tensor(rng, n, m), move |t: &mut Tape64, x: Var| {
            let o = t.gather_rows(x, &idx)?;
            w.apply(t, o)
        }))
    });
}

#[test]
fn projection_ops() {
    check_primitive("vecdot matrix", |rng| {
        let (n, m) = dims(rng);
        let p = random_tensor(rng, m, 1);
        let w = Weigh::new(rng, n, 1);
        Some((random_tensor(rng, n, m), move |t: &mut Tape64, x: Var| {
            let p = t.constant(p.clone());
            let o = t.vecdot(x, p)?;
            w.apply(t, o)
        }))
    });
    check_primitive("vecdot vector", |rng| {
        let (n, m) = dims(rng);
        let a = random_tensor(rng, n, m);
        let w = Weigh::new(rng, n, 1);
        Some((random_tensor(rng, m, 1), move |t: &mut Tape64, x: Var| {
            let a = t.constant(a.clone());
            let o = t.vecdot(a, x)?;
            w.apply(t, o)
        }))
    });
    check_primitive("normalize", |rng| {
        let m = rng.gen_range(1..6);
        let w = Weigh::new(rng, m, 1);
        let x = random_tensor(rng, m, 1);
        let f = move |t: &mut Tape64, x: Var| {
            let o = t.normalize(x, 1e-12);
            w.apply(t, o)
        };
        (x.l2_norm() > 0.1).then_some((x, f))
    });
    check_primitive("softmax_xent", |rng| {
        let (n, c) = (rng.gen_range(1..6), rng.gen_range(2..5));
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        Some((
            random_tensor(rng, n, c).map(|v| 3.0 * v),
            move |t: &mut Tape64, x: Var| t.softmax_xent(x, &labels),
        ))
    });
}

#[test]
fn guarded_normalize_passes_gradient_through_the_floor() {
    let mut t = Tape64::new();
    let p = t.leaf(Tensor64::from_f64_rows(&[&[0.0], &[0.0]]));
    let unit = t.normalize(p, 1e-12);
    let c = t.constant(Tensor64::from_f64_rows(&[&[1.0, 2.0]]));
    let out = t.matmul(c, unit).unwrap();
    let grads = t.backward(out).unwrap();
    assert_eq!(t.value(unit).values(), &[0.0, 0.0]);
    assert_eq!(grads.get(p).unwrap().values(), &[1e12, 2e12]);
}

/// Random model and single-graph batch on `n` nodes with `f` features,
/// resampled until it is clear of every kink.
fn smooth_model_case(
    rng: &mut ChaCha8Rng,
    n: usize,
    f: usize,
) -> (Model64, graphpool::GraphBatch64) {
    loop {
        let classes = rng.gen_range(2..4);
        let g = random_labeled(rng, n, f, classes);
        let mut cfg = ModelConfig::new(f, 6, classes);
        cfg.seed = rng.gen();
        let model = Model64::new(cfg).unwrap();
        let batch = batch_graphs(&[&g]).unwrap();
        if model
            .margins(&batch)
            .unwrap()
            .at_least(MODEL_KINK_MARGIN, MARGIN)
        {
            return (model, batch);
        }
    }
}

#[test]
fn whole_model_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for n in 6..=10 {
        for f in [2, 8] {
            let (model, batch) = smooth_model_case(&mut rng, n, f);
            for (name, err) in model.gradient_check(&batch, H).unwrap() {
                assert!(err < 1e-4, "n {n} f {f} {name}: {err}");
            }
        }
    }
}

#[test]
fn gradient_check_reports_every_parameter() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (model, batch) = smooth_model_case(&mut rng, 6, 3);
    let report = model.gradient_check(&batch, H).unwrap();
    assert_eq!(report.len(), model.parameters().len());
    assert!(report.iter().all(|(_, e)| *e < 1e-4), "{report:?}");
}
