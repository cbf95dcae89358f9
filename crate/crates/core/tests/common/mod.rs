//! Oracles shared by the integration tests.
#![allow(dead_code)]

use cat_core::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use cat_core::rng::Rng;
use cat_core::Result;
use rand::Rng as _;

/// `Σ_ij y_ij r_ij`, a generic scalar readout of a matrix node.
pub fn weighted_sum(g: &mut Graph, y: Var, r: &Tensor) -> Result<Var> {
    let [rows, cols] = g.shape(y);
    let w = g.input(r.clone());
    let p = g.mul(y, w)?;
    let left = g.input(Tensor::filled(1, rows, 1.0));
    let right = g.input(Tensor::filled(cols, 1, 1.0));
    let s = g.matmul(left, p)?;
    g.matmul(s, right)
}

/// `|a − n| / max(|a|, |n|, 1e-4)`. The floor keeps round-off of the
/// difference quotient (about 1e-11) from dominating gradients that are
/// nearly zero, such as those through saturated gates.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Worst relative error between backprop and central differences over up to
/// `coords` randomly chosen coordinates of each parameter in `ids`.
pub fn fd_check(
    store: &ParamStore,
    ids: &[ParamId],
    coords: usize,
    rng: &mut Rng,
    build: impl Fn(&mut Graph) -> Result<Var>,
) -> f64 {
    let h = 1e-5;
    let mut g = Graph::new(store);
    let loss = build(&mut g).expect("forward");
    let grads = g.backward(loss).expect("backward");
    let mut worst: f64 = 0.0;
    for &id in ids {
        let n = store.get(id).values().len();
        let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let picks: Vec<usize> = if n <= coords {
            (0..n).collect()
        } else {
            (0..coords).map(|_| rng.random_range(0..n)).collect()
        };
        for i in picks {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(id).values_mut()[i] += delta;
                let mut g = Graph::new(&s);
                let l = build(&mut g).expect("forward");
                g.scalar(l)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
    }
    worst
}

/// Straight-line multi-head attention with layer norm, written without any
/// batching: returns `(output, weights[row][head][source])`.
#[allow(clippy::too_many_arguments)]
pub fn attention_oracle(
    e: &[f64],
    tq: &Tensor,
    tk: &Tensor,
    tv: &Tensor,
    hs: &[Tensor],
    heads: usize,
    gain: &[f64],
    bias: &[f64],
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let w = e.len();
    let dh = w / heads;
    let n = hs.len();
    let project = |x: &[f64], m: &Tensor| -> Vec<f64> {
        (0..w)
            .map(|c| (0..w).map(|r| x[r] * m.get(r, c)).sum())
            .collect()
    };
    let q = project(e, tq);
    let rows = hs[0].rows();
    let mut outs = Vec::new();
    let mut weights = Vec::new();
    for row in 0..rows {
        let keys: Vec<Vec<f64>> = hs.iter().map(|h| project(h.row_slice(row), tk)).collect();
        let vals: Vec<Vec<f64>> = hs.iter().map(|h| project(h.row_slice(row), tv)).collect();
        let mut out = vec![0.0; w];
        let mut row_w = Vec::new();
        for hd in 0..heads {
            let span = hd * dh..(hd + 1) * dh;
            let scores: Vec<f64> = keys
                .iter()
                .map(|k| span.clone().map(|j| q[j] * k[j]).sum::<f64>() / (n as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = ex.iter().sum();
            let a: Vec<f64> = ex.iter().map(|x| x / z).collect();
            for j in span {
                out[j] = (0..n).map(|i| a[i] * vals[i][j]).sum();
            }
            row_w.push(a);
        }
        let mean = out.iter().sum::<f64>() / w as f64;
        let var = out.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w as f64;
        let norm: Vec<f64> = (0..w)
            .map(|j| (out[j] - mean) / (var + 1e-5).sqrt() * gain[j] + bias[j])
            .collect();
        outs.push(norm);
        weights.push(row_w);
    }
    (outs, weights)
}

/// Nudges values away from the relu kink so a finite-difference step never
/// crosses it.
fn off_kink(mut t: Tensor) -> Tensor {
    for v in t.values_mut() {
        if v.abs() < 1e-2 {
            *v += 0.05_f64.copysign(*v);
        }
    }
    t
}

pub struct GradientCase {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

/// Finite-difference checks of every differentiable operation, `instances`
/// random cases each.
pub fn gradient_suite(instances: usize, seed: u64) -> Vec<GradientCase> {
    use cat_core::kb::{KnowledgeBase, Mode};
    use cat_core::kta::{joint_loss, KtaBlock};
    use cat_core::masks::TaskMask;
    use cat_core::rng;

    let mut cases: Vec<GradientCase> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut(&mut Rng) -> f64| {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut r = rng::stream(seed, &[name.len() as u64, i as u64, name.as_bytes()[0] as u64]);
            worst = worst.max(f(&mut r));
        }
        cases.push(GradientCase { name, instances, worst });
    };

    run("matmul", &mut |r| {
        let (m, k, n) = (r.random_range(1..5), r.random_range(1..6), r.random_range(1..5));
        let mut s = ParamStore::new();
        let a = s.add(Tensor::uniform(m, k, 1.0, r));
        let b = s.add(Tensor::uniform(k, n, 1.0, r));
        let w = Tensor::uniform(m, n, 1.0, r);
        fd_check(&s, &[a, b], 12, r, |g| {
            let (av, bv) = (g.param(a), g.param(b));
            let y = g.matmul(av, bv)?;
            weighted_sum(g, y, &w)
        })
    });
    run("sigmoid", &mut |r| {
        let (m, n) = (r.random_range(1..5), r.random_range(1..6));
        let mut s = ParamStore::new();
        let a = s.add(Tensor::uniform(m, n, 4.0, r));
        let w = Tensor::uniform(m, n, 1.0, r);
        fd_check(&s, &[a], 30, r, |g| {
            let av = g.param(a);
            let sc = g.scale(av, 1.5);
            let y = g.sigmoid(sc);
            weighted_sum(g, y, &w)
        })
    });
    run("relu", &mut |r| {
        let (m, n) = (r.random_range(1..5), r.random_range(1..6));
        let mut s = ParamStore::new();
        let a = s.add(off_kink(Tensor::uniform(m, n, 1.0, r)));
        let b = s.add(Tensor::uniform(1, n, 1.0, r));
        let w = Tensor::uniform(m, n, 1.0, r);
        fd_check(&s, &[a, b], 30, r, |g| {
            let (av, bv) = (g.param(a), g.param(b));
            let y = g.relu(av);
            let y = g.mul_row(y, bv)?;
            weighted_sum(g, y, &w)
        })
    });
    run("softmax_cross_entropy", &mut |r| {
        let (m, c) = (r.random_range(1..6), r.random_range(2..7));
        let mut s = ParamStore::new();
        let a = s.add(Tensor::uniform(m, c, 3.0, r));
        let labels: Vec<usize> = (0..m).map(|_| r.random_range(0..c)).collect();
        fd_check(&s, &[a], 30, r, |g| {
            let av = g.param(a);
            g.softmax_cross_entropy(av, &labels)
        })
    });
    run("layer_norm", &mut |r| {
        let (m, n) = (r.random_range(1..5), r.random_range(2..8));
        let mut s = ParamStore::new();
        let x = s.add(Tensor::uniform(m, n, 2.0, r));
        let gain = s.add(Tensor::uniform(1, n, 1.5, r));
        let bias = s.add(Tensor::uniform(1, n, 1.0, r));
        let w = Tensor::uniform(m, n, 1.0, r);
        fd_check(&s, &[x, gain, bias], 30, r, |g| {
            let (xv, gv, bv) = (g.param(x), g.param(gain), g.param(bias));
            let y = g.layer_norm(xv, gv, bv)?;
            weighted_sum(g, y, &w)
        })
    });
    run("attention_block", &mut |r| {
        let heads = 5;
        let width = heads * r.random_range(1..3);
        let sources = r.random_range(1..5);
        let rows = r.random_range(1..4);
        let mut s = ParamStore::new();
        let block = KtaBlock::new(&mut s, 0, width, heads, 0.3, 3, r).unwrap();
        let hs: Vec<ParamId> = (0..sources).map(|_| s.add(Tensor::uniform(rows, width, 1.0, r))).collect();
        let w = Tensor::uniform(rows, width, 1.0, r);
        let mut ids = block.attention_params().to_vec();
        ids.extend(&hs);
        fd_check(&s, &ids, 10, r, |g| {
            let vars: Vec<Var> = hs.iter().map(|&h| g.param(h)).collect();
            // fixed stream per evaluation: identical dropout mask
            let mut d = rng::stream(99, &[]);
            let a = block.attend(g, &vars, Mode::Train, &mut d)?;
            weighted_sum(g, a.output, &w)
        })
    });
    run("joint_loss", &mut |r| {
        let (input, width, classes, rows) = (6, 10, 3, 4);
        let mut s = ParamStore::new();
        let mut kb = KnowledgeBase::new(&mut s, input, width, 0.5, r);
        // non-zero biases keep pre-activations off the relu kink
        for l in 0..2 {
            let b = kb.layer(l).1;
            *s.get_mut(b) = off_kink(Tensor::uniform(1, width, 0.5, r));
        }
        let previous = r.random_range(1..4);
        let mut masks = Vec::new();
        for k in 0..previous {
            kb.register_task(&mut s, classes, r);
            let layers = (0..2).map(|_| (0..width).map(|_| r.random_bool(0.6)).collect()).collect();
            masks.push(TaskMask::new(k, layers));
        }
        let t = kb.register_task(&mut s, classes, r);
        let block = KtaBlock::new(&mut s, t, width, 5, 0.5, classes, r).unwrap();
        let x = off_kink(Tensor::uniform(rows, input, 1.0, r));
        let y: Vec<usize> = (0..rows).map(|_| r.random_range(0..classes)).collect();
        let sval = r.random_range(0.05..3.0);
        let mut ids = kb.shared_params();
        ids.extend(kb.task_params(t).unwrap());
        ids.extend(block.params());
        fd_check(&s, &ids, 6, r, |g| {
            let mut d = rng::stream(7, &[]);
            let xv = g.input(x.clone());
            let out = kb.forward_masked(g, xv, t, sval, true, &mut d)?;
            let z = kb.classify_mask_head(g, out.output, t, Mode::Train)?;
            let mut sims = Vec::new();
            for m in &masks {
                sims.push(kb.forward_as_previous_task(g, xv, m, false)?);
            }
            let a = block.attend(g, &sims, Mode::Train, &mut d)?;
            let zk = block.classify(g, a.output, Mode::Train)?;
            joint_loss(g, z, zk, &y)
        })
    });
    cases
}

pub fn mnist() -> cat_core::datasets::ImageSet {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    cat_core::datasets::parse_idx(
        &dir.join("digits-images-idx3-ubyte.gz"),
        &dir.join("digits-labels-idx1-ubyte.gz"),
    )
    .expect("bundled digits")
}

/// A short mixed sequence: `dissimilar` two-class tasks and `similar`
/// perturbed ten-class tasks of `per_task` samples.
pub fn small_sequence(
    data: &cat_core::datasets::ImageSet,
    seed: u64,
    dissimilar: usize,
    similar: usize,
    per_task: usize,
) -> cat_core::datasets::MixedSequence {
    use cat_core::datasets::{build_mixed_sequence, DisjointConfig, SequenceSpec, SimilarConfig};
    let spec = SequenceSpec {
        dissimilar: DisjointConfig {
            max_tasks: Some(dissimilar),
            train_cap: 80,
            test_cap: 40,
            ..DisjointConfig::new(2)
        },
        similar: SimilarConfig::new(similar, per_task),
        data_seed: seed,
        interleave_seed: seed,
    };
    build_mixed_sequence(data, &spec).expect("sequence")
}

pub fn small_config(variant: cat_core::learner::Variant, seed: u64) -> cat_core::learner::LearnerConfig {
    use cat_core::learner::LearnerConfig;
    use cat_core::train::Protocol;
    let protocol = Protocol {
        max_epochs: 4,
        patience: 2,
        ..Protocol::default()
    };
    let mut cfg = LearnerConfig {
        variant,
        kb_width: 20,
        protocol,
        seed,
        ..LearnerConfig::default()
    };
    cfg.detector.protocol = protocol;
    cfg
}

/// Maximum deviations of `KtaBlock::attend` from [`attention_oracle`] on
/// one random case.
pub struct KtaCase {
    pub output_err: f64,
    pub weight_err: f64,
    pub sum_err: f64,
}

pub fn kta_case(seed: u64, heads: usize, per_head: usize, sources: usize, rows: usize) -> KtaCase {
    use cat_core::kb::Mode;
    use cat_core::kta::KtaBlock;
    use cat_core::rng;
    let mut r = rng::stream(seed, &[]);
    let width = heads * per_head;
    let mut store = ParamStore::new();
    let block = KtaBlock::new(&mut store, 0, width, heads, 0.5, 3, &mut r).unwrap();
    let [e, tq, tk, tv, gain, bias] = block.attention_params();
    // move the layer-norm affine away from its identity init
    *store.get_mut(gain) = Tensor::uniform(1, width, 2.0, &mut r);
    *store.get_mut(bias) = Tensor::uniform(1, width, 1.0, &mut r);
    let hs: Vec<Tensor> = (0..sources).map(|_| Tensor::uniform(rows, width, 2.0, &mut r)).collect();

    let mut g = Graph::new(&store);
    let vars: Vec<_> = hs.iter().map(|h| g.input(h.clone())).collect();
    let mut unused = rng::stream(0, &[]);
    let a = block.attend(&mut g, &vars, Mode::Eval, &mut unused).unwrap();
    let out = g.tensor(a.output);
    let weights = g.attention_weights(a.attention).unwrap().to_vec();

    let (want, want_w) = attention_oracle(
        store.get(e).values(),
        store.get(tq),
        store.get(tk),
        store.get(tv),
        &hs,
        heads,
        store.get(gain).values(),
        store.get(bias).values(),
    );
    let mut case = KtaCase {
        output_err: 0.0,
        weight_err: 0.0,
        sum_err: 0.0,
    };
    for row in 0..rows {
        for j in 0..width {
            case.output_err = case.output_err.max((out.get(row, j) - want[row][j]).abs());
        }
        for h in 0..heads {
            let got = &weights[(row * heads + h) * sources..(row * heads + h + 1) * sources];
            for (g, w) in got.iter().zip(&want_w[row][h]) {
                case.weight_err = case.weight_err.max((g - w).abs());
            }
            case.sum_err = case.sum_err.max((got.iter().sum::<f64>() - 1.0).abs());
        }
    }
    case
}
