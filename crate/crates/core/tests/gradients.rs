//! Autodiff gradients against central finite differences.
//!
//! Primitives are differenced directly through the graph. Composite losses
//! are differenced through independent f64 re-implementations, which keeps
//! f32 rounding out of the difference quotient.

use mlsa_core::corpus::{Schema, TokenSequence};
use mlsa_core::energy::{total_energy_graph, AttributeTarget, EnergyModel, LatentClassifier};
use mlsa_core::nn::{take_grads, Linear, Parameters};
use mlsa_core::vae::{
    aspect_discrepancy_loss, classification_loss, elbo_loss, encode_graph, reparameterize, total_loss, VaeConfig,
    VaeModel,
};
use mlsa_core::{Graph, Result, Rng, Tensor, Var};

const H: f64 = 1e-3;
const REL_TOL: f64 = 1e-3;
const INSTANCES: u64 = 10;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-8)
}

fn central_diff(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + H;
            let up = f(&p);
            p[i] = x[i] - H;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn randn(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.normal() * scale).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| *x as f64).collect()
}

fn lse(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Differences a unary primitive through the graph. The output is reduced
/// with fixed random weights in f64 so every output entry contributes.
fn check_primitive(
    name: &str,
    dims: &[usize],
    sample: impl Fn(&mut Rng) -> f64,
    op: impl Fn(&mut Graph, Var) -> Result<Var>,
) {
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(1000 + seed);
        let n: usize = dims.iter().product();
        let x: Vec<f64> = (0..n).map(|_| sample(&mut rng)).collect();
        let forward = |x: &[f64]| -> Vec<f64> {
            let mut g = Graph::new();
            let v = g.constant(Tensor::new(dims.to_vec(), to_f32(x)).unwrap()).unwrap();
            let out = op(&mut g, v).unwrap();
            to_f64(g.value(out).data())
        };
        let out_len = forward(&x).len();
        let w = randn(&mut rng, out_len, 1.0);

        let mut g = Graph::new();
        let v = g.param(Tensor::new(dims.to_vec(), to_f32(&x)).unwrap()).unwrap();
        let out = op(&mut g, v).unwrap();
        let out_dims = g.value(out).dims().to_vec();
        let wv = g.constant(Tensor::new(out_dims, to_f32(&w)).unwrap()).unwrap();
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod).unwrap();
        let auto = to_f64(g.backward(loss).unwrap().get(v).data());

        let fd = central_diff(&x, |p| forward(p).iter().zip(&w).map(|(o, w)| o * w).sum());
        let err = rel_err(&auto, &fd);
        assert!(err < REL_TOL, "{name} seed {seed}: relative error {err:.3e}");
    }
}

fn normal(rng: &mut Rng) -> f64 {
    rng.normal()
}

fn positive(rng: &mut Rng) -> f64 {
    rng.uniform_range(0.5, 2.0)
}

#[test]
fn elementwise_primitives() {
    let d = [3, 4];
    check_primitive("exp", &d, normal, |g, x| g.exp(x));
    check_primitive("log", &d, positive, |g, x| g.log(x));
    check_primitive("tanh", &d, normal, |g, x| g.tanh(x));
    check_primitive("softplus", &d, normal, |g, x| g.softplus(x));
    check_primitive("square", &d, normal, |g, x| g.square(x));
    check_primitive("sqrt", &d, positive, |g, x| g.sqrt(x));
    check_primitive("scale", &d, normal, |g, x| g.scale(x, -1.7));
    check_primitive("add_scalar", &d, normal, |g, x| g.add_scalar(x, 0.3));
    // Keep samples away from the kinks.
    let away = |rng: &mut Rng| {
        let v = rng.uniform_range(0.1, 2.0);
        if rng.uniform() < 0.5 {
            -v
        } else {
            v
        }
    };
    check_primitive("clamp", &d, away, |g, x| g.clamp(x, -1.0, 1.05));
    check_primitive("max_scalar", &d, away, |g, x| g.max_scalar(x, 0.0));
}

#[test]
fn row_and_reduction_primitives() {
    let d = [3, 5];
    check_primitive("softmax", &d, normal, |g, x| g.softmax(x));
    check_primitive("log_softmax", &d, normal, |g, x| g.log_softmax(x));
    check_primitive("log_sum_exp", &d, normal, |g, x| g.log_sum_exp(x));
    check_primitive("sum", &d, normal, |g, x| g.sum(x));
    check_primitive("mean", &d, normal, |g, x| g.mean(x));
    check_primitive("l2_norm", &d, normal, |g, x| g.l2_norm(x));
    check_primitive("mean_rows", &d, normal, |g, x| g.mean_rows(x));
    check_primitive("pick", &d, normal, |g, x| g.pick(x, &[4, 0, 2]));
    check_primitive("gather_rows", &d, normal, |g, x| g.gather_rows(x, &[2, 0, 2, 1]));
    check_primitive("segment_mean", &d, normal, |g, x| g.segment_mean(x, &[1, 2]));
    check_primitive("reshape", &d, normal, |g, x| g.reshape(x, &[5, 3]));
}

#[test]
fn binary_primitives() {
    let fixed = |g: &mut Graph, dims: &[usize], seed: u64| {
        let mut rng = Rng::new(seed);
        let n = dims.iter().product();
        g.constant(Tensor::new(dims.to_vec(), rng.normal_vec(n)).unwrap()).unwrap()
    };
    check_primitive("matmul_lhs", &[3, 4], normal, |g, x| {
        let b = fixed(g, &[4, 2], 7);
        g.matmul(x, b)
    });
    check_primitive("matmul_rhs", &[4, 2], normal, |g, x| {
        let a = fixed(g, &[3, 4], 8);
        g.matmul(a, x)
    });
    check_primitive("add", &[3, 4], normal, |g, x| {
        let b = fixed(g, &[3, 4], 9);
        g.add(x, b)
    });
    check_primitive("sub_rhs", &[3, 4], normal, |g, x| {
        let a = fixed(g, &[3, 4], 10);
        g.sub(a, x)
    });
    check_primitive("mul", &[3, 4], normal, |g, x| {
        let b = fixed(g, &[3, 4], 11);
        g.mul(x, b)
    });
    check_primitive("mul_broadcast_scalar", &[1], normal, |g, x| {
        let b = fixed(g, &[3, 4], 12);
        let s = g.reshape(x, &[])?;
        g.mul(b, s)
    });
    check_primitive("add_bias_input", &[3, 4], normal, |g, x| {
        let b = fixed(g, &[4], 13);
        g.add_bias(x, b)
    });
    check_primitive("add_bias_bias", &[4], normal, |g, x| {
        let a = fixed(g, &[3, 4], 14);
        g.add_bias(a, x)
    });
}

const B: usize = 4;
const L: usize = 3;
const V: usize = 5;
const D: usize = 3;

fn small_seqs(rng: &mut Rng, aspects: &[usize]) -> Vec<TokenSequence> {
    aspects
        .iter()
        .map(|a| TokenSequence {
            tokens: (0..L).map(|_| rng.below(V) as u32).collect(),
            aspect: *a,
            attribute: rng.below(2),
        })
        .collect()
}

fn elbo_oracle(logits: &[f64], mu: &[f64], logvar: &[f64], seqs: &[TokenSequence], w: f64, fb: f64) -> f64 {
    let mut rec = 0.0;
    for (b, s) in seqs.iter().enumerate() {
        for (t, tok) in s.tokens.iter().enumerate() {
            let row = &logits[(b * L + t) * V..(b * L + t + 1) * V];
            rec += lse(row) - row[*tok as usize];
        }
    }
    let kl: f64 = mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| (0.5 * (m * m + lv.exp() - 1.0 - lv)).max(fb))
        .sum();
    rec + w * kl
}

#[test]
fn elbo_matches_finite_differences() {
    let schema = Schema { attrs_per_aspect: vec![2, 2], vocab_size: V, max_len: L };
    let (w, fb) = (0.7, 0.05);
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(2000 + seed);
        let seqs = small_seqs(&mut rng, &[0, 1, 0, 1]);
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let logits = randn(&mut rng, B * L * V, 1.0);
        // Resample until every KL_i sits clear of the free-bits kink.
        let (mu, logvar) = loop {
            let mu = randn(&mut rng, B * D, 1.0);
            let lv = randn(&mut rng, B * D, 0.5);
            let clear = mu.iter().zip(&lv).all(|(m, l)| (0.5 * (m * m + l.exp() - 1.0 - l) - fb).abs() > 0.02);
            if clear {
                break (mu, lv);
            }
        };

        let mut g = Graph::new();
        let lv_ = g.param(Tensor::matrix(B, L * V, to_f32(&logits)).unwrap()).unwrap();
        let mu_ = g.param(Tensor::matrix(B, D, to_f32(&mu)).unwrap()).unwrap();
        let var_ = g.param(Tensor::matrix(B, D, to_f32(&logvar)).unwrap()).unwrap();
        let loss = elbo_loss(&mut g, lv_, &refs, &schema, mu_, var_, w as f32, fb as f32).unwrap();
        let value = g.item(loss).unwrap() as f64;
        let oracle = elbo_oracle(&logits, &mu, &logvar, &seqs, w, fb);
        assert!((value - oracle).abs() < 1e-4 * oracle.abs().max(1.0));

        let grads = g.backward(loss).unwrap();
        let mut auto = to_f64(grads.get(lv_).data());
        auto.extend(to_f64(grads.get(mu_).data()));
        auto.extend(to_f64(grads.get(var_).data()));

        let n_log = logits.len();
        let mut x = logits.clone();
        x.extend(&mu);
        x.extend(&logvar);
        let fd = central_diff(&x, |p| {
            elbo_oracle(&p[..n_log], &p[n_log..n_log + B * D], &p[n_log + B * D..], &seqs, w, fb)
        });
        let err = rel_err(&auto, &fd);
        assert!(err < REL_TOL, "L_E seed {seed}: relative error {err:.3e}");
    }
}

fn classification_oracle(z: &[f64], weights: &[Vec<f64>], biases: &[Vec<f64>], labels: &[(usize, usize)]) -> f64 {
    let mut total = 0.0;
    for (i, (n, j)) in labels.iter().enumerate() {
        let k = biases[*n].len();
        let zi = &z[i * D..(i + 1) * D];
        let logits: Vec<f64> =
            (0..k).map(|c| biases[*n][c] + (0..D).map(|r| zi[r] * weights[*n][r * k + c]).sum::<f64>()).collect();
        total += lse(&logits) - logits[*j];
    }
    total
}

#[test]
fn classification_matches_finite_differences() {
    let ks = [2usize, 4];
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(3000 + seed);
        let labels: Vec<(usize, usize)> = (0..B).map(|i| (i % 2, rng.below(ks[i % 2]))).collect();
        let z = randn(&mut rng, B * D, 1.0);
        let weights: Vec<Vec<f64>> = ks.iter().map(|k| randn(&mut rng, D * k, 0.8)).collect();
        let biases: Vec<Vec<f64>> = ks.iter().map(|k| randn(&mut rng, *k, 0.3)).collect();

        let mut g = Graph::new();
        let zv = g.param(Tensor::matrix(B, D, to_f32(&z)).unwrap()).unwrap();
        let heads: Vec<_> = ks
            .iter()
            .enumerate()
            .map(|(n, k)| {
                let lin = Linear {
                    weight: Tensor::matrix(D, *k, to_f32(&weights[n])).unwrap(),
                    bias: Tensor::vector(to_f32(&biases[n])),
                };
                lin.bind(&mut g, true).unwrap()
            })
            .collect();
        let loss = classification_loss(&mut g, zv, &heads, &labels).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut auto = to_f64(grads.get(zv).data());
        auto.extend(to_f64(grads.get(heads[1].weight).data()));

        let mut x = z.clone();
        x.extend(&weights[1]);
        let fd = central_diff(&x, |p| {
            let w = vec![weights[0].clone(), p[B * D..].to_vec()];
            classification_oracle(&p[..B * D], &w, &biases, &labels)
        });
        let err = rel_err(&auto, &fd);
        assert!(err < REL_TOL, "L_C seed {seed}: relative error {err:.3e}");
    }
}

fn discrepancy_oracle(z: &[f64], aspects: &[usize], n_aspects: usize) -> f64 {
    let centers: Vec<Vec<f64>> = (0..n_aspects)
        .map(|n| {
            let rows: Vec<usize> = (0..aspects.len()).filter(|i| aspects[*i] == n).collect();
            (0..D).map(|c| rows.iter().map(|i| z[i * D + c]).sum::<f64>() / rows.len() as f64).collect()
        })
        .collect();
    let mut total = 0.0;
    for a in 0..n_aspects {
        for b in a + 1..n_aspects {
            total += centers[a].iter().zip(&centers[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        }
    }
    total
}

#[test]
fn discrepancy_matches_finite_differences() {
    let aspects = [0usize, 1, 2, 0, 1, 2];
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(4000 + seed);
        let z = randn(&mut rng, aspects.len() * D, 1.0);
        let mut g = Graph::new();
        let zv = g.param(Tensor::matrix(aspects.len(), D, to_f32(&z)).unwrap()).unwrap();
        let disc = aspect_discrepancy_loss(&mut g, zv, &aspects, 3).unwrap();
        let auto = to_f64(g.backward(disc.loss).unwrap().get(zv).data());
        let fd = central_diff(&z, |p| discrepancy_oracle(p, &aspects, 3));
        let err = rel_err(&auto, &fd);
        assert!(err < REL_TOL, "L_D seed {seed}: relative error {err:.3e}");
    }
}

fn mlp_oracle(model: &LatentClassifier, z: &[f64]) -> Vec<f64> {
    let mut h = z.to_vec();
    let last = model.net.layers.len() - 1;
    for (i, layer) in model.net.layers.iter().enumerate() {
        let (inp, out) = (layer.inputs(), layer.outputs());
        let w = to_f64(layer.weight.data());
        let b = to_f64(layer.bias.data());
        let mut next: Vec<f64> = (0..out).map(|c| b[c] + (0..inp).map(|r| h[r] * w[r * out + c]).sum::<f64>()).collect();
        if i < last {
            next.iter_mut().for_each(|v| *v = v.tanh());
        }
        h = next;
    }
    h
}

#[test]
fn energy_matches_finite_differences() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(5000 + seed);
        let model = EnergyModel {
            latent_dim: D,
            classifiers: vec![
                LatentClassifier::new(D, 2, Some(6), &mut rng),
                LatentClassifier::new(D, 4, Some(6), &mut rng),
            ],
        };
        let target = AttributeTarget::new(vec![(0, rng.below(2)), (1, rng.below(4))], vec![1.0, 0.6]).unwrap();
        let z = randn(&mut rng, D, 1.0);

        let mut g = Graph::new();
        let vars = model.bind(&mut g, false).unwrap();
        let zv = g.param(Tensor::matrix(1, D, to_f32(&z)).unwrap()).unwrap();
        let e = total_energy_graph(&mut g, &vars, zv, &target).unwrap();
        let auto = to_f64(g.backward(e).unwrap().get(zv).data());

        let oracle = |p: &[f64]| -> f64 {
            target
                .targets
                .iter()
                .zip(&target.weights)
                .map(|((n, j), w)| {
                    let logits = mlp_oracle(&model.classifiers[*n], p);
                    *w as f64 * (lse(&logits) - logits[*j])
                })
                .sum()
        };
        assert!((g.item(e).unwrap() as f64 - oracle(&z)).abs() < 1e-5);
        let fd = central_diff(&z, oracle);
        let err = rel_err(&auto, &fd);
        assert!(err < REL_TOL, "E seed {seed}: relative error {err:.3e}");
    }
}

/// Gradient of the summed objective with respect to the VAE parameters
/// equals the sum of the per-component gradients.
#[test]
fn total_loss_gradient_is_sum_of_components() {
    let schema = Schema { attrs_per_aspect: vec![2, 2], vocab_size: V, max_len: L };
    let mut rng = Rng::new(6000);
    let model = VaeModel::new(schema.clone(), VaeConfig { latent_dim: D, embed_dim: 4, hidden: 5 }, &mut rng).unwrap();
    let seqs = small_seqs(&mut rng, &[0, 1, 0, 1]);
    let eps = Tensor::standard_normal(&[B, D], &mut rng);

    // 0..3 select one component, 3 the full sum.
    let grads_for = |which: usize| -> Vec<Tensor> {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true).unwrap();
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let (mu, lv) = encode_graph(&mut g, &vars, &refs).unwrap();
        let z = reparameterize(&mut g, mu, lv, eps.clone()).unwrap();
        let logits = vars.decoder.forward(&mut g, z).unwrap();
        let le = elbo_loss(&mut g, logits, &refs, &schema, mu, lv, 0.5, 0.05).unwrap();
        let labels: Vec<(usize, usize)> = seqs.iter().map(|s| (s.aspect, s.attribute)).collect();
        let lc = classification_loss(&mut g, z, &vars.heads, &labels).unwrap();
        let aspects: Vec<usize> = seqs.iter().map(|s| s.aspect).collect();
        let ld = aspect_discrepancy_loss(&mut g, z, &aspects, 2).unwrap().loss;
        let loss = match which {
            0 => le,
            1 => lc,
            2 => ld,
            _ => total_loss(&mut g, le, lc, ld).unwrap(),
        };
        let mut grads = g.backward(loss).unwrap();
        take_grads(&mut grads, &vars.all())
    };
    let parts: Vec<Vec<Tensor>> = (0..3).map(grads_for).collect();
    let total = grads_for(3);
    assert_eq!(total.len(), model.named_params().len());
    for (i, t) in total.iter().enumerate() {
        for (k, v) in t.data().iter().enumerate() {
            let s: f32 = parts.iter().map(|p| p[i].data()[k]).sum();
            assert!((v - s).abs() <= 1e-5 * (1.0 + s.abs()), "param {i} entry {k}: {v} vs {s}");
        }
    }
}
