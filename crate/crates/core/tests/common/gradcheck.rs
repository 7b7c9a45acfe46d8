//! Finite-difference gradient checks. Each case builds one random
//! configuration from `seed` and returns the worst relative error it saw.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use coin_core::diffcore::{backward_chain, l2_normalize_rows, Chain, Layer};
use coin_core::losses::{combined_loss, cross_entropy, sup_con_loss, LabeledBatch};
use coin_core::model::{init_params, ModelParams, StackConfig};
use coin_core::pipeline::instance_discrimination_loss;

use super::{fd_rel_error, rand_matrix};

pub type Case = (&'static str, fn(u64) -> f64);

pub const CASES: &[Case] = &[
    ("linear_layer_gradients", linear_layer_gradients),
    ("relu_and_normalize_gradients", relu_and_normalize_gradients),
    ("two_layer_mlp_gradients", two_layer_mlp_gradients),
    ("sup_con_loss_gradient_through_normalisation", sup_con_loss_gradient_through_normalisation),
    ("cross_entropy_gradient", cross_entropy_gradient),
    ("combined_loss_gradient_through_full_stack", combined_loss_gradient_through_full_stack),
    ("ssl_loss_gradient_through_encoder_and_projector", ssl_loss_gradient_through_encoder_and_projector),
];

pub fn weighted_sum(y: &Array2<f64>, g: &Array2<f64>) -> f64 {
    (y * g).sum()
}

/// Moves every entry at least `gap` away from zero so ReLU kinks are not
/// straddled by the finite-difference probe.
pub fn away_from_zero(m: &mut Array2<f64>, gap: f64) {
    m.mapv_inplace(|v| if v.abs() < gap { gap.copysign(v) } else { v });
}

pub fn linear_layer_gradients(seed: u64) -> f64 {
    let mut worst = 0.0f64;
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, din, dout) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
        let x = rand_matrix(&mut rng, n, din, 1.0);
        let w = rand_matrix(&mut rng, din, dout, 1.0);
        let b = rand_matrix(&mut rng, 1, dout, 1.0);
        let up = rand_matrix(&mut rng, n, dout, 1.0);
        let b1 = b.row(0).to_owned();
        let g = backward_chain(&[Layer::Linear { w: w.view(), b: b1.view() }], x.view(), up.view()).unwrap();
        let lg = g.layers[0].as_ref().unwrap();

        let fx = |xx: &Array2<f64>| {
            let chain = Chain::new(vec![Layer::Linear { w: w.view(), b: b1.view() }]);
            weighted_sum(&chain.forward(xx.view()).unwrap(), &up)
        };
        worst = worst.max(fd_rel_error(&g.input, &x, fx));
        let fw = |ww: &Array2<f64>| {
            let chain = Chain::new(vec![Layer::Linear { w: ww.view(), b: b1.view() }]);
            weighted_sum(&chain.forward(x.view()).unwrap(), &up)
        };
        worst = worst.max(fd_rel_error(&lg.w, &w, fw));
        let fb = |bb: &Array2<f64>| {
            let brow = bb.row(0).to_owned();
            let chain = Chain::new(vec![Layer::Linear { w: w.view(), b: brow.view() }]);
            weighted_sum(&chain.forward(x.view()).unwrap(), &up)
        };
        let gb = lg.b.clone().insert_axis(Axis(0));
        worst = worst.max(fd_rel_error(&gb, &b, fb));
    }
    worst
}

pub fn relu_and_normalize_gradients(seed: u64) -> f64 {
    let mut worst = 0.0f64;
    {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (n, d) = (rng.random_range(1..6), rng.random_range(1..7));
        let mut x = rand_matrix(&mut rng, n, d, 1.0);
        away_from_zero(&mut x, 1e-3);
        let up = rand_matrix(&mut rng, n, d, 1.0);

        let g = backward_chain(&[Layer::Relu], x.view(), up.view()).unwrap();
        let f = |xx: &Array2<f64>| weighted_sum(&coin_core::diffcore::relu(xx.view()), &up);
        worst = worst.max(fd_rel_error(&g.input, &x, f));

        let g = backward_chain(&[Layer::L2Normalize], x.view(), up.view()).unwrap();
        let f = |xx: &Array2<f64>| weighted_sum(&l2_normalize_rows(xx.view()).unwrap(), &up);
        worst = worst.max(fd_rel_error(&g.input, &x, f));
    }
    worst
}

pub fn two_layer_mlp_gradients(seed: u64) -> f64 {
    let mut worst = 0.0f64;
    {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (n, din, hidden, dout) = (4, 5, 6, 3);
        let x = rand_matrix(&mut rng, n, din, 1.0);
        let w1 = rand_matrix(&mut rng, din, hidden, 0.7);
        let b1 = Array1::from_shape_fn(hidden, |_| rng.random_range(-0.5..0.5));
        let w2 = rand_matrix(&mut rng, hidden, dout, 0.7);
        let b2 = Array1::from_shape_fn(dout, |_| rng.random_range(-0.5..0.5));
        let up = rand_matrix(&mut rng, n, dout, 1.0);
        let build = |w1: &Array2<f64>, w2: &Array2<f64>, xx: &Array2<f64>| {
            let chain = Chain::new(vec![
                Layer::Linear { w: w1.view(), b: b1.view() },
                Layer::Relu,
                Layer::Linear { w: w2.view(), b: b2.view() },
            ]);
            weighted_sum(&chain.forward(xx.view()).unwrap(), &up)
        };
        let layers = [
            Layer::Linear { w: w1.view(), b: b1.view() },
            Layer::Relu,
            Layer::Linear { w: w2.view(), b: b2.view() },
        ];
        let g = backward_chain(&layers, x.view(), up.view()).unwrap();
        let grads: Vec<_> = g.linear().collect();
        worst = worst.max(fd_rel_error(&g.input, &x, |xx| build(&w1, &w2, xx)));
        worst = worst.max(fd_rel_error(&grads[0].w, &w1, |ww| build(ww, &w2, &x)));
        worst = worst.max(fd_rel_error(&grads[1].w, &w2, |ww| build(&w1, ww, &x)));
    }
    worst
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

pub fn sup_con_loss_gradient_through_normalisation(seed: u64) -> f64 {
    let mut worst = 0.0f64;
    {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let n = rng.random_range(2..9);
        let d = rng.random_range(2..6);
        let labels = random_labels(&mut rng, n, 3);
        let tau = [0.1, 0.3, 0.5, 1.0][seed as usize % 4];
        let x = rand_matrix(&mut rng, n, d, 1.0);
        let f = |xx: &Array2<f64>| {
            let v = l2_normalize_rows(xx.view()).unwrap();
            sup_con_loss(LabeledBatch::new(v.view(), &labels).unwrap(), tau).unwrap().value
        };
        let v = l2_normalize_rows(x.view()).unwrap();
        let loss = sup_con_loss(LabeledBatch::new(v.view(), &labels).unwrap(), tau).unwrap();
        let g = backward_chain(&[Layer::L2Normalize], x.view(), loss.grad.view()).unwrap();
        let err = fd_rel_error(&g.input, &x, f);
        worst = worst.max(err);
    }
    worst
}

pub fn cross_entropy_gradient(seed: u64) -> f64 {
    let mut worst = 0.0f64;
    {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let n = rng.random_range(1..8);
        let k = rng.random_range(2..6);
        let labels = random_labels(&mut rng, n, k);
        let logits = rand_matrix(&mut rng, n, k, 3.0);
        let r = cross_entropy(logits.view(), &labels).unwrap();
        let err = fd_rel_error(&r.grad, &logits, |l| cross_entropy(l.view(), &labels).unwrap().value);
        worst = worst.max(err);
    }
    worst
}

pub fn small_stack(k: usize) -> StackConfig {
    StackConfig {
        d_in: 5,
        encoder_dims: vec![7],
        d_z: 4,
        projector_dims: vec![6],
        d_v: 3,
        num_classes: k,
    }
}

/// Gives every bias a nonzero value so that no hidden unit sits on a ReLU kink.
pub fn jitter_biases(p: &mut ModelParams, rng: &mut ChaCha8Rng) {
    for d in p.encoder.iter_mut().chain(p.projector.iter_mut()) {
        d.b = Array1::from_shape_fn(d.b.len(), |_| rng.random_range(-0.3..0.3));
    }
    p.classifier.b = Array1::from_shape_fn(p.classifier.b.len(), |_| rng.random_range(-0.3..0.3));
}

pub fn combined_value(p: &ModelParams, x: &Array2<f64>, labels: &[usize], tau: f64, lambda: f64) -> f64 {
    let fwd = p.forward(x.view(), true).unwrap();
    let batch = LabeledBatch::new(fwd.v().view(), labels).unwrap();
    combined_loss(batch, fwd.logits.as_ref().unwrap().view(), tau, lambda).unwrap().value
}

pub fn combined_loss_gradient_through_full_stack(seed: u64) -> f64 {
    let mut worst = 0.0f64;
    {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let k = 3;
        let cfg = small_stack(k);
        let mut p = init_params(&cfg, &mut rng).unwrap();
        jitter_biases(&mut p, &mut rng);
        let n = rng.random_range(3..8);
        let x = rand_matrix(&mut rng, n, cfg.d_in, 1.0);
        let labels = random_labels(&mut rng, n, k);
        let (tau, lambda) = (0.3, [0.1, 1.0][seed as usize % 2]);

        let fwd = p.forward(x.view(), true).unwrap();
        let batch = LabeledBatch::new(fwd.v().view(), &labels).unwrap();
        let loss = combined_loss(batch, fwd.logits.as_ref().unwrap().view(), tau, lambda).unwrap();
        let grads = p.backward(&fwd, loss.grad_v.view(), Some(loss.grad_logits.view())).unwrap();

        for (li, g) in grads.encoder.iter().enumerate() {
            let err = fd_rel_error(&g.w, &p.encoder[li].w, |w| {
                let mut q = p.clone();
                q.encoder[li].w = w.clone();
                combined_value(&q, &x, &labels, tau, lambda)
            });
            worst = worst.max(err);
        }
        for (li, g) in grads.projector.iter().enumerate() {
            let err = fd_rel_error(&g.w, &p.projector[li].w, |w| {
                let mut q = p.clone();
                q.projector[li].w = w.clone();
                combined_value(&q, &x, &labels, tau, lambda)
            });
            worst = worst.max(err);
        }
        let err = fd_rel_error(&grads.classifier.w, &p.classifier.w, |w| {
            let mut q = p.clone();
            q.classifier.w = w.clone();
            combined_value(&q, &x, &labels, tau, lambda)
        });
        worst = worst.max(err);
        let gb = grads.classifier.b.clone().insert_axis(Axis(0));
        let b0 = p.classifier.b.clone().insert_axis(Axis(0));
        let err = fd_rel_error(&gb, &b0, |b| {
            let mut q = p.clone();
            q.classifier.b = b.row(0).to_owned();
            combined_value(&q, &x, &labels, tau, lambda)
        });
        worst = worst.max(err);
    }
    worst
}

pub fn ssl_loss_gradient_through_encoder_and_projector(seed: u64) -> f64 {
    let mut worst = 0.0f64;
    {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let cfg = small_stack(2);
        let mut p = init_params(&cfg, &mut rng).unwrap();
        jitter_biases(&mut p, &mut rng);
        let n = rng.random_range(2..6);
        let a = rand_matrix(&mut rng, n, cfg.d_in, 1.0);
        let b = &a + &rand_matrix(&mut rng, n, cfg.d_in, 0.2);
        let value = |q: &ModelParams, a: &Array2<f64>| {
            let va = q.project(q.encode(a.view()).unwrap().view()).unwrap();
            let vb = q.project(q.encode(b.view()).unwrap().view()).unwrap();
            instance_discrimination_loss(va.view(), vb.view(), 0.5).unwrap().0
        };
        let fa = p.forward(a.view(), false).unwrap();
        let fb = p.forward(b.view(), false).unwrap();
        let (_, ga, gb) = instance_discrimination_loss(fa.v().view(), fb.v().view(), 0.5).unwrap();
        let grads_a = p.backward(&fa, ga.view(), None).unwrap();
        let grads_b = p.backward(&fb, gb.view(), None).unwrap();

        for li in 0..p.encoder.len() {
            let total = &grads_a.encoder[li].w + &grads_b.encoder[li].w;
            let err = fd_rel_error(&total, &p.encoder[li].w, |w| {
                let mut q = p.clone();
                q.encoder[li].w = w.clone();
                value(&q, &a)
            });
            worst = worst.max(err);
        }
        for li in 0..p.projector.len() {
            let total = &grads_a.projector[li].w + &grads_b.projector[li].w;
            let err = fd_rel_error(&total, &p.projector[li].w, |w| {
                let mut q = p.clone();
                q.projector[li].w = w.clone();
                value(&q, &a)
            });
            worst = worst.max(err);
        }
        // view-a input gradient through the whole stack
        let chain_in = {
            let proj = p.projector_chain().backward(&fa.projector, ga.view()).unwrap();
            p.encoder_chain().backward(&fa.encoder, proj.input.view()).unwrap().input
        };
        let err = fd_rel_error(&chain_in, &a, |aa| value(&p, aa));
        worst = worst.max(err);
    }
    worst
}

