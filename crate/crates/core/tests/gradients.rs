//! Analytic gradients against central finite differences, and the batch
//! loss against an unbatched reference.

use emphasis::corpus::target_distribution;
use emphasis::model::build_model;
use emphasis::nn::{
    bilstm_backward, bilstm_encode, grad_check, kl_loss, lstm_cell, lstm_cell_backward, relative_error, Linear,
    LstmParams, ParamMut, Parameterized,
};
use emphasis::rng::SplitMix64;
use emphasis::synthetic::random_corpus;
use emphasis::training::{batch_loss, Batch};
use emphasis::{HeadKind, LabelDistribution, ModelConfig};
use ndarray::{Array1, Array2, ArrayViewD};

const EPS: f64 = 1e-5;
/// Through whole sequences many gradients are around 1e-7, where round-off
/// in the loss dominates a 1e-5 difference quotient.
const SEQ_EPS: f64 = 1e-4;

fn uniform(rng: &mut SplitMix64, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.next_f64() * 2.0 - 1.0)
}

fn targets(rng: &mut SplitMix64, n: usize) -> Vec<LabelDistribution> {
    (0..n).map(|_| LabelDistribution::from_emphasis(rng.next_f64())).collect()
}

#[test]
fn linear_layer() {
    let mut rng = SplitMix64::new(11);
    for trial in 0..10 {
        let (out, inp) = (1 + trial % 4, 1 + trial % 5);
        let mut layer = Linear::init(out, inp, trial as u64).unwrap();
        let x = Array1::from_shape_fn(inp, |_| rng.next_f64() - 0.5);
        let c = Array1::from_shape_fn(out, |_| rng.next_f64() - 0.5);
        let report = grad_check(
            &mut layer,
            |l| {
                let y = l.forward(x.view())?;
                l.backward(x.view(), c.view());
                Ok(y.dot(&c))
            },
            EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}

#[test]
fn lstm_cell_parameters_and_inputs() {
    let mut rng = SplitMix64::new(5);
    for trial in 0..10u64 {
        let (d, h) = (1 + trial as usize % 4, 1 + trial as usize % 3);
        let mut p = LstmParams::init(d, h, trial, trial + 100).unwrap();
        let x = Array1::from_shape_fn(d, |_| rng.next_f64() - 0.5);
        let h0 = Array1::from_shape_fn(h, |_| rng.next_f64() - 0.5);
        let c0 = Array1::from_shape_fn(h, |_| rng.next_f64() - 0.5);
        let a = Array1::from_shape_fn(h, |_| rng.next_f64() - 0.5);
        let b = Array1::from_shape_fn(h, |_| rng.next_f64() - 0.5);
        let objective = |p: &LstmParams, x: &Array1<f64>, h0: &Array1<f64>, c0: &Array1<f64>| {
            let (hn, cn, _) = lstm_cell(x.view(), h0.view(), c0.view(), p).unwrap();
            hn.dot(&a) + cn.dot(&b)
        };
        let report = grad_check(
            &mut p,
            |p| {
                let (hn, cn, cache) = lstm_cell(x.view(), h0.view(), c0.view(), p)?;
                lstm_cell_backward(&cache, a.view(), b.view(), p);
                Ok(hn.dot(&a) + cn.dot(&b))
            },
            EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");

        // Gradients with respect to the inputs and previous state.
        let (_, _, cache) = lstm_cell(x.view(), h0.view(), c0.view(), &p).unwrap();
        let (dx, dh, dc) = lstm_cell_backward(&cache, a.view(), b.view(), &mut p.clone());
        for (which, analytic) in [(0, &dx), (1, &dh), (2, &dc)] {
            for i in 0..analytic.len() {
                let mut vars = [x.clone(), h0.clone(), c0.clone()];
                vars[which][i] += EPS;
                let plus = objective(&p, &vars[0], &vars[1], &vars[2]);
                vars[which][i] -= 2.0 * EPS;
                let minus = objective(&p, &vars[0], &vars[1], &vars[2]);
                let numeric = (plus - minus) / (2.0 * EPS);
                assert!(relative_error(analytic[i], numeric) < 1e-5, "input {which}, {i}");
            }
        }
    }
}

struct BiLstm {
    fwd: LstmParams,
    bwd: LstmParams,
}

impl Parameterized for BiLstm {
    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut all = self.fwd.params_mut();
        all.extend(self.bwd.params_mut());
        all
    }

    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut all = self.fwd.params();
        all.extend(self.bwd.params());
        all
    }
}

#[test]
fn bilstm_sequence() {
    let mut rng = SplitMix64::new(8);
    for trial in 0..8u64 {
        let (d, h, n) = (1 + trial as usize % 3, 1 + trial as usize % 4, 1 + trial as usize % 5);
        let mut net = BiLstm {
            fwd: LstmParams::init(d, h, trial, trial + 1).unwrap(),
            bwd: LstmParams::init(d, h, trial + 2, trial + 3).unwrap(),
        };
        // Random biases so the forget-gate bias is not the only nonzero one.
        for p in net.params_mut() {
            if p.value.ndim() == 1 {
                p.value.into_iter().for_each(|v| *v += rng.next_f64() - 0.5);
            }
        }
        let xs = uniform(&mut rng, (n, d));
        let r = uniform(&mut rng, (n, 2 * h));
        let report = grad_check(
            &mut net,
            |net| {
                let (states, cache) = bilstm_encode(xs.view(), &net.fwd, &net.bwd)?;
                bilstm_backward(&cache, r.view(), &mut net.fwd, &mut net.bwd);
                Ok((&states.states * &r).sum())
            },
            SEQ_EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");

        let (_, cache) = bilstm_encode(xs.view(), &net.fwd, &net.bwd).unwrap();
        let (mut fwd, mut bwd) = (net.fwd.clone(), net.bwd.clone());
        let dxs = bilstm_backward(&cache, r.view(), &mut fwd, &mut bwd);
        for ((t, j), &a) in dxs.indexed_iter() {
            let mut shifted = xs.clone();
            shifted[[t, j]] += SEQ_EPS;
            let plus = (&bilstm_encode(shifted.view(), &net.fwd, &net.bwd).unwrap().0.states * &r).sum();
            shifted[[t, j]] -= 2.0 * SEQ_EPS;
            let minus = (&bilstm_encode(shifted.view(), &net.fwd, &net.bwd).unwrap().0.states * &r).sum();
            assert!(relative_error(a, (plus - minus) / (2.0 * SEQ_EPS)) < 1e-4);
        }
    }
}

/// Small random configurations of both heads, with and without the adapter.
fn random_configs(count: usize) -> Vec<(ModelConfig, usize)> {
    let mut rng = SplitMix64::new(2024);
    (0..count)
        .map(|k| {
            let head = if k % 2 == 0 { HeadKind::BiLstm } else { HeadKind::Dense };
            let mut cfg = ModelConfig::new(head, 1 + rng.below(8) as usize);
            cfg.hidden_units = 1 + rng.below(4) as usize;
            cfg.dense_units = 1 + rng.below(4) as usize;
            cfg.adapter = k % 3 == 0;
            cfg.seed = rng.next_u64();
            (cfg, 1 + rng.below(5) as usize)
        })
        .collect()
}

#[test]
fn whole_model_on_random_configurations() {
    let mut rng = SplitMix64::new(99);
    let configs = random_configs(24);
    for (cfg, n) in &configs {
        let mut model = build_model(cfg).unwrap();
        let xs = uniform(&mut rng, (*n, cfg.input_dim));
        let ts = targets(&mut rng, *n);
        let report = grad_check(&mut model, |m| m.loss(xs.view(), &ts, Some(1.0)), SEQ_EPS).unwrap();
        assert!(report.max_rel_error < 1e-4, "{cfg:?}: {report:?}");
    }
    assert!(configs.iter().filter(|(c, _)| c.head == HeadKind::Dense).count() >= 10);
}

#[test]
fn batched_loss_gradient() {
    let (corpus, ef) = random_corpus(4, 5, 5, 9, 3).unwrap();
    let batch = Batch::from_indices(&corpus, &ef, &[0, 1, 2, 3, 4]).unwrap();
    for head in [HeadKind::BiLstm, HeadKind::Dense] {
        let mut cfg = ModelConfig::new(head, 3);
        cfg.hidden_units = 3;
        cfg.dense_units = 4;
        let mut model = build_model(&cfg).unwrap();
        let report = grad_check(&mut model, |m| batch_loss(m, &batch, true), SEQ_EPS).unwrap();
        assert!(report.max_rel_error < 1e-4, "{head}: {report:?}");
    }
}

fn unbatched_reference(model: &emphasis::EmphasisModel, corpus: &emphasis::Corpus, ef: &emphasis::EmbeddingFile, idx: &[usize]) -> f64 {
    let mut total = 0.0;
    for &k in idx {
        let inst = &corpus.instances()[k];
        let preds = model.forward(ef.instances()[k].to_f64().view()).unwrap();
        let ts = target_distribution(inst);
        let per_token: f64 = ts.iter().zip(&preds).map(|(t, p)| kl_loss(t, p)).sum();
        total += per_token / inst.len() as f64;
    }
    total / idx.len() as f64
}

#[test]
fn batch_loss_matches_unbatched_reference() {
    let mut rng = SplitMix64::new(17);
    for trial in 0..20u64 {
        let (corpus, ef) = random_corpus(trial, 12, 7, 9, 4).unwrap();
        let size = 1 + rng.below(12) as usize;
        let idx: Vec<usize> = rng.permutation(12)[..size].to_vec();
        let batch = Batch::from_indices(&corpus, &ef, &idx).unwrap();
        let head = if trial % 2 == 0 { HeadKind::BiLstm } else { HeadKind::Dense };
        let mut cfg = ModelConfig::new(head, 4);
        cfg.hidden_units = 3;
        cfg.dense_units = 5;
        cfg.seed = trial;
        let mut model = build_model(&cfg).unwrap();
        let batched = batch_loss(&mut model, &batch, false).unwrap();
        let reference = unbatched_reference(&model, &corpus, &ef, &idx);
        assert!((batched - reference).abs() < 1e-9, "{batched} vs {reference}");
    }
}

fn gradients(model: &mut emphasis::EmphasisModel) -> Vec<f64> {
    model.params_mut().into_iter().flat_map(|p| p.grad.iter().copied().collect::<Vec<_>>()).collect()
}

#[test]
fn padding_changes_no_gradient() {
    let (corpus, ef) = random_corpus(21, 6, 6, 5, 3).unwrap();
    let batch = Batch::from_indices(&corpus, &ef, &[5, 0, 3, 1]).unwrap();
    let padded = batch.with_extra_padding(4);
    for head in [HeadKind::BiLstm, HeadKind::Dense] {
        let mut cfg = ModelConfig::new(head, 3);
        cfg.hidden_units = 4;
        cfg.adapter = true;
        let mut model = build_model(&cfg).unwrap();
        let loss = batch_loss(&mut model, &batch, true).unwrap();
        let g = gradients(&mut model);
        model.zero_grad();
        let loss_padded = batch_loss(&mut model, &padded, true).unwrap();
        let g_padded = gradients(&mut model);
        assert!((loss - loss_padded).abs() < 1e-12);
        for (a, b) in g.iter().zip(&g_padded) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
