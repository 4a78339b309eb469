#![allow(dead_code)]

use cmal_core::consistency::{batch_objective, LossWeights, ObjectiveConfig, PROB_FLOOR};
use cmal_core::gradcore::{Tape, Tensor};
use cmal_core::model::{Modality, ModelConfig, ModelParams};
use cmal_core::ClassLabel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twofloat::TwoFloat;

pub const FD_STEP: f64 = 1e-5;

/// `|a − b| / max(1e-8, |a| + |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// A small random model and batch.
#[derive(Debug, Clone)]
pub struct Case {
    pub params: ModelParams,
    pub x_eeg: Tensor,
    pub x_face: Tensor,
    pub labels: Vec<ClassLabel>,
    pub objective: ObjectiveConfig,
}

/// Smallest hidden pre-activation magnitude and smallest embedding norm over the batch.
pub fn smoothness(case: &Case) -> (f64, f64) {
    let mut kink = f64::INFINITY;
    let mut norm = f64::INFINITY;
    for (m, x) in [(Modality::Eeg, &case.x_eeg), (Modality::Face, &case.x_face)] {
        let w = case.params.get(&format!("enc.{m}.0.w")).unwrap();
        let b = case.params.get(&format!("enc.{m}.0.b")).unwrap();
        let pre = x.matmul(w).unwrap();
        for r in 0..pre.rows() {
            for (v, bias) in pre.row(r).iter().zip(b.data()) {
                kink = kink.min((v + bias).abs());
            }
        }
        let z = case.params.embed(m, x).unwrap();
        for r in 0..z.rows() {
            norm = norm.min(z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt());
        }
    }
    (kink, norm)
}

/// Like [`random_case`], redrawn until every hidden pre-activation is at
/// least `1e-3` from the ReLU kink and every embedding has norm above `0.1`.
/// Near either point central differences do not approximate the gradient.
pub fn smooth_case(seed: u64, n: usize, max_dim: usize) -> Case {
    (0..)
        .map(|attempt| random_case(seed * 1000 + attempt, n, max_dim))
        .find(|c| {
            let (kink, norm) = smoothness(c);
            kink > 1e-3 && norm > 0.1
        })
        .unwrap()
}

pub fn random_case(seed: u64, n: usize, max_dim: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = || rng.random_range(2..=max_dim);
    let cfg = ModelConfig {
        eeg_input_dim: dim(),
        face_input_dim: dim(),
        hidden: vec![dim()],
        embedding_dim: dim(),
        classes: 2,
    };
    let params = ModelParams::init(cfg.clone(), seed).unwrap();
    let x_eeg = random_tensor(&mut rng, n, cfg.eeg_input_dim, 2.0);
    let x_face = random_tensor(&mut rng, n, cfg.face_input_dim, 2.0);
    let labels = (0..n).map(|_| rng.random_range(0..cfg.classes)).collect();
    let objective = ObjectiveConfig {
        weights: LossWeights::new(rng.random_range(0.1..2.0), rng.random_range(0.1..2.0), rng.random_range(0.1..2.0)),
        temperature: rng.random_range(0.07..1.0),
        ..ObjectiveConfig::default()
    };
    Case {
        params,
        x_eeg,
        x_face,
        labels,
        objective,
    }
}

/// Values of `[L_sim, L_rel, L_task, L_total]`, optionally with fixed targets.
pub fn loss_terms(case: &Case, params: &ModelParams, targets: Option<&[f64]>) -> ([f64; 4], Vec<f64>) {
    let mut tape = Tape::new();
    let model = params.bind(&mut tape, false);
    let obj = batch_objective(&mut tape, &model, &case.x_eeg, &case.x_face, &case.labels, &case.objective, targets).unwrap();
    let v = |x| tape.value(x).item().unwrap();
    (
        [v(obj.similarity), v(obj.reliability), v(obj.task), v(obj.total)],
        obj.targets.r_star,
    )
}

/// Analytic gradient of every term with respect to every parameter tensor.
pub fn analytic_grads(case: &Case) -> [Vec<Tensor>; 4] {
    let mut out: [Vec<Tensor>; 4] = Default::default();
    for (term, slot) in out.iter_mut().enumerate() {
        let mut tape = Tape::new();
        let model = case.params.bind(&mut tape, true);
        let obj = batch_objective(&mut tape, &model, &case.x_eeg, &case.x_face, &case.labels, &case.objective, None).unwrap();
        let loss = [obj.similarity, obj.reliability, obj.task, obj.total][term];
        let g = tape.backward(loss).unwrap();
        *slot = model.vars().iter().map(|&v| g.wrt(v)).collect();
    }
    out
}

type Dd = TwoFloat;
type Mat = Vec<Vec<Dd>>;

fn dd_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).iter().map(|&v| Dd::from(v)).collect()).collect()
}

fn affine(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|j| {
                    let mut acc = Dd::from(b.get(0, j));
                    for (k, v) in row.iter().enumerate() {
                        acc += *v * w.get(k, j);
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn dd_encode(params: &ModelParams, m: Modality, x: &Tensor) -> Mat {
    let layers = params.config().hidden.len() + 1;
    let mut h = dd_mat(x);
    for l in 0..layers {
        let w = params.get(&format!("enc.{m}.{l}.w")).unwrap();
        let b = params.get(&format!("enc.{m}.{l}.b")).unwrap();
        h = affine(&h, w, b);
        if l + 1 < layers {
            for v in h.iter_mut().flatten() {
                if *v < 0.0 {
                    *v = Dd::from(0.0);
                }
            }
        }
    }
    h
}

/// Quotient with one residual correction; plain `TwoFloat` division is only
/// accurate to about 1e-17.
fn dd_div(a: Dd, b: Dd) -> Dd {
    let q = a / b;
    q + (a - q * b) / b.hi()
}

/// `e^x` to full double-double precision: `x = k·ln2 + r`, then a Taylor
/// series on `r / 2^10` squared back up.
fn dd_exp(x: Dd) -> Dd {
    let ln2 = twofloat::consts::LN_2;
    let k = (x / ln2).hi().round();
    let r = (x - ln2 * k) * (1.0 / 1024.0);
    let mut term = Dd::from(1.0);
    let mut sum = Dd::from(1.0);
    for i in 1..=14 {
        term = dd_div(term * r, Dd::from(i as f64));
        sum += term;
    }
    for _ in 0..10 {
        sum = sum * sum;
    }
    sum * 2f64.powi(k as i32)
}

/// Natural log by Newton steps on [`dd_exp`].
fn dd_ln(x: Dd) -> Dd {
    let mut y = Dd::from(x.hi().ln());
    for _ in 0..3 {
        y += x * dd_exp(-y) - 1.0;
    }
    y
}

fn dd_log_sum_exp(xs: &[Dd]) -> Dd {
    let max = xs.iter().copied().fold(xs[0], |a, b| if b > a { b } else { a });
    let total = xs.iter().fold(Dd::from(0.0), |acc, v| acc + dd_exp(*v - max));
    max + dd_ln(total)
}

fn dd_sigmoid(x: Dd) -> Dd {
    dd_div(Dd::from(1.0), Dd::from(1.0) + dd_exp(-x))
}

/// The objective recomputed from scratch in double-double arithmetic, so
/// that central differences are not swamped by f64 rounding in the forward
/// pass. Returns `[L_sim, L_rel, L_task, L_total]`.
pub fn precise_loss_terms(case: &Case, params: &ModelParams, r_star: &[f64]) -> [Dd; 4] {
    let n = case.labels.len();
    let nf = n as f64;
    let ze = dd_encode(params, Modality::Eeg, &case.x_eeg);
    let zf = dd_encode(params, Modality::Face, &case.x_face);
    let unit = |z: &Mat| -> Mat {
        z.iter()
            .map(|row| {
                let norm = row.iter().fold(Dd::from(0.0), |a, v| a + *v * *v).sqrt() + 1e-12;
                row.iter().map(|v| dd_div(*v, norm)).collect()
            })
            .collect()
    };
    let (ue, uf) = (unit(&ze), unit(&zf));
    let t = case.objective.temperature;
    let logits: Mat = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| ue[i].iter().zip(&uf[j]).fold(Dd::from(0.0), |a, (p, q)| a + *p * *q))
                .map(|v| dd_div(v, Dd::from(t)))
                .collect()
        })
        .collect();
    let mut sim = Dd::from(0.0);
    for i in 0..n {
        let col: Vec<Dd> = (0..n).map(|j| logits[j][i]).collect();
        sim += dd_log_sum_exp(&logits[i]) - logits[i][i];
        sim += dd_log_sum_exp(&col) - logits[i][i];
    }
    let sim = dd_div(sim * 0.5, Dd::from(nf));

    let mut rel = Dd::from(0.0);
    for (m, z) in [(Modality::Eeg, &ze), (Modality::Face, &zf)] {
        let w = params.get(&format!("head.rel.{m}.w")).unwrap();
        let b = params.get(&format!("head.rel.{m}.b")).unwrap();
        for (row, target) in affine(z, w, b).iter().zip(r_star) {
            let d = dd_sigmoid(row[0]) - *target;
            rel += d * d;
        }
    }
    let rel = dd_div(rel * 0.5, Dd::from(nf));

    let w = params.get("head.task.w").unwrap();
    let b = params.get("head.task.b").unwrap();
    let mut task = Dd::from(0.0);
    for (row, &label) in affine(&ze, w, b).iter().zip(&case.labels) {
        let p = dd_exp(row[label] - dd_log_sum_exp(row));
        let p = if p < PROB_FLOOR { Dd::from(PROB_FLOOR) } else { p };
        task -= dd_ln(p);
    }
    let task = dd_div(task, Dd::from(nf));
    let wts = case.objective.weights;
    let total = sim * wts.similarity + rel * wts.reliability + task * wts.task;
    [sim, rel, task, total]
}

/// Largest relative error per term between analytic and central-difference gradients.
///
/// The losses for the differences come from [`precise_loss_terms`] and the
/// reliability targets are held at their unperturbed values, matching the
/// stop-gradient in the analytic pass.
pub fn grad_check(case: &Case) -> [f64; 4] {
    let (_, r_star) = loss_terms(case, &case.params, None);
    let analytic = analytic_grads(case);
    let mut worst = [0.0f64; 4];
    let mut params = case.params.clone();
    for t in 0..params.tensors().len() {
        for i in 0..params.tensors()[t].len() {
            let orig = params.tensors()[t].data()[i];
            let (up, down) = (orig + FD_STEP, orig - FD_STEP);
            params.tensors_mut()[t].data_mut()[i] = up;
            let plus = precise_loss_terms(case, &params, &r_star);
            params.tensors_mut()[t].data_mut()[i] = down;
            let minus = precise_loss_terms(case, &params, &r_star);
            params.tensors_mut()[t].data_mut()[i] = orig;
            for term in 0..4 {
                let fd: f64 = ((plus[term] - minus[term]) / (up - down)).into();
                let a = analytic[term][t].data()[i];
                worst[term] = worst[term].max(rel_err(a, fd));
            }
        }
    }
    worst
}

/// One randomized acquisition/transfer sequence on a random partition.
/// Returns the number of transfers made, or a description of the first
/// violated pool property.
pub fn fuzz_pool_sequence(seed: u64) -> Result<usize, String> {
    use cmal_core::pool::{rank_and_select, SamplePool};
    use std::collections::{BTreeMap, BTreeSet};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: u64 = rng.random_range(3..150);
    let mut labeled = BTreeMap::new();
    let mut unlabeled = BTreeSet::new();
    let mut test = BTreeSet::new();
    let mut truth = BTreeMap::new();
    for id in 0..n {
        truth.insert(id, rng.random_range(0..3usize));
        match rng.random_range(0..10) {
            0 => {
                labeled.insert(id, truth[&id]);
            }
            1 | 2 => {
                test.insert(id);
            }
            _ => {
                unlabeled.insert(id);
            }
        }
    }
    let mut pool = SamplePool::new(n as usize, labeled, unlabeled, test.clone()).map_err(|e| e.to_string())?;
    let levels = rng.random_range(1..6u32);
    let mut transfers = 0;
    let mut ever_acquired = BTreeSet::new();
    while !pool.unlabeled().is_empty() {
        let before = pool.clone();
        // Quantized scores force ties.
        let scores: Vec<(u64, f64)> = pool
            .unlabeled()
            .iter()
            .map(|&id| (id, rng.random_range(0..levels) as f64 / levels as f64))
            .collect();
        let per_mille = rng.random_range(1..=1000u64);
        let tau = per_mille as f64 / 1000.0;
        let batch = rank_and_select(&scores, tau).map_err(|e| e.to_string())?;

        let size = scores.len() as u64;
        let expected = ((per_mille * size).div_ceil(1000)).min(size) as usize;
        if batch.len() != expected {
            return Err(format!("batch of {} for tau {tau} over {size}, expected {expected}", batch.len()));
        }
        let chosen: BTreeSet<u64> = batch.ids().into_iter().collect();
        if chosen.len() != batch.len() {
            return Err("batch repeats an id".into());
        }
        // Brute-force rank: ids strictly ahead by score, or tied with a smaller id.
        let rank = |id: u64, s: f64| scores.iter().filter(|(j, t)| *t > s || (*t == s && *j < id)).count();
        for (pos, &(id, s)) in batch.items.iter().enumerate() {
            if !pool.unlabeled().contains(&id) {
                return Err(format!("{id} selected but not unlabeled"));
            }
            if rank(id, s) != pos {
                return Err(format!("{id} at position {pos} has brute-force rank {}", rank(id, s)));
            }
        }
        // Same scores in another order select the same batch.
        let mut shuffled = scores.clone();
        shuffled.reverse();
        if rank_and_select(&shuffled, tau).map_err(|e| e.to_string())? != batch {
            return Err("selection depends on input order".into());
        }

        // A batch containing an already-labeled id moves nothing.
        if let Some((&old, _)) = pool.labeled().iter().next() {
            let mut bad = batch.ids();
            bad.push(old);
            if pool.transfer(&bad, &truth).is_ok() || pool != before {
                return Err("partially invalid transfer was not rejected atomically".into());
            }
        }
        pool.transfer(&batch.ids(), &truth).map_err(|e| e.to_string())?;
        transfers += 1;

        if pool.labeled_len() + pool.unlabeled_len() + pool.test().len() != n as usize {
            return Err("conservation violated".into());
        }
        if pool.check().is_err() {
            return Err("pool check failed after transfer".into());
        }
        if pool.labeled_len() != before.labeled_len() + batch.len() {
            return Err("labeled pool did not grow by the batch".into());
        }
        if pool.test() != &test {
            return Err("test set changed".into());
        }
        for id in batch.ids() {
            if pool.labeled().get(&id) != Some(&truth[&id]) || pool.unlabeled().contains(&id) {
                return Err(format!("{id} not moved with its label"));
            }
            if !ever_acquired.insert(id) {
                return Err(format!("{id} acquired twice"));
            }
        }
        if pool.acquired() != &ever_acquired {
            return Err("acquired set diverged".into());
        }
        // Re-submitting the same batch is refused and changes nothing.
        let snapshot = pool.clone();
        if !batch.is_empty() && (pool.transfer(&batch.ids(), &truth).is_ok() || pool != snapshot) {
            return Err("repeated batch was accepted".into());
        }
    }
    Ok(transfers)
}

/// A random probability vector; a share of them are one-hot, uniform or sparse.
pub fn random_distribution(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let c = rng.random_range(2..=10);
    match rng.random_range(0..10) {
        0 => {
            let mut p = vec![0.0; c];
            p[rng.random_range(0..c)] = 1.0;
            p
        }
        1 => vec![1.0 / c as f64; c],
        kind => {
            let mut p: Vec<f64> = (0..c)
                .map(|_| if kind == 2 && rng.random::<bool>() { 0.0 } else { rng.random::<f64>().powi(3) })
                .collect();
            if p.iter().all(|v| *v == 0.0) {
                p[0] = 1.0;
            }
            let total: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= total);
            p
        }
    }
}

/// Checks entropy bounds and extremes on `count` random distributions and
/// top-k consistency of the induced ranking. Returns the first violation.
pub fn fuzz_entropy(seed: u64, count: usize) -> Result<(), String> {
    use cmal_core::pool::{entropy, rank_and_select};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(count);
    for id in 0..count as u64 {
        let p = random_distribution(&mut rng);
        let c = p.len() as f64;
        let h = entropy(&p).map_err(|e| format!("{p:?}: {e}"))?;
        let oracle: f64 = p.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum();
        if (h - oracle).abs() > 1e-12 {
            return Err(format!("{p:?}: entropy {h} vs direct sum {oracle}"));
        }
        if !(0.0..=c.ln() + 1e-12).contains(&h) {
            return Err(format!("{p:?}: entropy {h} outside [0, ln {c}]"));
        }
        let max = p.iter().copied().fold(0.0, f64::max);
        let one_hot = max == 1.0;
        let uniform = p.iter().all(|v| (v - 1.0 / c).abs() < 1e-12);
        if one_hot && h != 0.0 {
            return Err(format!("{p:?}: one-hot entropy {h}"));
        }
        if uniform && (h - c.ln()).abs() > 1e-12 {
            return Err(format!("{p:?}: uniform entropy {h}"));
        }
        if h < 1e-12 && max < 1.0 - 1e-9 {
            return Err(format!("{p:?}: near-zero entropy off a one-hot"));
        }
        if c.ln() - h < 1e-12 && p.iter().any(|v| (v - 1.0 / c).abs() > 1e-5) {
            return Err(format!("{p:?}: near-maximal entropy off the uniform"));
        }
        scores.push((id, h));
    }
    for tau in [0.01, 0.05, 0.2, 1.0] {
        let batch = rank_and_select(&scores, tau).map_err(|e| e.to_string())?;
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        if batch.items != sorted[..batch.len()] {
            return Err(format!("top-{} at tau {tau} disagrees with a full sort", batch.len()));
        }
    }
    Ok(())
}
