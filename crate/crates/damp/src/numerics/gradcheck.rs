use super::graph::{Graph, NodeId};
use super::optim::ParameterStore;
use super::Result;

/// Central-difference check of backprop gradients for every parameter entry.
///
/// `build` must construct the same deterministic scalar-loss graph each call
/// (dropout disabled or seed-pinned). Returns the maximum relative error
/// with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(mut build: F, store: &mut ParameterStore, step: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParameterStore) -> Result<NodeId>,
{
    let mut g = Graph::new(false, 0);
    let loss = build(&mut g, store)?;
    store.zero_grads();
    g.backward_into(loss, store)?;
    let analytic: Vec<(String, Vec<f64>)> = store
        .names()
        .map(|n| (n.to_string(), store.grad(n).unwrap().data.clone()))
        .collect();
    store.zero_grads();

    let eval = |store: &ParameterStore, build: &mut F| -> Result<f64> {
        let mut g = Graph::new(false, 0);
        let loss = build(&mut g, store)?;
        Ok(g.scalar_value(loss))
    };

    let mut max_rel = 0.0f64;
    for (name, grads) in &analytic {
        for i in 0..grads.len() {
            let orig = store.value(name).unwrap().data[i];
            store.value_mut(name).unwrap().data[i] = orig + step;
            let up = eval(store, &mut build)?;
            store.value_mut(name).unwrap().data[i] = orig - step;
            let down = eval(store, &mut build)?;
            store.value_mut(name).unwrap().data[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grads[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn random_store(seed: u64) -> ParameterStore {
        let mut store = ParameterStore::new(seed);
        store.insert_uniform("w", 3, 4, 0.5);
        store.insert_uniform("b", 3, 1, 0.5);
        store
    }

    #[test]
    fn linear_regression_loss_passes() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let x = Tensor::uniform(4, 1, -1.0, 1.0, &mut rng);
        let y = Tensor::uniform(3, 1, -1.0, 1.0, &mut rng);
        let mut store = random_store(5);
        let err = grad_check(
            |g, store| {
                let w = g.param(store, "w")?;
                let b = g.param(store, "b")?;
                let xi = g.input(x.clone());
                let yi = g.input(y.clone());
                let pred = g.matmul(w, xi)?;
                let pred = g.add(pred, b)?;
                let neg_y = g.affine(yi, -1.0, 0.0);
                let diff = g.add(pred, neg_y)?;
                let sq = g.mul(diff, diff)?;
                let ones = g.input(Tensor::from_vec(1, 3, vec![1.0; 3]));
                g.matmul(ones, sq)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "max rel err {err}");
    }

    #[test]
    fn primitive_composition_passes() {
        // sigmoid/tanh/softmax/log/mul/concat/slice/gather/cross-entropy in one loss
        let mut store = ParameterStore::new(17);
        store.insert_uniform("t", 5, 4, 0.6);
        store.insert_uniform("v", 4, 1, 0.6);
        let err = grad_check(
            |g, store| {
                let t = g.param(store, "t")?;
                let v = g.param(store, "v")?;
                let row = g.gather(t, 2)?;
                let s = g.sigmoid(row);
                let h = g.tanh(v);
                let m = g.mul(s, h)?;
                let cat = g.concat(0, &[m, v])?;
                let top = g.slice_rows(cat, 0, 4)?;
                let sm = g.softmax(top)?;
                let ce = g.cross_entropy(sm, 1)?;
                let lg = g.log(sm);
                let pick = g.slice_rows(lg, 2, 1)?;
                let neg = g.affine(pick, -0.5, 0.0);
                g.add(ce, neg)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "max rel err {err}");
    }

    #[test]
    fn lstm_single_step_passes() {
        use crate::numerics::{lstm_cell, LstmParamNodes};
        let mut store = ParameterStore::new(23);
        LstmParamNodes::init(&mut store, "cell", 3, 4, 0.4);
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        let x = Tensor::uniform(3, 1, -1.0, 1.0, &mut rng);
        let h0 = Tensor::uniform(4, 1, -1.0, 1.0, &mut rng);
        let c0 = Tensor::uniform(4, 1, -1.0, 1.0, &mut rng);
        let err = grad_check(
            |g, store| {
                let p = LstmParamNodes::load(g, store, "cell", 4)?;
                let x = g.input(x.clone());
                let h0 = g.input(h0.clone());
                let c0 = g.input(c0.clone());
                let (h1, c1) = lstm_cell(g, &p, x, h0, c0)?;
                let both = g.concat(0, &[h1, c1])?;
                let sq = g.mul(both, both)?;
                let ones = g.input(Tensor::from_vec(1, 8, vec![1.0; 8]));
                g.matmul(ones, sq)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "max rel err {err}");
    }

    #[test]
    fn corrupted_backward_is_detected() {
        // sign-flipped "analytic" gradient must blow past 0.1
        let mut store = ParameterStore::new(3);
        store.insert("w", Tensor::col(&[0.7]));
        let mut g = Graph::new(false, 0);
        let w = g.param(&store, "w").unwrap();
        let sq = g.mul(w, w).unwrap();
        g.backward_into(sq, &mut store).unwrap();
        let flipped = -store.grad("w").unwrap().data[0];
        let numeric = {
            let f = |v: f64| v * v;
            (f(0.7 + 1e-5) - f(0.7 - 1e-5)) / 2e-5
        };
        let rel = (flipped - numeric).abs() / flipped.abs().max(numeric.abs()).max(1e-8);
        assert!(rel > 0.1);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store = ParameterStore::new(1);
        store.insert("w", Tensor::col(&[1.0, 2.0]));
        let res = grad_check(|g, store| g.param(store, "w"), &mut store, 1e-5);
        assert!(res.is_err());
    }
}
