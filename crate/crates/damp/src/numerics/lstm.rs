use super::graph::{Graph, NodeId};
use super::optim::ParameterStore;
use super::Result;

/// Node ids of one LSTM cell's parameters: stacked gate weights
/// `w: (4h, in+h)` and bias `b: (4h, 1)`. Gate order: input, forget,
/// output, candidate.
#[derive(Debug, Clone, Copy)]
pub struct LstmParamNodes {
    pub w: NodeId,
    pub b: NodeId,
    pub hidden: usize,
}

impl LstmParamNodes {
    /// Registers fresh parameters `<prefix>.W`, `<prefix>.b` in the store.
    pub fn init(store: &mut ParameterStore, prefix: &str, input: usize, hidden: usize, scale: f64) {
        store.insert_uniform(&format!("{prefix}.W"), 4 * hidden, input + hidden, scale);
        store.insert_uniform(&format!("{prefix}.b"), 4 * hidden, 1, scale);
    }

    pub fn load(g: &mut Graph, store: &ParameterStore, prefix: &str, hidden: usize) -> Result<Self> {
        Ok(LstmParamNodes {
            w: g.param(store, &format!("{prefix}.W"))?,
            b: g.param(store, &format!("{prefix}.b"))?,
            hidden,
        })
    }
}

/// One step of the standard LSTM gate equations.
pub fn lstm_cell(
    g: &mut Graph,
    p: &LstmParamNodes,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let h = p.hidden;
    let xh = g.concat(0, &[x, h_prev])?;
    let z = g.matmul(p.w, xh)?;
    let z = g.add(z, p.b)?;
    let zi = g.slice_rows(z, 0, h)?;
    let zf = g.slice_rows(z, h, h)?;
    let zo = g.slice_rows(z, 2 * h, h)?;
    let zu = g.slice_rows(z, 3 * h, h)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let o = g.sigmoid(zo);
    let u = g.tanh(zu);
    let fc = g.mul(f, c_prev)?;
    let iu = g.mul(i, u)?;
    let c = g.add(fc, iu)?;
    let tc = g.tanh(c);
    let h_out = g.mul(o, tc)?;
    Ok((h_out, c))
}

/// Per-token outputs of a bidirectional LSTM pass.
pub struct BiLstmOutput {
    /// One `(2h, 1)` node per token: forward and backward states concatenated.
    pub states: Vec<NodeId>,
    pub final_fw: NodeId,
    pub final_bw: NodeId,
}

/// Runs forward and backward LSTMs over token embedding nodes and
/// concatenates the per-token states.
pub fn bilstm_encode(
    g: &mut Graph,
    fw: &LstmParamNodes,
    bw: &LstmParamNodes,
    inputs: &[NodeId],
) -> Result<BiLstmOutput> {
    assert!(!inputs.is_empty(), "bilstm over empty input");
    let zero_f = g.input(super::Tensor::zeros(fw.hidden, 1));
    let zero_b = g.input(super::Tensor::zeros(bw.hidden, 1));

    let mut fw_states = Vec::with_capacity(inputs.len());
    let (mut h, mut c) = (zero_f, zero_f);
    for &x in inputs {
        let (nh, nc) = lstm_cell(g, fw, x, h, c)?;
        fw_states.push(nh);
        h = nh;
        c = nc;
    }
    let final_fw = h;

    let mut bw_states = vec![0; inputs.len()];
    let (mut h, mut c) = (zero_b, zero_b);
    for (idx, &x) in inputs.iter().enumerate().rev() {
        let (nh, nc) = lstm_cell(g, bw, x, h, c)?;
        bw_states[idx] = nh;
        h = nh;
        c = nc;
    }
    let final_bw = h;

    let mut states = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        states.push(g.concat(0, &[fw_states[i], bw_states[i]])?);
    }
    Ok(BiLstmOutput {
        states,
        final_fw,
        final_bw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn zero_params_and_inputs_yield_zero_hidden() {
        let mut store = ParameterStore::new(0);
        store.insert("z.W", Tensor::zeros(8, 3));
        store.insert("z.b", Tensor::zeros(8, 1));
        let mut g = Graph::new(false, 0);
        let p = LstmParamNodes::load(&mut g, &store, "z", 2).unwrap();
        let x = g.input(Tensor::zeros(1, 1));
        let h = g.input(Tensor::zeros(2, 1));
        let c = g.input(Tensor::zeros(2, 1));
        let (h1, c1) = lstm_cell(&mut g, &p, x, h, c).unwrap();
        assert!(g.value(h1).data.iter().all(|&v| v == 0.0));
        assert!(g.value(c1).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilstm_output_width_is_twice_hidden() {
        let mut store = ParameterStore::new(3);
        LstmParamNodes::init(&mut store, "fw", 4, 5, 0.08);
        LstmParamNodes::init(&mut store, "bw", 4, 5, 0.08);
        let mut g = Graph::new(false, 0);
        let fw = LstmParamNodes::load(&mut g, &store, "fw", 5).unwrap();
        let bw = LstmParamNodes::load(&mut g, &store, "bw", 5).unwrap();
        let mut rng = rand::thread_rng();
        let inputs: Vec<_> = (0..3)
            .map(|_| g.input(Tensor::uniform(4, 1, -1.0, 1.0, &mut rng)))
            .collect();
        let out = bilstm_encode(&mut g, &fw, &bw, &inputs).unwrap();
        assert_eq!(out.states.len(), 3);
        for &s in &out.states {
            assert_eq!(g.value(s).shape(), (10, 1));
        }
    }
}
