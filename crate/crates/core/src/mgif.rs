//! Multi-grained interactive fusion: a per-neuron contrastive gate over each
//! modality pair and a small Transformer over the gated vectors.

use rand::Rng;

use crate::config::{Modality, ModalitySet};
use crate::error::{Error, Result};
use crate::numeric::{Encoder, Init, Linear, Mask, ParamId, ParamStore, Tape, Var};

/// Projections of one gate: `W_a`, `W_b` are `D_h × D_r`, `W_z` is `D_h × 3·D_r`.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub proj_a: Linear,
    pub proj_b: Linear,
    pub gate: Linear,
}

impl GateParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_r: usize, d_h: usize, rng: &mut R) -> Self {
        GateParams {
            proj_a: Linear::new(store, &format!("{name}.wa"), d_r, d_h, rng),
            proj_b: Linear::new(store, &format!("{name}.wb"), d_r, d_h, rng),
            gate: Linear::new(store, &format!("{name}.wz"), 3 * d_r, d_h, rng),
        }
    }

    pub fn d_r(&self) -> usize {
        self.proj_a.in_dim
    }

    pub fn d_h(&self) -> usize {
        self.proj_a.out_dim
    }
}

/// Nodes produced by one gate application.
#[derive(Clone, Copy, Debug)]
pub struct GateOutput {
    pub h: Var,
    pub z: Var,
    pub h_a: Var,
    pub h_b: Var,
}

/// `z ∗ tanh(W_a r_a) + (1 − z) ∗ tanh(W_b r_b)` with
/// `z = σ(W_z [r_a; r_b; r_a ∗ r_b])`.
pub fn gate(tape: &mut Tape, store: &ParamStore, r_a: Var, r_b: Var, params: &GateParams) -> Result<GateOutput> {
    let d_r = params.d_r();
    for (name, r) in [("r_a", r_a), ("r_b", r_b)] {
        let shape = tape.value(r).shape();
        if shape != [1, d_r] {
            return Err(Error::Dimension(format!("{name} has shape {shape:?}, gate expects [1, {d_r}]")));
        }
    }
    let pa = params.proj_a.forward(tape, store, r_a)?;
    let h_a = tape.tanh(pa);
    let pb = params.proj_b.forward(tape, store, r_b)?;
    let h_b = tape.tanh(pb);
    let inter = tape.hadamard(r_a, r_b)?;
    let joint = tape.concat_cols(&[r_a, r_b, inter])?;
    let logits = params.gate.forward(tape, store, joint)?;
    let z = tape.sigmoid(logits);
    let za = tape.hadamard(z, h_a)?;
    let not_z = tape.one_minus(z);
    let zb = tape.hadamard(not_z, h_b)?;
    let h = tape.add(za, zb)?;
    Ok(GateOutput { h, z, h_a, h_b })
}

/// The gated pairs in their fixed order: (t,v), (t,a), (a,v).
pub const PAIRS: [(Modality, Modality); 3] = [
    (Modality::Text, Modality::Visual),
    (Modality::Text, Modality::Acoustic),
    (Modality::Acoustic, Modality::Visual),
];

/// Pairs whose modalities are both in `set`, in fixed order.
pub fn active_pairs(set: ModalitySet) -> Vec<(Modality, Modality)> {
    PAIRS
        .iter()
        .copied()
        .filter(|&(a, b)| set.contains(a) && set.contains(b))
        .collect()
}

fn pair_name(a: Modality, b: Modality) -> String {
    format!("{}{}", a.letter(), b.letter())
}

/// One [`GateParams`] per active pair.
#[derive(Clone, Debug)]
pub struct PairGates {
    pub gates: Vec<((Modality, Modality), GateParams)>,
}

impl PairGates {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        modalities: ModalitySet,
        d_r: usize,
        d_h: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let pairs = active_pairs(modalities);
        if pairs.is_empty() {
            return Err(Error::Modality(format!(
                "fusion needs at least two modalities, got {modalities}"
            )));
        }
        let gates = pairs
            .into_iter()
            .map(|(a, b)| ((a, b), GateParams::new(store, &format!("{name}.{}", pair_name(a, b)), d_r, d_h, rng)))
            .collect();
        Ok(PairGates { gates })
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    /// Applies each pair's gate. `reps` is indexed by [`Modality::index`];
    /// a pair whose modality is missing is a modality error.
    pub fn fuse_all(&self, tape: &mut Tape, store: &ParamStore, reps: &[Option<Var>; 3]) -> Result<Vec<GateOutput>> {
        self.gates
            .iter()
            .map(|&((a, b), ref params)| {
                let get = |m: Modality| {
                    reps[m.index()].ok_or_else(|| {
                        Error::Modality(format!("{} representation missing for the {} gate", m.name(), pair_name(a, b)))
                    })
                };
                gate(tape, store, get(a)?, get(b)?, params)
            })
            .collect()
    }
}

/// Transformer over `[CLS, h_1, ..., h_n]` with learned slot positions.
#[derive(Clone, Debug)]
pub struct VectorFusion {
    pub cls: ParamId,
    pub positions: ParamId,
    pub encoder: Encoder,
    pub slots: usize,
}

impl VectorFusion {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        n_layers: usize,
        d_h: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let init = Init::Uniform { fan_in: d_h };
        Ok(VectorFusion {
            cls: store.add(format!("{name}.cls"), 1, d_h, init, rng),
            positions: store.add(format!("{name}.positions"), inputs + 1, d_h, init, rng),
            encoder: Encoder::new(store, name, n_layers, d_h, heads, d_ff, rng)?,
            slots: inputs + 1,
        })
    }

    /// Final-layer row 0 and the per-layer attention nodes.
    pub fn forward_traced(&self, tape: &mut Tape, store: &ParamStore, hs: &[Var]) -> Result<(Var, Vec<Var>)> {
        if hs.len() + 1 != self.slots {
            return Err(Error::Dimension(format!(
                "vector fusion built for {} inputs, got {}",
                self.slots - 1,
                hs.len()
            )));
        }
        let mut rows = vec![tape.param(store, self.cls)];
        rows.extend_from_slice(hs);
        let x = tape.concat_rows(&rows)?;
        let pos = tape.param(store, self.positions);
        let x = tape.add(x, pos)?;
        let traces = self.encoder.forward_traced(tape, store, x, &Mask::ones(self.slots))?;
        let last = traces.last().map_or(x, |t| t.output);
        let u = tape.row(last, 0)?;
        Ok((u, traces.iter().map(|t| t.attention.weights).collect()))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, hs: &[Var]) -> Result<Var> {
        Ok(self.forward_traced(tape, store, hs)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vec_of(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
    }

    fn setup(seed: u64, d: usize) -> (ChaCha8Rng, ParamStore, GateParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = GateParams::new(&mut store, "g", d, d, &mut rng);
        (rng, store, p)
    }

    fn run_gate(store: &ParamStore, p: &GateParams, a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let ra = tape.constant(Tensor::vector(a.to_vec()));
        let rb = tape.constant(Tensor::vector(b.to_vec()));
        let o = gate(&mut tape, store, ra, rb, p).unwrap();
        let get = |v: Var| tape.value(v).data().to_vec();
        (get(o.h), get(o.z), get(o.h_a), get(o.h_b))
    }

    fn scalar_gate(store: &ParamStore, p: &GateParams, a: &[f64], b: &[f64]) -> Vec<f64> {
        let (wa, wb, wz) = (store.get(p.proj_a.weight), store.get(p.proj_b.weight), store.get(p.gate.weight));
        let joint: Vec<f64> = a.iter().chain(b).copied().chain(a.iter().zip(b).map(|(x, y)| x * y)).collect();
        (0..p.d_h())
            .map(|k| {
                let mut sa = 0.0;
                let mut sb = 0.0;
                for j in 0..a.len() {
                    sa += wa.get(k, j) * a[j];
                    sb += wb.get(k, j) * b[j];
                }
                let mut sz = 0.0;
                for (j, x) in joint.iter().enumerate() {
                    sz += wz.get(k, j) * x;
                }
                let z = 1.0 / (1.0 + (-sz).exp());
                z * sa.tanh() + (1.0 - z) * sb.tanh()
            })
            .collect()
    }

    #[test]
    fn zero_gate_weights_give_the_mean() {
        let (mut rng, mut store, p) = setup(1, 4);
        store.get_mut(p.gate.weight).data_mut().fill(0.0);
        let (a, b) = (vec_of(&mut rng, 4), vec_of(&mut rng, 4));
        let (h, z, ha, hb) = run_gate(&store, &p, &a, &b);
        assert!(z.iter().all(|&z| z == 0.5));
        for k in 0..4 {
            assert_eq!(h[k], 0.5 * ha[k] + 0.5 * hb[k]);
        }
    }

    #[test]
    fn identical_operands_return_the_projection() {
        let (mut rng, mut store, p) = setup(2, 4);
        let wa = store.get(p.proj_a.weight).clone();
        *store.get_mut(p.proj_b.weight) = wa;
        let a = vec_of(&mut rng, 4);
        let (h, _, ha, _) = run_gate(&store, &p, &a, &a);
        for k in 0..4 {
            assert!((h[k] - ha[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_scalar_oracle() {
        let (mut rng, store, p) = setup(3, 4);
        for _ in 0..50 {
            let (a, b) = (vec_of(&mut rng, 4), vec_of(&mut rng, 4));
            let (h, ..) = run_gate(&store, &p, &a, &b);
            for (x, y) in h.iter().zip(scalar_gate(&store, &p, &a, &b)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_is_coordinatewise_convex() {
        let (mut rng, store, p) = setup(4, 6);
        for _ in 0..50 {
            let (a, b) = (vec_of(&mut rng, 6), vec_of(&mut rng, 6));
            let (h, z, ha, hb) = run_gate(&store, &p, &a, &b);
            for k in 0..6 {
                assert!(z[k] > 0.0 && z[k] < 1.0);
                assert_eq!(z[k] + (1.0 - z[k]), 1.0);
                assert!(h[k] >= ha[k].min(hb[k]) - 1e-15 && h[k] <= ha[k].max(hb[k]) + 1e-15);
                assert!(h[k].abs() < 1.0);
            }
        }
    }

    #[test]
    fn interaction_columns_affect_z() {
        let (mut rng, mut store, p) = setup(5, 4);
        let (a, b) = (vec_of(&mut rng, 4), vec_of(&mut rng, 4));
        let (_, z_full, ..) = run_gate(&store, &p, &a, &b);
        let w = store.get_mut(p.gate.weight);
        for k in 0..4 {
            for j in 8..12 {
                w.data_mut()[k * 12 + j] = 0.0;
            }
        }
        let (_, z_cut, ..) = run_gate(&store, &p, &a, &b);
        assert!(z_full.iter().zip(&z_cut).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn gate_is_not_symmetric() {
        let (mut rng, store, p) = setup(6, 4);
        let (a, b) = (vec_of(&mut rng, 4), vec_of(&mut rng, 4));
        let (ab, ..) = run_gate(&store, &p, &a, &b);
        let (ba, ..) = run_gate(&store, &p, &b, &a);
        assert!(ab.iter().zip(&ba).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn wrong_width_is_dimension_error() {
        let (_, store, p) = setup(7, 4);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![0.0; 3]));
        let b = tape.constant(Tensor::vector(vec![0.0; 4]));
        assert!(matches!(gate(&mut tape, &store, a, b, &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn pairs_follow_fixed_order_and_fallback() {
        let all = active_pairs(ModalitySet::ALL);
        assert_eq!(all, PAIRS.to_vec());
        let ta: ModalitySet = "t,a".parse().unwrap();
        assert_eq!(active_pairs(ta), vec![(Modality::Text, Modality::Acoustic)]);
        let t: ModalitySet = "t".parse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!(matches!(
            PairGates::new(&mut ParamStore::new(), "g", t, 4, 4, &mut rng),
            Err(Error::Modality(_))
        ));
    }

    #[test]
    fn zero_representations_fuse_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let g = PairGates::new(&mut store, "g", ModalitySet::ALL, 4, 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::vector(vec![0.0; 4]));
        let out = g.fuse_all(&mut tape, &store, &[Some(zero); 3]).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|o| tape.value(o.h).data().iter().all(|&x| x == 0.0)));
        assert!(matches!(
            g.fuse_all(&mut tape, &store, &[Some(zero), None, Some(zero)]),
            Err(Error::Modality(_))
        ));
    }

    fn fusion(seed: u64) -> (ChaCha8Rng, ParamStore, VectorFusion) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let f = VectorFusion::new(&mut store, "fusion", 3, 2, 8, 2, 16, &mut rng).unwrap();
        (rng, store, f)
    }

    fn run_fusion(store: &ParamStore, f: &VectorFusion, hs: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = hs.iter().map(|h| tape.constant(Tensor::vector(h.clone()))).collect();
        let (u, weights) = f.forward_traced(&mut tape, store, &vars).unwrap();
        let w = weights.iter().map(|&w| tape.attention_probs(w).unwrap().to_vec()).collect();
        (tape.value(u).data().to_vec(), w)
    }

    #[test]
    fn zero_inputs_depend_only_on_cls() {
        let (_, mut store, f) = fusion(10);
        let zeros = vec![vec![0.0; 8]; 3];
        let (u1, _) = run_fusion(&store, &f, &zeros);
        let (u2, _) = run_fusion(&store, &f, &zeros);
        assert_eq!(u1, u2);
        store.get_mut(f.cls).data_mut()[0] += 0.5;
        let (u3, _) = run_fusion(&store, &f, &zeros);
        assert_ne!(u1, u3);
    }

    #[test]
    fn row_zero_attention_sums_to_one() {
        let (mut rng, store, f) = fusion(11);
        let hs: Vec<Vec<f64>> = (0..3).map(|_| vec_of(&mut rng, 8)).collect();
        let (_, weights) = run_fusion(&store, &f, &hs);
        for layer in weights {
            // [head][query][key], 4 slots
            for head in 0..2 {
                let row0 = &layer[head * 16..head * 16 + 4];
                assert!((row0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn slot_order_matters() {
        let (mut rng, store, f) = fusion(12);
        let hs: Vec<Vec<f64>> = (0..3).map(|_| vec_of(&mut rng, 8)).collect();
        let swapped = vec![hs[0].clone(), hs[2].clone(), hs[1].clone()];
        let (u, _) = run_fusion(&store, &f, &hs);
        let (v, _) = run_fusion(&store, &f, &swapped);
        assert!(u.iter().zip(&v).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn input_count_is_checked() {
        let (_, store, f) = fusion(13);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::vector(vec![0.0; 8]));
        assert!(f.forward(&mut tape, &store, &[h]).is_err());
    }
}
