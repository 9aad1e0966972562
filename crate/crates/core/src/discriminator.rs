//! Two-layer prediction heads and their losses.

use rand::Rng;

use crate::config::HeadKind;
use crate::conversation::{Label, CONTINUOUS_DIMS};
use crate::error::{Error, Result};
use crate::numeric::tape::softmax_row;
use crate::numeric::{Linear, ParamStore, Tape, Var};

/// Smallest probability whose log is taken as-is.
pub const LOG_FLOOR: f64 = 1e-300;

/// `o = tanh(W_l u)` followed by `softmax(W_cat o)` or `W_con o`.
#[derive(Clone, Debug)]
pub struct Head {
    pub hidden: Linear,
    pub out: Linear,
    pub kind: HeadKind,
}

impl Head {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d_h: usize,
        kind: HeadKind,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let (name, width) = match kind {
            HeadKind::Categorical => ("head.cat", num_classes),
            HeadKind::Continuous => ("head.con", CONTINUOUS_DIMS),
        };
        Head {
            hidden: Linear::new(store, "head.hidden", d_h, d_h, rng),
            out: Linear::new(store, name, d_h, width, rng),
            kind,
        }
    }

    pub fn width(&self) -> usize {
        self.out.out_dim
    }

    /// Logits (categorical) or values (continuous), one row per input row.
    pub fn raw(&self, tape: &mut Tape, store: &ParamStore, u: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, u)?;
        let o = tape.tanh(h);
        self.out.forward(tape, store, o)
    }

    /// Probabilities (categorical) or values (continuous).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, u: Var) -> Result<Var> {
        let raw = self.raw(tape, store, u)?;
        Ok(match self.kind {
            HeadKind::Categorical => tape.softmax(raw),
            HeadKind::Continuous => raw,
        })
    }

    /// Mean loss of `outputs` (from [`Head::forward`]) against `labels`.
    pub fn loss(&self, tape: &mut Tape, outputs: Var, labels: &[Label]) -> Result<Var> {
        match self.kind {
            HeadKind::Categorical => {
                let targets = labels
                    .iter()
                    .map(|l| match *l {
                        Label::Categorical(c) if c < self.width() => Ok(c),
                        Label::Categorical(c) => Err(Error::Index(format!(
                            "class {c} outside 0..{}",
                            self.width()
                        ))),
                        Label::Continuous(_) => Err(kind_mismatch(self.kind)),
                    })
                    .collect::<Result<Vec<_>>>()?;
                tape.cross_entropy(outputs, &targets)
            }
            HeadKind::Continuous => {
                let mut targets = Vec::with_capacity(labels.len() * CONTINUOUS_DIMS);
                for l in labels {
                    match l {
                        Label::Continuous(v) => targets.extend_from_slice(v),
                        Label::Categorical(_) => return Err(kind_mismatch(self.kind)),
                    }
                }
                tape.squared_error(outputs, &targets)
            }
        }
    }

    /// Per-row predictions from a [`Head::forward`] output.
    pub fn predictions(&self, tape: &Tape, outputs: Var) -> Vec<Prediction> {
        let t = tape.value(outputs);
        (0..t.rows())
            .map(|i| match self.kind {
                HeadKind::Categorical => Prediction::from_probs(t.row(i).to_vec()),
                HeadKind::Continuous => {
                    let mut v = [0.0; CONTINUOUS_DIMS];
                    v.copy_from_slice(t.row(i));
                    Prediction::Continuous { values: v }
                }
            })
            .collect()
    }
}

fn kind_mismatch(kind: HeadKind) -> Error {
    Error::Config(format!("{kind} head given a label of the other kind"))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Categorical { probs: Vec<f64>, class: usize },
    Continuous { values: [f64; CONTINUOUS_DIMS] },
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Prediction {
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let class = argmax(&probs);
        Prediction::Categorical { probs, class }
    }

    pub fn class(&self) -> Option<usize> {
        match self {
            Prediction::Categorical { class, .. } => Some(*class),
            Prediction::Continuous { .. } => None,
        }
    }
}

/// Evaluates the head on one `1 × D_h` vector outside of any training tape.
pub fn predict(head: &Head, store: &ParamStore, u: &[f64], kind: HeadKind) -> Result<Prediction> {
    if kind != head.kind {
        return Err(Error::Config(format!("{kind} prediction requested from a {} head", head.kind)));
    }
    if u.len() != head.hidden.in_dim {
        return Err(Error::Dimension(format!(
            "head input has length {}, expected {}",
            u.len(),
            head.hidden.in_dim
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(crate::numeric::Tensor::vector(u.to_vec()));
    let out = head.forward(&mut tape, store, x)?;
    Ok(head.predictions(&tape, out).remove(0))
}

/// Mean loss over already computed predictions: negative log-likelihood for
/// categorical, per-utterance mean squared error for continuous.
pub fn loss(preds: &[Prediction], labels: &[Label]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    let mut clamped = 0;
    for (p, l) in preds.iter().zip(labels) {
        total += match (p, l) {
            (Prediction::Categorical { probs, .. }, Label::Categorical(c)) => {
                let q = *probs
                    .get(*c)
                    .ok_or_else(|| Error::Index(format!("class {c} outside 0..{}", probs.len())))?;
                if q < LOG_FLOOR {
                    clamped += 1;
                }
                -(if q < LOG_FLOOR { LOG_FLOOR } else { q }).ln()
            }
            (Prediction::Continuous { values }, Label::Continuous(y)) => {
                values.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / CONTINUOUS_DIMS as f64
            }
            _ => return Err(Error::Config("prediction and label kinds differ".into())),
        };
    }
    if clamped > 0 {
        log::warn!("{clamped} true-class probabilities below {LOG_FLOOR:e} clamped in the loss");
    }
    Ok(total / preds.len() as f64)
}

/// Softmax of one row of logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_row(logits, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(kind: HeadKind) -> (ChaCha8Rng, ParamStore, Head) {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut store = ParamStore::new();
        let h = Head::new(&mut store, 8, kind, 6, &mut rng);
        (rng, store, h)
    }

    fn probs(p: &Prediction) -> &[f64] {
        match p {
            Prediction::Categorical { probs, .. } => probs,
            _ => panic!("not categorical"),
        }
    }

    #[test]
    fn zero_output_weights_give_uniform_and_index_zero() {
        let (mut rng, mut store, h) = head(HeadKind::Categorical);
        store.get_mut(h.out.weight).data_mut().fill(0.0);
        let u: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = predict(&h, &store, &u, HeadKind::Categorical).unwrap();
        assert!(probs(&p).iter().all(|&q| (q - 1.0 / 6.0).abs() < 1e-15));
        assert_eq!(p.class(), Some(0));
    }

    #[test]
    fn zero_input_is_uniform() {
        let (_, store, h) = head(HeadKind::Categorical);
        let p = predict(&h, &store, &[0.0; 8], HeadKind::Categorical).unwrap();
        assert!(probs(&p).iter().all(|&q| (q - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn matches_scalar_oracle() {
        let (mut rng, store, h) = head(HeadKind::Categorical);
        let (wl, wc) = (store.get(h.hidden.weight), store.get(h.out.weight));
        for _ in 0..20 {
            let u: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let o: Vec<f64> = (0..8)
                .map(|i| (0..8).map(|j| wl.get(i, j) * u[j]).sum::<f64>().tanh())
                .collect();
            let logits: Vec<f64> = (0..6).map(|c| (0..8).map(|j| wc.get(c, j) * o[j]).sum()).collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let want: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
            let p = predict(&h, &store, &u, HeadKind::Categorical).unwrap();
            for (a, b) in probs(&p).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
            let best = (0..6).fold(0, |b, c| if want[c] > want[b] { c } else { b });
            assert_eq!(p.class(), Some(best));
            assert!((probs(&p).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let logits = [0.3, -1.2, 2.0, 0.0];
        let shifted: Vec<f64> = logits.iter().map(|x| x + 37.5).collect();
        let (a, b) = (softmax(&logits), softmax(&shifted));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(argmax(&a), argmax(&b));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0; 5]), 0);
    }

    #[test]
    fn kind_mismatch_is_config_error() {
        let (_, store, h) = head(HeadKind::Categorical);
        assert!(matches!(
            predict(&h, &store, &[0.0; 8], HeadKind::Continuous),
            Err(Error::Config(_))
        ));
        let mut tape = Tape::new();
        let out = tape.constant(crate::numeric::Tensor::vector(vec![1.0 / 6.0; 6]));
        assert!(matches!(
            h.loss(&mut tape, out, &[Label::Continuous([0.0; 4])]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn value_loss_examples() {
        let one_hot = Prediction::from_probs(vec![0.0, 1.0, 0.0]);
        assert_eq!(loss(&[one_hot], &[Label::Categorical(1)]).unwrap(), 0.0);
        let uniform = Prediction::from_probs(vec![1.0 / 6.0; 6]);
        let l = loss(&[uniform], &[Label::Categorical(4)]).unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-12);
        let y = [0.5, -1.0, 2.0, 0.0];
        let exact = Prediction::Continuous { values: y };
        let off = Prediction::Continuous { values: y.map(|v| v + 1.0) };
        assert_eq!(loss(&[exact], &[Label::Continuous(y)]).unwrap(), 0.0);
        assert_eq!(loss(&[off], &[Label::Continuous(y)]).unwrap(), 1.0);
        assert!(loss(&[], &[]).is_err());
    }

    #[test]
    fn tape_loss_matches_value_loss() {
        for kind in [HeadKind::Categorical, HeadKind::Continuous] {
            let (mut rng, store, h) = head(kind);
            let mut tape = Tape::new();
            let u = crate::numeric::Tensor::matrix(3, 8, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let x = tape.constant(u);
            let out = h.forward(&mut tape, &store, x).unwrap();
            let labels: Vec<Label> = match kind {
                HeadKind::Categorical => vec![Label::Categorical(0), Label::Categorical(5), Label::Categorical(2)],
                HeadKind::Continuous => (0..3).map(|i| Label::Continuous([i as f64, -0.5, 0.25, 1.0])).collect(),
            };
            let l = h.loss(&mut tape, out, &labels).unwrap();
            let preds = h.predictions(&tape, out);
            let want = loss(&preds, &labels).unwrap();
            assert!((tape.value(l).data()[0] - want).abs() < 1e-12);
            assert!(want >= 0.0);
        }
    }
}
