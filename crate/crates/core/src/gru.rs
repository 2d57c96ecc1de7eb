//! Gated recurrent unit.
//!
//! ```text
//! z = σ(W_z x + U_z h + b_z)
//! r = σ(W_r x + U_r h + b_r)
//! h̃ = tanh(W x + r ⊙ (U h) + b_h)
//! h' = z ⊙ h̃ + (1 − z) ⊙ h
//! ```
//!
//! The update gate weights the candidate, not the carried state.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

pub const GRU_BLOCKS: [&str; 9] = ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"];

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruParams {
            w_z: Tensor::zeros(&[hidden, input]),
            w_r: Tensor::zeros(&[hidden, input]),
            w_h: Tensor::zeros(&[hidden, input]),
            u_z: Tensor::zeros(&[hidden, hidden]),
            u_r: Tensor::zeros(&[hidden, hidden]),
            u_h: Tensor::zeros(&[hidden, hidden]),
            b_z: Tensor::zeros(&[hidden]),
            b_r: Tensor::zeros(&[hidden]),
            b_h: Tensor::zeros(&[hidden]),
        }
    }

    /// Matrices uniform(-1/√H, 1/√H); biases zero.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let b = 1.0 / (hidden as f64).sqrt();
        GruParams {
            w_z: Tensor::uniform(&[hidden, input], b, rng),
            w_r: Tensor::uniform(&[hidden, input], b, rng),
            w_h: Tensor::uniform(&[hidden, input], b, rng),
            u_z: Tensor::uniform(&[hidden, hidden], b, rng),
            u_r: Tensor::uniform(&[hidden, hidden], b, rng),
            u_h: Tensor::uniform(&[hidden, hidden], b, rng),
            b_z: Tensor::zeros(&[hidden]),
            b_r: Tensor::zeros(&[hidden]),
            b_h: Tensor::zeros(&[hidden]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.shape()[0]
    }

    /// Checks that every block agrees on I and H.
    pub fn validate(&self) -> Result<()> {
        let (h, i) = (self.hidden_dim(), self.input_dim());
        let expect = |t: &Tensor, s: &[usize], name: &str| {
            if t.shape() != s {
                Err(Error::dim("gru params", format!("{name} is {:?}, expected {s:?}", t.shape())))
            } else {
                Ok(())
            }
        };
        for (t, n) in [(&self.w_z, "w_z"), (&self.w_r, "w_r"), (&self.w_h, "w_h")] {
            expect(t, &[h, i], n)?;
        }
        for (t, n) in [(&self.u_z, "u_z"), (&self.u_r, "u_r"), (&self.u_h, "u_h")] {
            expect(t, &[h, h], n)?;
        }
        for (t, n) in [(&self.b_z, "b_z"), (&self.b_r, "b_r"), (&self.b_h, "b_h")] {
            expect(t, &[h], n)?;
        }
        Ok(())
    }

    pub fn blocks(&self) -> [&Tensor; 9] {
        [&self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z, &self.b_r, &self.b_h]
    }

    pub fn blocks_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }

    /// Puts every block on the tape, as trainable leaves or as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> GruVars {
        let mut put = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        GruVars {
            w_z: put(&self.w_z),
            w_r: put(&self.w_r),
            w_h: put(&self.w_h),
            u_z: put(&self.u_z),
            u_r: put(&self.u_r),
            u_h: put(&self.u_h),
            b_z: put(&self.b_z),
            b_r: put(&self.b_r),
            b_h: put(&self.b_h),
        }
    }
}

/// Tape handles for a registered [`GruParams`].
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

impl GruVars {
    pub fn all(&self) -> [Var; 9] {
        [self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h, self.b_z, self.b_r, self.b_h]
    }
}

/// New hidden state plus the gate activations that produced it.
#[derive(Clone, Copy, Debug)]
pub struct GruStep {
    pub h: Var,
    pub z: Var,
    pub r: Var,
    pub candidate: Var,
}

fn gate(tape: &mut Tape, w: Var, x: Var, u: Var, h: Var, b: Var) -> Result<Var> {
    let wx = tape.matmul(w, x)?;
    let uh = tape.matmul(u, h)?;
    let s = tape.add(wx, uh)?;
    let s = tape.add(s, b)?;
    Ok(tape.sigmoid(s))
}

pub fn gru_step(tape: &mut Tape, x: Var, h_prev: Var, p: &GruVars) -> Result<GruStep> {
    let z = gate(tape, p.w_z, x, p.u_z, h_prev, p.b_z)?;
    let r = gate(tape, p.w_r, x, p.u_r, h_prev, p.b_r)?;
    let wx = tape.matmul(p.w_h, x)?;
    let uh = tape.matmul(p.u_h, h_prev)?;
    let gated = tape.hadamard(r, uh)?;
    let pre = tape.add(wx, gated)?;
    let pre = tape.add(pre, p.b_h)?;
    let candidate = tape.tanh(pre);
    let fresh = tape.hadamard(z, candidate)?;
    let keep = tape.one_minus(z);
    let carried = tape.hadamard(keep, h_prev)?;
    let h = tape.add(fresh, carried)?;
    Ok(GruStep { h, z, r, candidate })
}

/// Folds [`gru_step`] over `xs`, threading the state from `h0`.
pub fn gru_sequence(tape: &mut Tape, xs: &[Var], h0: Var, p: &GruVars) -> Result<Vec<GruStep>> {
    let mut h = h0;
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let step = gru_step(tape, x, h, p)?;
        h = step.h;
        out.push(step);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::check_gradients;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn run_step(p: &GruParams, x: &[f64], h: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut t = Tape::new();
        let vars = p.register(&mut t, false);
        let x = t.constant(Tensor::vector(x.to_vec()));
        let h = t.constant(Tensor::vector(h.to_vec()));
        let s = gru_step(&mut t, x, h, &vars).unwrap();
        let get = |v| t.value(v).data().to_vec();
        (get(s.h), get(s.z), get(s.r), get(s.candidate))
    }

    #[test]
    fn zero_params_halve_the_state() {
        let p = GruParams::zeros(3, 4);
        let v = [0.8, -0.4, 1.5, -2.0];
        let (h, z, r, cand) = run_step(&p, &[1.0, 2.0, 3.0], &v);
        assert!(z.iter().chain(&r).all(|g| *g == 0.5));
        assert!(cand.iter().all(|c| *c == 0.0));
        for (a, b) in h.iter().zip(v) {
            assert_eq!(*a, 0.5 * b);
        }
        let (h, ..) = run_step(&p, &[1.0, 2.0, 3.0], &[0.0; 4]);
        assert!(h.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn hand_evaluated_step() {
        let mut p = GruParams::zeros(2, 2);
        p.w_z = Tensor::identity(2);
        p.w_r = Tensor::from_rows(&[vec![0.5, 0.0], vec![0.0, -0.5]]).unwrap();
        p.w_h = Tensor::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]).unwrap();
        p.u_r = Tensor::from_rows(&[vec![0.2, 0.0], vec![0.0, 0.2]]).unwrap();
        p.u_h = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let x = [1.0, -1.0];
        let hp = [0.5, -0.25];

        // z = σ([1, -1]); r = σ([0.5 + 0.1, 0.5 - 0.05])
        let z = [sig(1.0), sig(-1.0)];
        let r = [sig(0.6), sig(0.45)];
        // W x = [-0.1, -0.1]; U h = [-0.25, 0.5]
        let cand = [(-0.1 + r[0] * -0.25f64).tanh(), (-0.1 + r[1] * 0.5f64).tanh()];
        let h = [z[0] * cand[0] + (1.0 - z[0]) * hp[0], z[1] * cand[1] + (1.0 - z[1]) * hp[1]];

        let (gh, gz, gr, gc) = run_step(&p, &x, &hp);
        for (a, b) in gz.iter().zip(z).chain(gr.iter().zip(r)).chain(gc.iter().zip(cand)).chain(gh.iter().zip(h)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = GruParams::zeros(3, 2);
        let mut t = Tape::new();
        let vars = p.register(&mut t, false);
        let x = t.constant(Tensor::vector(vec![1.0; 4]));
        let h = t.constant(Tensor::vector(vec![0.0; 2]));
        assert!(matches!(gru_step(&mut t, x, h, &vars), Err(Error::Dimension { .. })));

        let mut bad = GruParams::zeros(3, 2);
        bad.u_h = Tensor::zeros(&[2, 3]);
        assert!(bad.validate().is_err());
        assert!(p.validate().is_ok());
    }

    #[test]
    fn sequence_matches_manual_chaining() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = GruParams::init(3, 4, &mut rng);
        let xs: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[3], 2.0, &mut rng)).collect();

        let mut t = Tape::new();
        let vars = p.register(&mut t, false);
        let h0 = t.constant(Tensor::zeros(&[4]));
        assert!(gru_sequence(&mut t, &[], h0, &vars).unwrap().is_empty());
        let xv: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let seq = gru_sequence(&mut t, &xv, h0, &vars).unwrap();
        assert_eq!(seq.len(), 3);

        let mut h = vec![0.0; 4];
        for (x, s) in xs.iter().zip(&seq) {
            h = run_step(&p, x.data(), &h).0;
            let got: Vec<u64> = t.value(s.h).data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = h.iter().map(|v| v.to_bits()).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn four_step_unroll_gradients() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut p = GruParams::init(3, 4, &mut rng);
            for b in [&mut p.b_z, &mut p.b_r, &mut p.b_h] {
                *b = Tensor::uniform(&[4], 0.5, &mut rng);
            }
            let xs: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&[3], 2.0, &mut rng)).collect();
            let h0 = Tensor::uniform(&[4], 0.9, &mut rng);
            let w = Tensor::uniform(&[4], 2.0, &mut rng);
            let inputs: Vec<Tensor> = p.blocks().into_iter().cloned().collect();
            let report = check_gradients(&inputs, 1e-5, |t, v| {
                let vars = GruVars {
                    w_z: v[0],
                    w_r: v[1],
                    w_h: v[2],
                    u_z: v[3],
                    u_r: v[4],
                    u_h: v[5],
                    b_z: v[6],
                    b_r: v[7],
                    b_h: v[8],
                };
                let xv: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
                let h0 = t.constant(h0.clone());
                let seq = gru_sequence(t, &xv, h0, &vars)?;
                let wv = t.constant(w.clone());
                let last = seq.last().unwrap().h;
                let prod = t.hadamard(last, wv)?;
                Ok(t.sum(prod))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{report:?}");
        }
    }

    proptest::proptest! {
        #[test]
        fn gates_interpolation_and_bounds(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = GruParams::init(3, 5, &mut rng);
            let x = Tensor::uniform(&[3], 3.0, &mut rng);
            let hp = Tensor::uniform(&[5], 0.999, &mut rng);
            let (h, z, r, c) = run_step(&p, x.data(), hp.data());
            proptest::prop_assert!(z.iter().chain(&r).all(|g| *g > 0.0 && *g < 1.0));
            for ((hn, ho), cn) in h.iter().zip(hp.data()).zip(&c) {
                proptest::prop_assert!(*hn >= ho.min(*cn) - 1e-15 && *hn <= ho.max(*cn) + 1e-15);
                proptest::prop_assert!(hn.abs() < 1.0);
            }
        }
    }
}
