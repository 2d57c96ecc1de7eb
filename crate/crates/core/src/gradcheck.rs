//! Central finite-difference gradient checks.
//!
//! Numerical derivatives only ever evaluate the forward graph, so they are an
//! independent witness for the analytic backward rules in [`crate::tensor`].

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Relative errors below this denominator are measured absolutely.
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Numerical derivative rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stencil {
    /// (f(x+h) − f(x−h)) / 2h.
    Central { h: f64 },
    /// (−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h. Its truncation error is
    /// fourth order, so a wider step keeps roundoff small without losing accuracy.
    FourthOrder { h: f64 },
}

/// Compares the tape's gradient of the scalar built by `f` against central
/// differences with step `h`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_gradients_with(inputs, Stencil::Central { h }, f)
}

pub fn check_gradients_with<F>(inputs: &[Tensor], stencil: Stencil, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut report = GradCheck { max_rel_err: 0.0, worst: (0, 0), checked: 0 };
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).expect("params always hold a gradient").to_vec();
        for (e, a) in analytic.iter().enumerate() {
            let orig = probe[which].data()[e];
            let mut at = |delta: f64| -> Result<f64> {
                probe[which].data_mut()[e] = orig + delta;
                let v = evaluate(&probe, &f);
                probe[which].data_mut()[e] = orig;
                v
            };
            let numeric = match stencil {
                Stencil::Central { h } => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FourthOrder { h } => {
                    // differences first, so an input the loss ignores gives exactly zero
                    let near = at(h)? - at(-h)?;
                    let far = at(2.0 * h)? - at(-2.0 * h)?;
                    (8.0 * near - far) / (12.0 * h)
                }
            };
            let err = relative_error(*a, numeric);
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = (which, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Outcome of one named case in [`run_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteCase {
    pub name: String,
    pub check: GradCheck,
}

/// Stencil the suite is judged by. Central differences at h = 1e-5 lose
/// about 1e-10 to roundoff on losses of order one, which swamps gradient
/// entries near 1e-7 that the full model legitimately produces. The wider
/// fourth-order stencil divides that noise by ten while its truncation
/// error stays far below it.
pub const SUITE_STENCIL: Stencil = Stencil::FourthOrder { h: 1e-4 };

/// Reduces `y` to a scalar through fixed random weights so every element
/// gets a distinct upstream gradient.
fn weigh(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.hadamard(y, w)?;
    Ok(tape.sum(p))
}

/// Inputs are drawn from [-2, 2].
fn draw<R: rand::Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 2.0, rng)
}

/// Every differentiable tape operation, the GRU, attention, the skip-gram
/// loss and the full captioner loss, with inputs drawn from `seed`.
pub fn run_suite(seed: u64, stencil: Stencil) -> Result<Vec<SuiteCase>> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::attention::{attend, AttentionParams, AttentionVars};
    use crate::captioner::{block_names, caption_nll, CaptionerDims, CaptionerParams, CaptionerVars, FeatureGrid};
    use crate::embed::skipgram_loss_on;
    use crate::gru::{gru_sequence, GruParams, GruVars};
    use crate::text::{Caption, END, START};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let mut push = |name: &str, check: GradCheck| cases.push(SuiteCase { name: name.to_owned(), check });

    type Unary = fn(&mut Tape, Var) -> Result<Var>;
    let unary: [(&str, Vec<usize>, Unary); 12] = [
        ("affine", vec![3, 2], |t, x| Ok(t.affine(x, -1.5, 0.25))),
        ("scale", vec![4], |t, x| Ok(t.scale(x, 2.5))),
        ("one_minus", vec![2, 2], |t, x| Ok(t.one_minus(x))),
        ("sigmoid", vec![2, 3], |t, x| Ok(t.sigmoid(x))),
        ("tanh", vec![5], |t, x| Ok(t.tanh(x))),
        ("softmax_axis0", vec![3, 4], |t, x| t.softmax_axis(x, 0)),
        ("softmax_axis1", vec![3, 4], |t, x| t.softmax_axis(x, 1)),
        ("log_softmax_axis1", vec![2, 5], |t, x| t.log_softmax_axis(x, 1)),
        ("transpose", vec![2, 3], |t, x| t.transpose(x)),
        ("reshape", vec![2, 3], |t, x| t.reshape(x, &[3, 2])),
        ("gather_rows", vec![4, 3], |t, x| t.gather_rows(x, &[2, 0, 2, 3])),
        ("select", vec![3, 3], |t, x| t.select(x, &[8, 0, 4, 4])),
    ];
    for (name, shape, op) in unary {
        let x = draw(&mut rng, &shape);
        let out_shape = {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let y = op(&mut t, v)?;
            t.shape(y).to_vec()
        };
        let w = draw(&mut rng, &out_shape);
        push(name, check_gradients_with(&[x], stencil, |t, v| {
            let y = op(t, v[0])?;
            weigh(t, y, &w)
        })?);
    }

    // relu is checked away from its kink
    let mut x = draw(&mut rng, &[6]);
    x.data_mut().iter_mut().for_each(|v| *v += 0.1_f64.copysign(*v));
    let w = draw(&mut rng, &[6]);
    push("relu", check_gradients_with(&[x], stencil, |t, v| {
        let y = t.relu(v[0]);
        weigh(t, y, &w)
    })?);

    let x = draw(&mut rng, &[4]);
    push("sum", check_gradients_with(&[x], stencil, |t, v| Ok(t.sum(v[0])))?);

    type Binary = fn(&mut Tape, Var, Var) -> Result<Var>;
    let binary: [(&str, Vec<usize>, Vec<usize>, Binary); 8] = [
        ("matmul_mat_mat", vec![2, 3], vec![3, 4], |t, a, b| t.matmul(a, b)),
        ("matmul_mat_vec", vec![3, 4], vec![4], |t, a, b| t.matmul(a, b)),
        ("matmul_vec_mat", vec![3], vec![3, 2], |t, a, b| t.matmul(a, b)),
        ("matmul_vec_vec", vec![5], vec![5], |t, a, b| t.matmul(a, b)),
        ("add", vec![2, 3], vec![2, 3], |t, a, b| t.add(a, b)),
        ("add_row_broadcast", vec![4, 3], vec![3], |t, a, b| t.add(a, b)),
        ("sub", vec![3], vec![3], |t, a, b| t.sub(a, b)),
        ("hadamard", vec![2, 2], vec![2, 2], |t, a, b| t.hadamard(a, b)),
    ];
    for (name, sa, sb, op) in binary {
        let (a, b) = (draw(&mut rng, &sa), draw(&mut rng, &sb));
        let out_shape = {
            let mut t = Tape::new();
            let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
            let y = op(&mut t, va, vb)?;
            t.shape(y).to_vec()
        };
        let w = draw(&mut rng, &out_shape);
        push(name, check_gradients_with(&[a, b], stencil, |t, v| {
            let y = op(t, v[0], v[1])?;
            weigh(t, y, &w)
        })?);
    }

    for axis in 0..2 {
        let (a, b) = (draw(&mut rng, &[2, 3]), draw(&mut rng, &[2, 3]));
        let w = draw(&mut rng, if axis == 0 { &[4, 3] } else { &[2, 6] });
        push(&format!("concat_axis{axis}"), check_gradients_with(&[a, b], stencil, |t, v| {
            let y = t.concat(&[v[0], v[1]], axis)?;
            weigh(t, y, &w)
        })?);
    }

    // The GRU and attention start from their own initialization with biases
    // made nonzero; fully random weights at this scale saturate tanh units and
    // push some true gradients below what central differences can resolve.

    // GRU unrolled over three steps, every block plus inputs and initial state
    let gru = GruParams::init(3, 4, &mut rng);
    let mut inputs: Vec<Tensor> = gru.blocks().iter().map(|b| (*b).clone()).collect();
    for b in inputs[6..9].iter_mut() {
        *b = Tensor::uniform(b.shape(), 0.5, &mut rng);
    }
    let xs = [draw(&mut rng, &[3]), draw(&mut rng, &[3]), draw(&mut rng, &[3])];
    inputs.extend(xs.iter().cloned());
    inputs.push(Tensor::uniform(&[4], 0.9, &mut rng));
    let w = draw(&mut rng, &[4]);
    push("gru_unroll", check_gradients_with(&inputs, stencil, |t, v| {
        let p = GruVars { w_z: v[0], w_r: v[1], w_h: v[2], u_z: v[3], u_r: v[4], u_h: v[5], b_z: v[6], b_r: v[7], b_h: v[8] };
        let steps = gru_sequence(t, &v[9..12], v[12], &p)?;
        weigh(t, steps.last().expect("three steps").h, &w)
    })?);

    // attention with its parameters, the query state and the annotations
    let attn = AttentionParams::init(4, 3, 5, &mut rng);
    let mut inputs: Vec<Tensor> = attn.blocks().iter().map(|b| (*b).clone()).collect();
    inputs.push(draw(&mut rng, &[4]));
    inputs.push(draw(&mut rng, &[6, 3]));
    let (wa, wc) = (draw(&mut rng, &[6]), draw(&mut rng, &[3]));
    push("attention", check_gradients_with(&inputs, stencil, |t, v| {
        let p = AttentionVars { w_s: v[0], w_h: v[1], v: v[2] };
        let out = attend(t, v[3], v[4], &p)?;
        let a = weigh(t, out.weights, &wa)?;
        let c = weigh(t, out.context, &wc)?;
        t.add(a, c)
    })?);

    let (k, e) = (6, 3);
    let pairs: Vec<(usize, usize)> = (0..8).map(|_| (rng.gen_range(0..k), rng.gen_range(0..k))).collect();
    let (s, r) = (Tensor::uniform(&[k, e], 0.5, &mut rng), Tensor::uniform(&[k, e], 0.5, &mut rng));
    push("skipgram_loss", check_gradients_with(&[s, r], stencil, |t, v| skipgram_loss_on(t, v[0], v[1], &pairs))?);

    // the whole captioner, all nineteen blocks, on a two-step caption
    let dims = CaptionerDims { feature_dim: 4, enc_dim: 3, dec_dim: 4, embed_dim: 3, attn_dim: 4, vocab_size: 5 };
    let mut p = CaptionerParams::init(dims, &mut rng);
    for b in p.blocks_mut() {
        *b = Tensor::uniform(&b.shape().to_vec(), 1.0, &mut rng);
    }
    let grid = FeatureGrid::new(1, 4, 4, draw(&mut rng, &[16]).into_data())?;
    let tokens = vec![START, rng.gen_range(3..dims.vocab_size), END];
    let caption = Caption::new(tokens);
    let inputs: Vec<Tensor> = p.named_blocks().into_iter().map(|(_, t)| t.clone()).collect();
    debug_assert_eq!(inputs.len(), block_names().len());
    push("captioner_nll", check_gradients_with(&inputs, stencil, |t, v| {
        caption_nll(t, &grid, &caption, &CaptionerVars::from_slice(v))
    })?);

    Ok(cases)
}
