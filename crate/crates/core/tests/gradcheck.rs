mod common;

use steervec::rng::SeededRng;
use steervec::tensor::{Tape, Tensor, Var};

use common::{extraction_gradcheck, rel_err};

const COLS: usize = 6;
const ROWS: usize = 4;
const TABLE: usize = 10;

#[derive(Clone, Copy, Debug)]
enum Step {
    MatMul,
    LayerNorm,
    Gelu,
    Softmax,
    AddRow,
    Square,
    Scale,
    Attention,
    SwapHalves,
    Reshape,
    Gather,
    Residual,
}

const STEPS: [Step; 12] = [
    Step::MatMul,
    Step::LayerNorm,
    Step::Gelu,
    Step::Softmax,
    Step::AddRow,
    Step::Square,
    Step::Scale,
    Step::Attention,
    Step::SwapHalves,
    Step::Reshape,
    Step::Gather,
    Step::Residual,
];

struct Graph {
    plan: Vec<Step>,
    ids: Vec<usize>,
    targets: Vec<usize>,
    ce_loss: bool,
}

fn random_graph(seed: u64) -> Graph {
    let mut rng = SeededRng::new(seed);
    let mut plan = vec![Step::LayerNorm, Step::Attention];
    for _ in 0..3 + rng.below(4) {
        plan.push(STEPS[rng.below(STEPS.len())]);
    }
    rng.shuffle(&mut plan);
    Graph {
        plan,
        ids: (0..ROWS).map(|_| rng.below(TABLE)).collect(),
        targets: (0..ROWS).map(|_| rng.below(TABLE)).collect(),
        ce_loss: rng.below(2) == 0,
    }
}

fn leaves(seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = SeededRng::new(seed ^ 0x1234);
    let mut t = |shape: &[usize], scale: f64, shift: f64| {
        Tensor::from_fn(shape, |_| shift + scale * rng.normal())
    };
    vec![
        t(&[ROWS, COLS], 1.0, 0.0),
        t(&[COLS, COLS], 0.5, 0.0),
        t(&[COLS], 0.3, 1.0),
        t(&[COLS], 0.3, 0.0),
        t(&[TABLE, COLS], 0.5, 0.0),
    ]
}

fn build(tape: &mut Tape<'_, f64>, v: &[Var], g: &Graph) -> Var {
    let (x, w, gain, bias, table) = (v[0], v[1], v[2], v[3], v[4]);
    let mut h = x;
    for step in &g.plan {
        h = match step {
            Step::MatMul => tape.matmul(h, w).unwrap(),
            Step::LayerNorm => tape.layer_norm(h, gain, bias, 1e-5).unwrap(),
            Step::Gelu => tape.gelu(h),
            Step::Softmax => tape.softmax(h, false).unwrap(),
            Step::AddRow => tape.add_row(h, bias, Some(vec![0, 2])).unwrap(),
            Step::Square => tape.mul(h, h).unwrap(),
            Step::Scale => tape.scale(h, 0.7),
            Step::Attention => {
                let q = tape.slice(h, 1, 0, 3).unwrap();
                let k = tape.slice(h, 1, 3, 3).unwrap();
                let kt = tape.transpose(k).unwrap();
                let s = tape.matmul(q, kt).unwrap();
                let p = tape.softmax(s, true).unwrap();
                let o = tape.matmul(p, h).unwrap();
                tape.add(o, h).unwrap()
            }
            Step::SwapHalves => {
                let a = tape.slice(h, 1, 0, 2).unwrap();
                let b = tape.slice(h, 1, 2, COLS - 2).unwrap();
                tape.concat(&[b, a], 1).unwrap()
            }
            Step::Reshape => {
                let r = tape.reshape(h, &[ROWS * 2, COLS / 2]).unwrap();
                let r = tape.gelu(r);
                tape.reshape(r, &[ROWS, COLS]).unwrap()
            }
            Step::Gather => {
                let e = tape.gather(table, &g.ids).unwrap();
                tape.add(h, e).unwrap()
            }
            Step::Residual => tape.add(h, x).unwrap(),
        };
    }
    if g.ce_loss {
        let tt = tape.transpose(table).unwrap();
        let logits = tape.matmul(h, tt).unwrap();
        tape.cross_entropy(logits, &g.targets).unwrap()
    } else {
        let sq = tape.mul(h, h).unwrap();
        tape.sum(sq)
    }
}

fn loss_of(inputs: &[Tensor<f64>], g: &Graph) -> f64 {
    let mut tape = Tape::new();
    let v: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let l = build(&mut tape, &v, g);
    tape.value(l)[0]
}

fn check_graph(seed: u64) -> f64 {
    let g = random_graph(seed);
    let inputs = leaves(seed);
    let mut tape = Tape::new();
    let v: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let l = build(&mut tape, &v, &g);
    let grads = tape.backward(l).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (li, var) in v.iter().enumerate() {
        let analytic = grads.get(*var).map(|t| t.data().to_vec());
        for i in 0..inputs[li].numel() {
            let mut plus = inputs.clone();
            plus[li].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[li].data_mut()[i] -= h;
            let fd = (loss_of(&plus, &g) - loss_of(&minus, &g)) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |d| d[i]);
            worst = worst.max(rel_err(fd, a));
        }
    }
    worst
}

#[test]
fn random_op_graphs_match_finite_differences() {
    for seed in 0..24 {
        let err = check_graph(seed);
        assert!(
            err < 1e-5,
            "graph {seed} {:?}: relative error {err:e}",
            random_graph(seed).plan
        );
    }
}

#[test]
fn extraction_loss_gradient_matches_finite_differences() {
    for seed in 0..24 {
        let case = extraction_gradcheck(seed);
        assert!(
            case.max_rel_err < 1e-3,
            "{}: relative error {:e}",
            case.label,
            case.max_rel_err
        );
    }
}
