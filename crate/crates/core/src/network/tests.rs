use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{finite_diff_check, CheckOptions, Objective};

fn tiny(scales: Vec<usize>) -> ModelConfig {
    ModelConfig {
        width: 8,
        scales,
        heads: 2,
        temporal_dim: 4,
        ..ModelConfig::default()
    }
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn set_identity_linear(p: &mut ModelParams<f64>, ids: &LinearIds) {
    let d = p.get(ids.weight).rows();
    *p.get_mut(ids.weight) = Matrix::identity(d);
    *p.get_mut(ids.bias) = Matrix::zeros(1, d);
}

fn set_filter(p: &mut ModelParams<f64>, ids: &ScaleIds, re: f64) {
    let (d, l) = p.get(ids.filter_re).shape();
    *p.get_mut(ids.filter_re) = Matrix::filled(d, l, re);
    *p.get_mut(ids.filter_im) = Matrix::zeros(d, l);
}

fn zero_linear(p: &mut ModelParams<f64>, ids: &LinearIds) {
    p.get_mut(ids.weight).as_mut_slice().fill(0.0);
    p.get_mut(ids.bias).as_mut_slice().fill(0.0);
}

/// Runs `f` on a fresh tape with `p` bound as constants and returns the
/// value of the var it produces.
fn eval(p: &ModelParams<f64>, x: &Matrix<f64>, f: impl FnOnce(&mut Tape<f64>, &Bound, Var) -> Result<Var>) -> Matrix<f64> {
    let mut t = Tape::new();
    let b = p.bind(&mut t, false);
    let xv = t.constant(x.clone());
    let out = f(&mut t, &b, xv).unwrap();
    t.value(out).clone()
}

#[test]
fn split_examples() {
    let x = Matrix::from_vec(4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let (e, o) = split_even_odd(&x).unwrap();
    assert_eq!(e.as_slice(), &[0.0, 2.0]);
    assert_eq!(o.as_slice(), &[1.0, 3.0]);
    let x3 = Matrix::from_vec(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
    let (e, o) = split_even_odd(&x3).unwrap();
    assert_eq!(e.as_slice(), &[0.0, 2.0]);
    assert_eq!(o.as_slice(), &[1.0, 1.0]);
    assert!(split_even_odd(&Matrix::<f64>::zeros(1, 3)).is_err());
}

#[test]
fn interleave_examples_and_round_trip() {
    let e = Matrix::from_vec(2, 1, vec![10.0, 30.0]).unwrap();
    let o = Matrix::from_vec(2, 1, vec![20.0, 40.0]).unwrap();
    assert_eq!(interleave(&e, &o, 4).unwrap().as_slice(), &[10.0, 20.0, 30.0, 40.0]);
    let z = Matrix::<f64>::zeros(3, 2);
    assert_eq!(interleave(&z, &z, 6).unwrap(), Matrix::zeros(6, 2));
    assert!(interleave(&e, &Matrix::zeros(3, 1), 4).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for l in 2..=65 {
        let x = rand_mat(&mut rng, l, 3);
        let (e, o) = split_even_odd(&x).unwrap();
        assert_eq!(interleave(&e, &o, l).unwrap(), x);
    }
}

#[test]
fn single_scale_identity_and_zero_filter() {
    let mut p = ModelParams::<f64>::init(tiny(vec![4]), 0).unwrap();
    let ids = p.layout().blocks[0].scales[0].clone();
    set_identity_linear(&mut p, &ids.even);
    set_identity_linear(&mut p, &ids.post);
    set_filter(&mut p, &ids, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for l in [2, 7, 16, 33] {
        let x = rand_mat(&mut rng, l, 8);
        let y = eval(&p, &x, |t, b, v| single_scale_interactor(t, b, &ids, v));
        assert!(y.max_abs_diff(&x) < 1e-9, "l={l}");
    }
    set_filter(&mut p, &ids, 0.0);
    let x = rand_mat(&mut rng, 9, 8);
    let y = eval(&p, &x, |t, b, v| single_scale_interactor(t, b, &ids, v));
    for r in 0..9 {
        let want = if r % 2 == 0 { x.row(r).to_vec() } else { vec![0.0; 8] };
        for (a, b) in y.row(r).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn multi_scale_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_mat(&mut rng, 12, 8);

    // One scale, attention value path zeroed: reduces to the single interactor.
    let mut p = ModelParams::<f64>::init(tiny(vec![4]), 1).unwrap();
    let block = p.layout().blocks[0].clone();
    zero_linear(&mut p, &block.attention.value);
    zero_linear(&mut p, &block.attention.output);
    let multi = eval(&p, &x, |t, b, v| multi_scale_interactor(t, b, &block, v));
    let single = eval(&p, &x, |t, b, v| single_scale_interactor(t, b, &block.scales[0], v));
    assert!(multi.max_abs_diff(&single) < 1e-12);

    // Three identical scales: the mean equals any one of them.
    let mut p3 = ModelParams::<f64>::init(tiny(vec![4, 4, 4]), 1).unwrap();
    let block3 = p3.layout().blocks[0].clone();
    for s in &block3.scales[1..] {
        for (dst, src) in [
            (s.even.weight, block3.scales[0].even.weight),
            (s.even.bias, block3.scales[0].even.bias),
            (s.filter_re, block3.scales[0].filter_re),
            (s.filter_im, block3.scales[0].filter_im),
            (s.post.weight, block3.scales[0].post.weight),
            (s.post.bias, block3.scales[0].post.bias),
        ] {
            *p3.get_mut(dst) = p3.get(src).clone();
        }
    }
    zero_linear(&mut p3, &block3.attention.value);
    zero_linear(&mut p3, &block3.attention.output);
    let multi = eval(&p3, &x, |t, b, v| multi_scale_interactor(t, b, &block3, v));
    let single = eval(&p3, &x, |t, b, v| single_scale_interactor(t, b, &block3.scales[2], v));
    assert!(multi.max_abs_diff(&single) < 1e-12);

    // Reordering scales leaves the output unchanged.
    let p4 = ModelParams::<f64>::init(tiny(vec![3, 5, 8]), 4).unwrap();
    let mut block4 = p4.layout().blocks[0].clone();
    let a = eval(&p4, &x, |t, b, v| multi_scale_interactor(t, b, &block4, v));
    block4.scales.reverse();
    let bb = eval(&p4, &x, |t, b, v| multi_scale_interactor(t, b, &block4, v));
    assert!(a.max_abs_diff(&bb) < 1e-12);
}

fn fuse(p: &ModelParams<f64>, ft: &Matrix<f64>, ff: &Matrix<f64>) -> (Matrix<f64>, Matrix<f64>) {
    let ids = p.layout().blocks[0].gate.clone();
    let mut t = Tape::new();
    let b = p.bind(&mut t, false);
    let (a, c) = (t.constant(ft.clone()), t.constant(ff.clone()));
    let (out, g) = self_gated_fusion(&mut t, &b, &ids, GateKind::Sigmoid, a, c).unwrap();
    (t.value(out).clone(), t.value(g).clone())
}

#[test]
fn fusion_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (ft, ff) = (rand_mat(&mut rng, 6, 8), rand_mat(&mut rng, 6, 8));
    let mut p = ModelParams::<f64>::init(tiny(vec![4]), 2).unwrap();
    let gate = p.layout().blocks[0].gate.clone();
    zero_linear(&mut p, &gate);
    let (out, g) = fuse(&p, &ft, &ff);
    assert!(g.as_slice().iter().all(|&v| v == 0.5));
    assert!(out.max_abs_diff(&ft.zip_map(&ff, |a, b| (a + b) / 2.0)) < 1e-15);

    p.get_mut(gate.bias).as_mut_slice().fill(20.0);
    let (out, _) = fuse(&p, &ft, &ff);
    assert!(out.max_abs_diff(&ft) < 1e-8);

    let p = ModelParams::<f64>::init(tiny(vec![4]), 3).unwrap();
    let (out, g) = fuse(&p, &ft, &ft);
    assert!(out.max_abs_diff(&ft) < 1e-15);
    assert!(g.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));

    let mut t = Tape::new();
    let b = p.bind(&mut t, false);
    let (a, c) = (t.constant(ft.clone()), t.constant(Matrix::zeros(5, 8)));
    assert!(self_gated_fusion(&mut t, &b, &gate, GateKind::Sigmoid, a, c).is_err());
}

#[test]
fn softmax_gate_sums_to_one_across_channels() {
    let cfg = ModelConfig {
        gate: GateKind::Softmax,
        ..tiny(vec![4])
    };
    let p = ModelParams::<f64>::init(cfg, 3).unwrap();
    let ids = p.layout().blocks[0].gate.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut t = Tape::new();
    let b = p.bind(&mut t, false);
    let (a, c) = (t.constant(rand_mat(&mut rng, 5, 8)), t.constant(rand_mat(&mut rng, 5, 8)));
    let (_, g) = self_gated_fusion(&mut t, &b, &ids, GateKind::Softmax, a, c).unwrap();
    for r in 0..5 {
        assert!((t.value(g).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn identity_block(p: &mut ModelParams<f64>, block: &BlockIds) {
    for s in &block.scales {
        set_identity_linear(p, &s.even);
        set_identity_linear(p, &s.post);
        set_filter(p, s, 1.0);
    }
    zero_linear(p, &block.attention.value);
    zero_linear(p, &block.attention.output);
    p.get_mut(block.gate.weight).as_mut_slice().fill(0.0);
    p.get_mut(block.gate.bias).as_mut_slice().fill(40.0);
}

#[test]
fn identity_configuration_collapses_block() {
    let mut p = ModelParams::<f64>::init(tiny(vec![3, 5, 8]), 7).unwrap();
    let block = p.layout().blocks[0].clone();
    identity_block(&mut p, &block);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for l in [2, 11, 24] {
        let x = rand_mat(&mut rng, l, 8);
        let mut t = Tape::new();
        let b = p.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let out = m3i_block(&mut t, &b, &block, xv).unwrap();
        assert!(t.value(out.fused).max_abs_diff(&x) < 1e-8);
    }

    // Interactor silenced, gate at one half: the block halves its input.
    for s in &block.scales {
        zero_linear(&mut p, &s.post);
    }
    p.get_mut(block.gate.bias).as_mut_slice().fill(0.0);
    let x = rand_mat(&mut rng, 10, 8);
    let mut t = Tape::new();
    let b = p.bind(&mut t, false);
    let xv = t.constant(x.clone());
    let out = m3i_block(&mut t, &b, &block, xv).unwrap();
    assert!(t.value(out.fused).max_abs_diff(&x.scale(0.5)) < 1e-12);
}

#[test]
fn conv_module_examples() {
    let mut p = ModelParams::<f64>::init(tiny(vec![4]), 9).unwrap();
    let ids = p.layout().convs[0].clone();
    p.get_mut(ids.weight).as_mut_slice().fill(0.0);
    p.get_mut(ids.bias).as_mut_slice().fill(0.7);
    let x = Matrix::filled(9, 15, 3.0);
    let y = eval(&p, &x, |t, b, v| conv_module(t, b, &ids, v));
    assert_eq!(y.shape(), (5, 8));
    assert!(y.as_slice().iter().all(|&v| (v - 0.7f64.tanh()).abs() < 1e-15));
    let p = ModelParams::<f64>::init(tiny(vec![4]), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for l in 5..=64 {
        let y = eval(&p, &rand_mat(&mut rng, l, 15), |t, b, v| conv_module(t, b, &ids, v));
        assert_eq!(y.rows(), l.div_ceil(2));
    }
    let mut t = Tape::new();
    let b = p.bind(&mut t, false);
    let short = t.constant(Matrix::zeros(4, 15));
    assert!(matches!(conv_module(&mut t, &b, &ids, short), Err(Error::TooShort { min: 5, .. })));
}

#[test]
fn selective_pooling_examples() {
    let mut p = ModelParams::<f64>::init(tiny(vec![4]), 11).unwrap();
    let ids = p.layout().pool.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let one = rand_mat(&mut rng, 1, 8);
    let y = eval(&p, &one, |t, b, v| selective_pooling(t, b, &ids, v));
    assert!(y.max_abs_diff(&one) < 1e-15);

    zero_linear(&mut p, &ids);
    let seq = rand_mat(&mut rng, 6, 8);
    let y = eval(&p, &seq, |t, b, v| selective_pooling(t, b, &ids, v));
    for c in 0..8 {
        let mean = seq.column(c).iter().sum::<f64>() / 6.0;
        assert!((y[(0, c)] - mean).abs() < 1e-14);
    }

    // Score = 50 on a marker channel for row 2 and -50 elsewhere.
    let mut seq = rand_mat(&mut rng, 5, 8);
    for r in 0..5 {
        seq[(r, 7)] = if r == 2 { 1.0 } else { -1.0 };
    }
    p.get_mut(ids.weight)[(0, 7)] = 50.0;
    let y = eval(&p, &seq, |t, b, v| selective_pooling(t, b, &ids, v));
    for c in 0..8 {
        assert!((y[(0, c)] - seq[(2, c)]).abs() < 1e-8);
    }
}

fn features(rng: &mut ChaCha8Rng, l: usize, c: usize) -> FeatureSequence<f64> {
    FeatureSequence { values: rand_mat(rng, l, c) }
}

#[test]
fn forward_shapes_and_determinism() {
    let p = ModelParams::<f64>::init(ModelConfig::with_width(64), 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let f = features(&mut rng, 120, 15);
    let e = forward(&f, &p).unwrap();
    assert_eq!(e.f_t.shape(), (30, 64));
    assert_eq!(e.f_f.len(), 64);
    assert!(e.logit.is_finite() && e.f_t.is_finite());
    assert_eq!(forward(&f, &p).unwrap(), e);
    for l in [20, 21, 37, 64] {
        let e = forward(&features(&mut rng, l, 15), &p).unwrap();
        assert_eq!(e.f_t.rows(), temporal_len(l));
    }
    let err = forward(&features(&mut rng, 19, 15), &p).unwrap_err();
    assert!(matches!(err, Error::TooShort { min: MIN_SEQUENCE_LEN, got: 19, .. }));
    assert!(forward(&features(&mut rng, 30, 14), &p).is_err());
}

#[test]
fn gate_statistic_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let data: Vec<_> = (0..3).map(|i| features(&mut rng, 20 + i, 15)).collect();
    let mut p = ModelParams::<f64>::init(tiny(vec![4]), 16).unwrap();
    let gates: Vec<LinearIds> = p.layout().blocks.iter().map(|b| b.gate.clone()).collect();
    for g in &gates {
        zero_linear(&mut p, g);
    }
    assert_eq!(gate_statistics(&p, &data).unwrap(), 0.5);
    for g in &gates {
        p.get_mut(g.bias).as_mut_slice().fill(20.0);
    }
    assert!(gate_statistics(&p, &data).unwrap() > 0.999);
    assert!(gate_statistics(&p, &[]).is_err());
}

#[test]
fn default_parameter_count() {
    let p = ModelParams::<f64>::init(ModelConfig::default(), 0).unwrap();
    let d = 64;
    let lin = |i: usize, o: usize| i * o + o;
    let block = 3 * 2 * lin(d, d) + 2 * d * (16 + 32 + 64) + 4 * lin(d, d) - d + lin(2 * d, d);
    let want = lin(15 * 5, d) + lin(d * 5, d) + 2 * block + 2 * (3 * d * d + 3 * d) + lin(d, 1) + lin(d, d) + lin(d, 64) + lin(d, d) + lin(d, 1);
    assert_eq!(p.param_count(), want);
    assert!(p.is_finite());
}

#[test]
fn config_validation() {
    assert!(ModelParams::<f64>::init(ModelConfig { heads: 3, ..tiny(vec![4]) }, 0).is_err());
    assert!(ModelParams::<f64>::init(tiny(vec![1]), 0).is_err());
    assert!(ModelParams::<f64>::init(tiny(vec![]), 0).is_err());
}

#[test]
fn recurrent_weights_are_orthogonal() {
    let p = ModelParams::<f64>::init(tiny(vec![4]), 17).unwrap();
    let w = p.get(p.layout().gru.w_hh);
    for g in 0..3 {
        let blk = Matrix::from_fn(8, 8, |r, c| w[(g * 8 + r, c)]);
        assert!(blk.matmul_t(&blk).max_abs_diff(&Matrix::identity(8)) < 1e-12);
    }
}

/// Full forward pass reduced to a scalar that touches every output.
struct FullModel {
    params: ModelParams<f64>,
    inputs: Vec<Matrix<f64>>,
}

impl FullModel {
    fn program(&self, t: &mut Tape<f64>, vars: &[Var]) -> Result<Var> {
        let b = self.params.bind_vars(vars);
        let mut terms = Vec::new();
        for (i, x) in self.inputs.iter().enumerate() {
            let xv = t.constant(x.clone());
            let ev = forward_on_tape(t, &b, self.params.layout(), xv)?;
            let probe = t.constant(Matrix::from_fn(t.value(ev.f_t).rows(), t.value(ev.f_t).cols(), |r, c| {
                ((r * 7 + c * 3 + i) % 5) as f64 - 2.0
            }));
            let ft = t.mul(ev.f_t, probe)?;
            terms.push(t.sum(ft));
            let ff = t.sum(ev.f_f);
            terms.push(t.scale(ff, 0.3));
            terms.push(ev.logit);
        }
        t.sum_scalars(&terms)
    }
}

impl Objective<f64> for FullModel {
    fn params(&self) -> &[Matrix<f64>] {
        self.params.tensors()
    }
    fn param_name(&self, i: usize) -> String {
        self.params.names()[i].clone()
    }
    fn value(&self, params: &[Matrix<f64>]) -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| t.constant(p.clone())).collect();
        let out = self.program(&mut t, &vars)?;
        Ok(t.scalar(out))
    }
    fn value_and_grad(&self, params: &[Matrix<f64>]) -> Result<(f64, Vec<Matrix<f64>>)> {
        crate::autodiff::value_and_grad(params, |t, v| self.program(t, v))
    }
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let model = FullModel {
        params: ModelParams::init(tiny(vec![2, 3]), 19).unwrap(),
        inputs: (0..2).map(|_| rand_mat(&mut rng, 24, 15)).collect(),
    };
    let rep = finite_diff_check(&model, &CheckOptions { eps: 1e-4, ..CheckOptions::default() }).unwrap();
    assert!(rep.max_rel_error < 1e-3, "{rep:?}");
}

#[test]
fn every_parameter_receives_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let model = FullModel {
        params: ModelParams::init(tiny(vec![2, 3]), 21).unwrap(),
        inputs: (0..2).map(|_| rand_mat(&mut rng, 24, 15)).collect(),
    };
    let (_, grads) = model.value_and_grad(model.params.tensors()).unwrap();
    for (name, g) in model.params.names().iter().zip(&grads) {
        assert!(g.max_abs() > 0.0, "{name} has no gradient");
    }
}

#[test]
fn toy_two_block_stack_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let params = ModelParams::<f64>::init(tiny(vec![3, 6]), 23).unwrap();
    let layout = params.layout().clone();
    let x = rand_mat(&mut rng, 16, 8);
    let obj = crate::autodiff::TapeObjective {
        params: params.tensors().to_vec(),
        names: params.names().to_vec(),
        program: move |t: &mut Tape<f64>, v: &[Var]| {
            let b = params.bind_vars(v);
            let xv = t.constant(x.clone());
            let o1 = m3i_block(t, &b, &layout.blocks[0], xv)?;
            let o2 = m3i_block(t, &b, &layout.blocks[1], o1.fused)?;
            let s = t.tanh(o2.fused);
            let f = t.mul(s, o2.freq)?;
            Ok(t.sum(f))
        },
    };
    let rep = finite_diff_check(&obj, &CheckOptions { eps: 1e-4, ..CheckOptions::default() }).unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}
