#![allow(dead_code)]

use modnet::composite::{
    compose_finetune, compose_stitch, compose_two_towers, default_stitch_pairs, CompositeNet, NetGraph,
};
use modnet::module::{build_module, set_frozen, ModuleSpec};
use modnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small random layer stack: one or two convolutions, an optional pool
/// between them, and a dense top.
pub fn random_arch(r: &mut ChaCha8Rng) -> String {
    let mut parts = vec![format!("({}x{k}x{k})", r.gen_range(1..=3), k = [1, 3][r.gen_range(0..2)])];
    if r.gen_bool(0.6) {
        parts.push("maxpool2".into());
    }
    if r.gen_bool(0.6) {
        parts.push(format!("({}x{k}x{k})", r.gen_range(1..=3), k = [1, 3][r.gen_range(0..2)]));
    }
    parts.push(format!("dense{}", r.gen_range(2..=5)));
    parts.join("-")
}

pub fn random_input(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random composite number `i`; cycles through fine-tune, two-towers and
/// stitch so every op appears within a handful of draws.
pub fn random_net(i: u64) -> (CompositeNet, String) {
    let mut r = ChaCha8Rng::seed_from_u64(1000 + i);
    let shape = [r.gen_range(1..=2), r.gen_range(4..=7), r.gen_range(4..=7)];
    let arch = random_arch(&mut r);
    let spec = ModuleSpec::parse("base", &arch).unwrap();
    let base = build_module(&spec, &shape, i).unwrap();
    let k = r.gen_range(2..=4);
    let net = match i % 3 {
        0 => compose_finetune(base, k, i).unwrap(),
        1 => {
            let module = build_module(&ModuleSpec::parse("module", &random_arch(&mut r)).unwrap(), &shape, i + 1).unwrap();
            compose_two_towers(set_frozen(base, true), module, k, i).unwrap()
        }
        _ => {
            let mspec = spec.scaled("stitch", 1, 2);
            let pairs = default_stitch_pairs(&spec, &mspec);
            compose_stitch(set_frozen(base, true), &mspec, &pairs, k, i).unwrap()
        }
    };
    let desc = format!("{} {arch} on {shape:?}", net.topology);
    (net, desc)
}

/// Graph of `net` with random biases, input and label, chosen so every
/// ReLU and pooling decision sits at least `margin` away from a tie.
pub fn prepared_graph(net: &CompositeNet, seed: u64, activity_l2: Option<f64>, margin: f64) -> NetGraph {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut ng = net.build_graph(activity_l2).unwrap();
    for p in ng.graph.params().to_vec() {
        let t = ng.graph.param_mut(p);
        if t.shape().len() == 1 {
            t.data_mut().iter_mut().for_each(|b| *b = r.gen_range(-0.2..0.2));
        }
    }
    for _ in 0..200 {
        let x = random_input(&mut r, net.input_shape());
        let label = r.gen_range(0..ng.num_classes());
        ng.forward(&x, label).unwrap();
        if ng.graph.kink_margin() > margin {
            return ng;
        }
    }
    panic!("no input clear of kinks found");
}
