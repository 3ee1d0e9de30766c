use std::time::Instant;

use rnadot::nn::{grad_check, ModelSpec};

fn main() {
    let t = Instant::now();
    let r = grad_check(&ModelSpec::minivgg(8), 1e-5, 7).unwrap();
    println!("{r:?} in {:.1?}", t.elapsed());
}
