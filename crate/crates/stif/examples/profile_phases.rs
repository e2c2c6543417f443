//! Phase timing: forward-only vs forward+backward at step scale.
use stif::autodiff::Tape;
use stif::camera::Vec3;
use stif::field::{FieldArch, FieldNetwork};

fn main() {
    let arch = FieldArch::new(128, 8).with_bounds([-3.0; 3], [3.0; 3]);
    let net = FieldNetwork::init(arch, 0).unwrap();
    let b = 1536usize; // rows per fine chunk
    let points: Vec<Vec3> = (0..b).map(|i| Vec3::new((i % 7) as f64 * 0.1, 0.3, 0.2)).collect();
    let times = vec![0.0; b];

    let reps = 12;
    // encode
    let t = std::time::Instant::now();
    for _ in 0..reps {
        let _ = net.encode_inputs(&points, &times).unwrap();
    }
    println!("encode      {:.4} s", t.elapsed().as_secs_f64() / reps as f64);

    let enc = net.encode_inputs(&points, &times).unwrap();
    // forward only
    let t = std::time::Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let leaves = net.bind(&mut tape);
        let e = tape.leaf(&enc);
        let _ = net.forward_on_tape(&mut tape, &leaves, e).unwrap();
    }
    println!("forward     {:.4} s", t.elapsed().as_secs_f64() / reps as f64);

    // forward + backward on mean(sigma)
    let t = std::time::Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let leaves = net.bind(&mut tape);
        let e = tape.leaf(&enc);
        let (_c, s) = net.forward_on_tape(&mut tape, &leaves, e).unwrap();
        let root = tape.mean(s).unwrap();
        tape.backward(root).unwrap();
        let _ = net.leaf_grads(&tape, &leaves);
    }
    println!("fwd+bwd     {:.4} s", t.elapsed().as_secs_f64() / reps as f64);
}
