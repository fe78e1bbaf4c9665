use topdenoise_core::metrics::chamfer;
use topdenoise_core::projection::{project, unproject, combine, PlaneAxis};
use topdenoise_core::pointcloud::{add_gaussian_noise, NoiseSpec};
use topdenoise_core::synth::{generate_face, SyntheticIdentity};

#[test]
fn roundtrip_floor_probe() {
    // CD(roundtrip(clean), clean) and CD(roundtrip-with-clean-targets(noisy), clean):
    // the information floor of the 64x64 plane pipeline on dataset-like clouds.
    for sigma2 in [0.0, 8.0, 16.0] {
        let mut acc = 0.0;
        let mut acc_nn = 0.0;
        for i in 0..8u64 {
            let ident = SyntheticIdentity::new(i as usize, 7);
            let clean = generate_face(&ident, 1.0, 99, 1024).unwrap();
            let src = if sigma2 > 0.0 {
                add_gaussian_noise(&clean, &NoiseSpec { variance: sigma2, seed: i }).unwrap()
            } else {
                clean.clone()
            };
            let top = project(&src, (64, 64)).unwrap();
            // Perfect generator: each plane's grid replaced by clean grays
            // aggregated through the noisy cell assignment.
            let mut per_coord: [Vec<f64>; 3] = Default::default();
            for axis in PlaneAxis::ALL {
                let plane = top.plane(axis);
                let gi = axis.gray_index();
                let clean_vals: Vec<f64> = clean.points.iter().map(|p| p[gi]).collect();
                let grid = topdenoise_core::projection::aggregate_on_plane(plane, &clean_vals).unwrap();
                per_coord[gi] = unproject(plane, &grid, src.len()).unwrap();
            }
            let recon = combine(&per_coord[0], &per_coord[1], &per_coord[2]).unwrap();
            acc += chamfer(&recon, &clean);
            acc_nn += chamfer(&src, &clean);
        }
        println!("sigma2={sigma2}: floor CD={:.3} noisy CD={:.3}", acc / 8.0, acc_nn / 8.0);
    }
}

#[test]
fn per_plane_decomposition_probe() {
    // Pointwise squared error of each coordinate recovered from its plane,
    // pure round trip (no noise). Shows which planes lose information.
    let mut mse = [0.0f64; 3];
    let mut worst = [0.0f64; 3];
    let mut total = 0usize;
    for i in 0..8u64 {
        let ident = SyntheticIdentity::new(i as usize, 7);
        let clean = generate_face(&ident, 1.0, 99, 1024).unwrap();
        let top = project(&clean, (64, 64)).unwrap();
        for axis in PlaneAxis::ALL {
            let plane = top.plane(axis);
            let gi = axis.gray_index();
            let vals = unproject(plane, &plane.grid, clean.len()).unwrap();
            for (p, &v) in clean.points.iter().zip(&vals) {
                let e = (p[gi] - v) * (p[gi] - v);
                mse[gi] += e;
                if e > worst[gi] { worst[gi] = e; }
            }
        }
        total += clean.len();
    }
    for gi in 0..3 {
        println!("coord {gi}: mse={:.4} worst |err|={:.3}", mse[gi] / total as f64, worst[gi].sqrt());
    }
}

#[test]
fn margin_probe() {
    use topdenoise_core::synth::DEFAULT_EXPRESSION_AMPLITUDE;
    let a = SyntheticIdentity::new(0, 5);
    let b = SyntheticIdentity::new(1, 5);
    let na = generate_face(&a, 0.0, 0, 512).unwrap();
    let nb = generate_face(&b, 0.0, 0, 512).unwrap();
    let ea = generate_face(&a, DEFAULT_EXPRESSION_AMPLITUDE, 1, 512).unwrap();
    println!("inter/intra pair ratio: {:.2}", chamfer(&na, &nb) / chamfer(&na, &ea));
    let ids: Vec<SyntheticIdentity> = (0..10).map(|i| SyntheticIdentity::new(i, 23)).collect();
    let clouds: Vec<Vec<_>> = ids.iter().map(|id| (0..3).map(|j| {
        let amp = if j == 0 { 0.0 } else { DEFAULT_EXPRESSION_AMPLITUDE };
        generate_face(id, amp, j as u64, 256).unwrap()
    }).collect()).collect();
    let mut inter = vec![];
    let mut intra = vec![];
    for i in 0..10 { for j in i+1..10 { inter.push(chamfer(&clouds[i][0], &clouds[j][0])); } }
    for c in &clouds { for i in 0..3 { for j in i+1..3 { intra.push(chamfer(&c[i], &c[j])); } } }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("10-identity margin: {:.2}", mean(&inter) / mean(&intra));
}
