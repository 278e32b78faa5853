use mcwave::coarse::{Scheme, Stepper};
use mcwave::experiment::{builtin, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// 6x6 blocks with one oversampling layer: blocks 2..=3 never see the domain boundary.
fn uniform_model() -> Model {
    let mut cfg = builtin("uniform").unwrap();
    cfg.mesh.nx = 24;
    cfg.mesh.n_h = 6;
    cfg.cell.layers = Some(1);
    Model::build(&cfg).unwrap()
}

#[test]
fn unit_field_downscales_to_coarse_hats() {
    let m = uniform_model();
    let block = m.part.block_id(2, 2);
    let c = m.part.cells_per_block();
    let t0 = &m.down.t0[block];
    for (corner, vals) in t0.iter().enumerate() {
        for b in 0..=c {
            for a in 0..=c {
                let (s, t) = (a as f64 / c as f64, b as f64 / c as f64);
                let want = [(1.0 - s) * (1.0 - t), s * (1.0 - t), s * t, (1.0 - s) * t][corner];
                assert!((vals[b * (c + 1) + a] - want).abs() < 1e-10, "corner {corner} node ({a},{b})");
            }
        }
    }
}

#[test]
fn unit_field_has_exact_mass_and_no_reaction() {
    let m = uniform_model();
    let sys = &m.system;
    let hc = m.part.coarse_h();
    let centre = sys.dofs.node(3, 3).unwrap();
    for ci in 2..=4 {
        for cj in 2..=4 {
            let other = sys.dofs.node(ci, cj).unwrap();
            let mm = match (ci.abs_diff(3), cj.abs_diff(3)) {
                (0, 0) => 4.0 / 9.0,
                (1, 1) => 1.0 / 36.0,
                _ => 1.0 / 9.0,
            };
            assert!((sys.m[(centre, other)] - mm * hc * hc).abs() < 1e-12, "m at ({ci},{cj})");
            assert!(sys.c[(centre, other)].abs() < 1e-10, "c at ({ci},{cj})");
        }
    }
}

// The linear cell functions are only near-linear, so the stiffness matches Q1 up to the
// oversampling error.
#[test]
fn unit_field_stiffness_is_near_q1_laplacian() {
    let m = Model::build(&builtin("uniform").unwrap()).unwrap();
    let sys = &m.system;
    let nb = m.part.n_blocks();
    let centre = sys.dofs.node(nb / 2, nb / 2).unwrap();
    for ci in nb / 2 - 1..=nb / 2 + 1 {
        for cj in nb / 2 - 1..=nb / 2 + 1 {
            let other = sys.dofs.node(ci, cj).unwrap();
            let want = if ci == nb / 2 && cj == nb / 2 { 8.0 / 3.0 } else { -1.0 / 3.0 };
            let got = sys.a[(centre, other)];
            assert!((got - want).abs() <= 0.1 * want.abs(), "a at ({ci},{cj}): {got}");
        }
    }
    // φ ≢ 1 only where the oversampled region meets the zero boundary data
    let c_row = sys.c.row(centre).amax();
    assert!(c_row <= 1e-3 * sys.a[(centre, centre)], "c = {c_row:e}");
}

#[test]
fn decoupled_scheme2_matches_coupled_solve() {
    let mut cfg = builtin("example1").unwrap();
    cfg.mesh.nx = 40;
    cfg.mesh.n_h = 5;
    cfg.cell.layers = Some(2);
    let model = Model::build(&cfg).unwrap();
    let mut sys = model.system.clone();
    let (n1, n) = (sys.n1(), sys.dofs.len());
    assert!(n1 > 0 && n1 < n);
    for i in 0..n1 {
        for j in n1..n {
            sys.m[(i, j)] = 0.0;
            sys.m[(j, i)] = 0.0;
        }
    }
    let tau = 1e-3;
    let fast = Stepper::new(&sys, Scheme::Scheme2, tau).unwrap();
    let slow = Stepper::with_options(&sys, Scheme::Scheme2, tau, false).unwrap();
    assert!(fast.is_decoupled() && !slow.is_decoupled());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let load: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (mut pa, mut ca) = (u0.clone(), u0.clone());
    let (mut pb, mut cb) = (u0.clone(), u0);
    for _ in 0..200 {
        let na = fast.step(&pa, &ca, &load);
        let nb = slow.step(&pb, &cb, &load);
        let scale = nb.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let diff = na.iter().zip(&nb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-12 * scale, "{diff:e} vs {scale:e}");
        (pa, ca) = (ca, na);
        (pb, cb) = (cb, nb);
    }
}
