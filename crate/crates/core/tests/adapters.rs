mod common;

use qrlora::adapters::{count_trainable, Adapter, AdapterSpec, AnyAdapter, LayerScope, ModelDims, Projection};
use qrlora::rank::RankPolicy;
use qrlora::{Matrix, QrLoraAdapter};
use rand::Rng;

const FD_STEP: f64 = 1e-4;
const FD_REL_TOL: f64 = 1e-6;

#[test]
fn full_rank_unit_lambda_reproduces_base() {
    let mut r = common::rng(200);
    for i in 0..200 {
        let (rows, cols) = (r.gen_range(1..20), r.gen_range(1..20));
        let w = if i % 3 == 0 {
            common::low_rank(&mut r, rows, cols, 1)
        } else {
            common::uniform(&mut r, rows, cols)
        };
        let k = rows.min(cols);
        let mut ad = QrLoraAdapter::build(&w, RankPolicy::Fixed(k)).unwrap();
        ad.lambda_mut().fill(1.0);
        let err = ad.delta_w().max_abs_diff(&w).unwrap();
        assert!(err <= 1e-10 * (1.0 + w.max_abs()), "case {i}: {err}");
    }
}

fn specs() -> Vec<AdapterSpec> {
    let all = LayerScope::All;
    vec![
        AdapterSpec::qr_lora(RankPolicy::Energy(0.8), all.clone(), &[Projection::O]),
        AdapterSpec::lora(3, all.clone(), &[Projection::O]),
        AdapterSpec::svd_lora(3, 2, 4.0, all, &[Projection::O]),
        AdapterSpec::full_ft(),
    ]
}

/// Loss `⟨P, W_eff⟩ + ½‖W_eff‖²` for a random probe `P`; its gradient in
/// the effective weight is `P + W_eff`.
fn probe_loss(ad: &AnyAdapter, probe: &Matrix) -> f64 {
    let w = ad.effective_weight();
    probe.frobenius_dot(&w).unwrap() + 0.5 * w.frobenius_dot(&w).unwrap()
}

#[test]
fn trainable_gradients_match_central_differences() {
    let mut r = common::rng(7);
    for spec in specs() {
        for _ in 0..5 {
            let (rows, cols) = (r.gen_range(3..9), r.gen_range(3..9));
            let w0 = common::uniform(&mut r, rows, cols);
            let mut ad = AnyAdapter::build(&spec, &w0, &mut r).unwrap();
            for (_, t) in ad.trainables_mut() {
                t.iter_mut().for_each(|v| *v += r.gen_range(-0.5..0.5));
            }
            let probe = common::uniform(&mut r, rows, cols);
            let g = probe.add(&ad.effective_weight()).unwrap();
            let analytic = ad.grad_trainables(&g).unwrap();
            for (k, (name, grad)) in analytic.iter().enumerate() {
                for j in 0..grad.len() {
                    let x0 = ad.trainables_mut()[k].1[j];
                    ad.trainables_mut()[k].1[j] = x0 + FD_STEP;
                    let up = probe_loss(&ad, &probe);
                    ad.trainables_mut()[k].1[j] = x0 - FD_STEP;
                    let down = probe_loss(&ad, &probe);
                    ad.trainables_mut()[k].1[j] = x0;
                    let fd = (up - down) / (2.0 * FD_STEP);
                    let rel = (fd - grad[j]).abs() / fd.abs().max(grad[j].abs()).max(1e-6);
                    assert!(rel <= FD_REL_TOL, "{} {name}[{j}]: {} vs {fd}", spec.label(), grad[j]);
                }
            }
        }
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut r = common::rng(8);
    let w0 = common::uniform(&mut r, 6, 5);
    for spec in specs() {
        let ad = AnyAdapter::build(&spec, &w0, &mut r).unwrap();
        for (_, g) in ad.grad_trainables(&Matrix::zeros(6, 5)).unwrap() {
            assert!(g.iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn fresh_adapters_start_where_documented() {
    let mut r = common::rng(9);
    let w0 = common::uniform(&mut r, 7, 7);
    for spec in specs() {
        let ad = AnyAdapter::build(&spec, &w0, &mut r).unwrap();
        let eff = ad.effective_weight();
        match spec.method {
            qrlora::adapters::Method::SvdLora => {
                // w0 plus the top-k truncation, scaled by α/r.
                let t = qrlora::linalg::svd(&w0).unwrap().truncated(spec.top_k);
                let expected = w0.add(&t.scale(spec.alpha / spec.rank as f64)).unwrap();
                assert!(eff.max_abs_diff(&expected).unwrap() < 1e-12);
            }
            _ => assert_eq!(eff, w0),
        }
    }
}

#[test]
fn frozen_basis_survives_updates() {
    let mut r = common::rng(10);
    let w0 = common::uniform(&mut r, 8, 6);
    let mut ad = QrLoraAdapter::build(&w0, RankPolicy::Energy(0.5)).unwrap();
    let before = (ad.w0().clone(), ad.q_basis().clone(), ad.r_rows().clone(), ad.perm().to_vec());
    for _ in 0..50 {
        let g = common::uniform(&mut r, 8, 6);
        let grad = ad.grad_lambda(&g).unwrap();
        for (l, d) in ad.lambda_mut().iter_mut().zip(grad) {
            *l -= 0.1 * d;
        }
    }
    assert_eq!(before, (ad.w0().clone(), ad.q_basis().clone(), ad.r_rows().clone(), ad.perm().to_vec()));
    assert!(ad.lambda().iter().any(|&l| l != 0.0));
}

#[test]
fn closed_form_counts() {
    let dims = ModelDims {
        n_layers: 12,
        d_model: 768,
        total_params: 124_645_632,
    };
    let lora = AdapterSpec::lora(2, LayerScope::All, &[Projection::Q, Projection::V]);
    assert_eq!(count_trainable(&lora, &dims, &[]).unwrap(), 2 * 2 * 768 * 24);
    let qr = AdapterSpec::qr_lora(RankPolicy::Energy(0.5), LayerScope::All, &[Projection::O]);
    let ranks: Vec<usize> = (0..12).map(|i| 40 + i).collect();
    assert_eq!(count_trainable(&qr, &dims, &ranks).unwrap(), ranks.iter().sum::<usize>());
    assert!(count_trainable(&qr, &dims, &ranks[..11]).is_err());
    assert_eq!(count_trainable(&AdapterSpec::full_ft(), &dims, &[]).unwrap(), dims.total_params);
}
