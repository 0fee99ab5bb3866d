//! Diagnostic: decompose a trained root's held-out error by bundle region.
//!
//! Usage: root_error_profile <model_dir> <test_data_dir>

use bhpm::gproot::svgp_predict;
use bhpm::harness::list_solve_dirs;
use bhpm::model::load_model;
use bhpm::specgen::make_root_testset;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let model = load_model(std::path::Path::new(&args[1])).unwrap();
    let dirs = list_solve_dirs(std::path::Path::new(&args[2])).unwrap();
    let fields: Vec<_> = dirs
        .iter()
        .map(|d| bhpm::harness::load_field(d).unwrap())
        .collect();
    let ts = make_root_testset(&fields, model.k, 2048, 77).unwrap();
    let (mean, _var) = svgp_predict(&model.inducing, &model.hyper, &ts.v.view()).unwrap();

    // errors sorted by |u_x| magnitude decile
    let n = ts.u_t.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| ts.v[[a, 1]].abs().partial_cmp(&ts.v[[b, 1]].abs()).unwrap());
    println!("decile |u_x|_max  rmse        mean|u_t|   true-op rmse");
    for d in 0..10 {
        let lo = d * n / 10;
        let hi = (d + 1) * n / 10;
        let mut se = 0.0;
        let mut ma = 0.0f64;
        let mut tu = 0.0;
        let mut se_true = 0.0;
        for &i in &idx[lo..hi] {
            let e = mean[i] - ts.u_t[i];
            se += e * e;
            ma = ma.max(ts.v[[i, 1]].abs());
            tu += ts.u_t[i].abs();
            let f_true = 0.1 * ts.v[[i, 2]] - ts.v[[i, 0]] * ts.v[[i, 1]];
            let et = f_true - ts.u_t[i];
            se_true += et * et;
        }
        let m = (hi - lo) as f64;
        println!(
            "{d}      {ma:9.3}  {:9.4}   {:9.4}  {:9.4}",
            (se / m).sqrt(),
            tu / m,
            (se_true / m).sqrt()
        );
    }
    let rmse = (idx
        .iter()
        .map(|&i| (mean[i] - ts.u_t[i]).powi(2))
        .sum::<f64>()
        / n as f64)
        .sqrt();
    println!("overall rmse {rmse:.4}");
}
