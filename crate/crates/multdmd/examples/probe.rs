use multdmd::config::preset_system;
use multdmd::dictionary::fit_kmeans;
use multdmd::dynsys::{add_noise, simulate};
use multdmd::estimators::{accumulate, fit_edmd_indicator, fit_exact_dmd, fit_multdmd};
use multdmd::spectral::{autocorrelation, cell_mean_observable, cycle_spectrum, dense_eig, model_moments};
use ndarray::Array1;
use std::time::Instant;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "pendulum".into());
    match which.as_str() {
        "pendulum" => pendulum(),
        "lorenz" => lorenz(),
        "torus" => torus(),
        "torus_moments" => torus_moments(),
        _ => eprintln!("unknown probe"),
    }
}

fn pendulum() {
    let t0 = Instant::now();
    let cfg = preset_system("pendulum_desk").unwrap();
    let s = simulate(&cfg).unwrap();
    println!("pendulum pairs: {} in {:?}", s.count(), t0.elapsed());
    let t0 = Instant::now();
    let dict = fit_kmeans(s.x(), 200, 0, 100, None).unwrap();
    println!("kmeans in {:?}", t0.elapsed());
    let acc = accumulate(&s, &dict).unwrap();
    println!("cells after repair: {}, removed {}", acc.dictionary.len(), acc.removed_cells.len());
    let k = fit_multdmd(&acc.weights, false).unwrap();
    let r = cycle_spectrum(&k).unwrap();
    println!("cycles: {:?}", r.cycles.iter().map(|c| (c.length, c.basin_size)).collect::<Vec<_>>());
    let retained = r.retained(50);
    println!("retained eigenvalues: {}", retained.eigenvalues.len());
    let edmd = fit_edmd_indicator(&acc.weights).unwrap();
    let re = dense_eig(&edmd).unwrap();
    let inside = re.eigenvalues.iter().filter(|l| l.norm() < 0.9).count();
    println!(
        "EDMD: {} of {} eigenvalues with |lambda| < 0.9 ({:.1}%)",
        inside,
        re.eigenvalues.len(),
        100.0 * inside as f64 / re.eigenvalues.len() as f64
    );
    println!("total {:?}", t0.elapsed());
}

fn lorenz() {
    let t0 = Instant::now();
    let mut cfg = preset_system("lorenz_desk").unwrap();
    if let Some(dt) = std::env::args().nth(2).and_then(|v| v.parse::<f64>().ok()) {
        cfg.dt_sample = dt;
        cfg.t_final = dt * 100_000.0;
        cfg.burn_in = 1000;
    }
    println!("dt = {}, t_final = {}", cfg.dt_sample, cfg.t_final);
    let s = simulate(&cfg).unwrap();
    println!("lorenz pairs: {} in {:?}", s.count(), t0.elapsed());
    let t1 = Instant::now();
    let dict = fit_kmeans(s.x(), 500, 0, 100, Some(10)).unwrap();
    println!("kmeans in {:?}", t1.elapsed());
    let t1 = Instant::now();
    let acc = accumulate(&s, &dict).unwrap();
    println!("accumulate in {:?}, removed {}", t1.elapsed(), acc.removed_cells.len());
    let k = fit_multdmd(&acc.weights, false).unwrap();
    let r = cycle_spectrum(&k).unwrap();
    let mut lengths: Vec<(usize, usize)> =
        r.cycles.iter().map(|c| (c.length, c.basin_size)).collect();
    lengths.sort_unstable();
    lengths.reverse();
    println!("cycles (length, basin): {:?}", lengths);
    let total_on_cycles: usize = r.cycles.iter().map(|c| c.length).sum();
    let lmax = r.cycles.iter().map(|c| c.length).max().unwrap_or(0);
    println!(
        "dominant cycle L = {lmax}, share of cycle cells {:.2}, base angle {:.4}",
        lmax as f64 / total_on_cycles as f64,
        std::f64::consts::TAU / lmax as f64
    );
    let retained = r.retained(50);
    let orders: std::collections::BTreeSet<u64> =
        retained.phases.as_ref().unwrap().iter().map(|p| p.order).collect();
    println!(
        "retained: {} eigenvalues, cycle orders {:?}",
        retained.eigenvalues.len(),
        orders
    );
    println!("total {:?}", t0.elapsed());
}

fn torus() {
    let cfg = preset_system("torus_desk").unwrap();
    let clean = simulate(&cfg).unwrap();
    let s = add_noise(&clean, 0.4, 7).unwrap();
    for n in [64usize, 100, 128, 200] {
        let dict = fit_kmeans(s.x(), n, 0, 100, None).unwrap();
        let acc = accumulate(&s, &dict).unwrap();
        let k = fit_multdmd(&acc.weights, false).unwrap();
        let r = cycle_spectrum(&k).unwrap();
        let retained = r.retained(50);
        println!(
            "N={n}: cells {}, cycles {:?}, retained {}",
            acc.dictionary.len(),
            r.cycles.iter().map(|c| (c.length, c.basin_size)).collect::<Vec<_>>(),
            retained.eigenvalues.len()
        );
    }
    let dmd = fit_exact_dmd(&s).unwrap();
    let rd = dense_eig(&dmd).unwrap();
    let mean_mod: f64 =
        rd.eigenvalues.iter().map(|l| l.norm()).sum::<f64>() / rd.eigenvalues.len() as f64;
    println!("exact DMD eigenvalue moduli mean: {mean_mod:.4}");
    let clean_dmd = fit_exact_dmd(&clean).unwrap();
    let rc = dense_eig(&clean_dmd).unwrap();
    let clean_mean: f64 =
        rc.eigenvalues.iter().map(|l| l.norm()).sum::<f64>() / rc.eigenvalues.len() as f64;
    println!("clean exact DMD moduli mean: {clean_mean:.4}");
}

fn torus_moments() {
    let cfg = preset_system("torus_desk").unwrap();
    let s = simulate(&cfg).unwrap();
    for n in [64usize, 128, 200, 300] {
        let dict = fit_kmeans(s.x(), n, 0, 100, None).unwrap();
        let acc = accumulate(&s, &dict).unwrap();
        let k = fit_multdmd(&acc.weights, false).unwrap();
        let r = cycle_spectrum(&k).unwrap();
        let g = Array1::from_vec(cell_mean_observable(&s, &acc.dictionary, 0).unwrap());
        let auto = autocorrelation(&s, &acc.dictionary, g.view(), 32).unwrap();
        let model = model_moments(&r, g.view(), &acc.weights, 32).unwrap();
        let max_diff = auto
            .iter()
            .zip(&model.moments)
            .map(|(a, m)| (a - m).norm())
            .fold(0.0, f64::max);
        println!(
            "N={n}: max moment diff {max_diff:.4}, cond {:.2e}, cycles {:?}",
            model.condition_number,
            r.cycles.iter().map(|c| c.length).collect::<Vec<_>>()
        );
    }
}
