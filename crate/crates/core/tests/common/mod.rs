#![allow(dead_code)]

use std::path::PathBuf;

use nkscopf::grid::{parse_case_file, Device, PowerSystem};

pub fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

pub fn case(name: &str) -> PowerSystem {
    parse_case_file(repo_path(&format!("cases/{name}.m"))).expect("shipped case parses")
}

pub fn fixture(name: &str) -> serde_json::Value {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn floats(v: &serde_json::Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

/// Outage device index of the branch joining external buses `a` and `b`.
pub fn branch_device(sys: &PowerSystem, a: usize, b: usize) -> usize {
    let ids: Vec<usize> = sys.buses().iter().map(|bus| bus.id).collect();
    sys.outage_devices()
        .iter()
        .position(|d| match *d {
            Device::Branch(k) => {
                let br = &sys.branches()[k];
                let (f, t) = (ids[br.from], ids[br.to]);
                (f, t) == (a, b) || (f, t) == (b, a)
            }
            Device::Generator(_) => false,
        })
        .expect("branch is outage eligible")
}

/// Exact projection by enumerating which coordinates sit at 0, at 1 or in
/// between, solving for the shift on the free ones.
pub fn brute_force_projection(y: &[f64], k: usize) -> Vec<f64> {
    let n = y.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for code in 0..3usize.pow(n as u32) {
        let mut state = vec![0u8; n];
        let mut c = code;
        for s in state.iter_mut() {
            *s = (c % 3) as u8;
            c /= 3;
        }
        let ones = state.iter().filter(|&&s| s == 1).count() as f64;
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        let mut taus = vec![0.0];
        if !free.is_empty() {
            let sum: f64 = free.iter().map(|&i| y[i]).sum();
            taus.push((sum + ones - k as f64) / free.len() as f64);
        }
        for tau in taus {
            let z: Vec<f64> = (0..n)
                .map(|i| match state[i] {
                    0 => 0.0,
                    1 => 1.0,
                    _ => y[i] - tau,
                })
                .collect();
            if tau < 0.0 || z.iter().any(|&v| !(-1e-12..=1.0 + 1e-12).contains(&v)) {
                continue;
            }
            if z.iter().sum::<f64>() > k as f64 + 1e-9 {
                continue;
            }
            let d: f64 = z.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
            if best.as_ref().map_or(true, |(bd, _)| d < *bd) {
                best = Some((d, z));
            }
        }
    }
    best.expect("zero vector is always feasible").1
}
