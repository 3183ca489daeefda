//! Compares vMF and uniform prototype assignment on prototypes of unequal
//! norm, and prints the log normalizer across concentrations.

use ndarray::{array, Array2};
use scene_ssl::semantic::vmf::log_vmf_normalizer;
use scene_ssl::semantic::{assign_semantic, AssignMode, PrototypeBank};

fn main() -> scene_ssl::Result<()> {
    for kappa in [0.01, 1.0, 10.0, 100.0, 1000.0] {
        let row: Vec<String> = [3, 16, 64, 256]
            .iter()
            .map(|&d| format!("D={d}: {:10.3}", log_vmf_normalizer(kappa, d).unwrap()))
            .collect();
        println!("kappa {kappa:7}: {}", row.join("  "));
    }

    // a wide prototype and a narrow one pointing in nearby directions
    let w: Array2<f64> = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.6, 0.8, 0.0]];
    let norms = [0.5, 1.0, 3.0];
    let mut scaled = w.clone();
    for (mut row, n) in scaled.rows_mut().into_iter().zip(norms) {
        row *= n;
    }
    let vmf = PrototypeBank::new(scaled, AssignMode::Vmf, 0.9)?;
    let uniform = PrototypeBank::new(w, AssignMode::Uniform, 0.9)?;

    let z = array![0.8, 0.6, 0.0];
    let tau = 0.1;
    let p_vmf = assign_semantic(z.view(), &vmf, tau)?;
    let p_uni = assign_semantic(z.view(), &uniform, tau)?;
    println!("prototype norms {norms:?}");
    println!("vmf     {:.4} entropy {:.4}", p_vmf.probs(), p_vmf.entropy());
    println!("uniform {:.4} entropy {:.4}", p_uni.probs(), p_uni.entropy());
    Ok(())
}
