//! Target state, simple noise channels and the purity bound on fidelity.

use ionlink::qdm::{dephase_subsystem, fidelity, max_fidelity_bound, purity, DensityMatrix, Subsystem};
use ionlink::photon::depolarize_photon;
use ionlink::source::target_state;

fn main() -> ionlink::Result<()> {
    let psi = target_state();
    let ideal = DensityMatrix::from_pure(&psi);
    println!("{:>28} {:>9} {:>9} {:>9}", "state", "fidelity", "purity", "bound");
    let show = |label: &str, rho: &DensityMatrix| -> ionlink::Result<()> {
        let p = purity(rho);
        println!("{label:>28} {:>9.5} {:>9.5} {:>9.5}", fidelity(rho, &psi)?, p, max_fidelity_bound(p)?);
        Ok(())
    };
    show("ideal", &ideal)?;
    show("ion dephasing γ = 0.9", &dephase_subsystem(&ideal, Subsystem::Ion, 0.9)?)?;
    show("photon depolarization 0.05", &depolarize_photon(&ideal, 0.05)?)?;
    for p in [0.908, 0.899] {
        println!("bound at purity {p}: {:.4}", max_fidelity_bound(p)?);
    }
    Ok(())
}
