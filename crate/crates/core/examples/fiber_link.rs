//! Fiber transmission and delay, and what a residual polarization rotation
//! does to the heralded state.

use ionlink::photon::{apply_fiber, fiber_latency, fiber_survival, FiberModel, JonesMatrix, DEFAULT_GROUP_INDEX};
use ionlink::qdm::fidelity;
use ionlink::source::{ideal_state, target_state};

fn main() -> ionlink::Result<()> {
    for km in [0.0, 1.0, 2.8, 10.0] {
        println!(
            "{km:>5} km: survival {:.4}, delay {:.3} µs",
            fiber_survival(km, 1.31, 1.0),
            fiber_latency(km, DEFAULT_GROUP_INDEX)
        );
    }
    for angle in [0.0, 0.1, 0.2575, 0.5] {
        let fiber = FiberModel {
            length_km: 2.8,
            attenuation_db_per_km: 1.31,
            static_rotation: JonesMatrix::rotation([0.0, 1.0, 0.0], angle)?,
            ..FiberModel::default()
        };
        let (out, survival) = apply_fiber(&ideal_state(), &fiber, 0.0)?;
        println!(
            "rotation {angle:.4} rad: fidelity {:.5} (survival {survival:.3})",
            fidelity(&out.rho, &target_state())?
        );
    }
    Ok(())
}
