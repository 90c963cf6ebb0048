pub use crate::linmaps::EigenRecord;

use crate::error::Result;
use crate::ssm::BlockSsm;

/// Eigenvalues of every square linear map in the state-transition component
/// (`f_x` for structured models, `f_xu` otherwise). Rectangular maps have no
/// spectrum and are skipped.
pub fn export_eigenvalues(model: &BlockSsm) -> Result<Vec<EigenRecord>> {
    let mut out = Vec::new();
    for map in model.state_transition_maps() {
        if map.in_dim() != map.out_dim() {
            continue;
        }
        for ev in map.eigenvalues(model.params())? {
            out.push(EigenRecord { map_name: map.name().to_string(), re: ev.re, im: ev.im });
        }
    }
    Ok(out)
}
