// `!(x > 0.0)` is how argument checks reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the matrix formulas they implement.
#![allow(clippy::needless_range_loop)]

pub mod io;
pub mod linclass;
pub mod poly;
pub mod rng;
pub mod sde;
pub mod sdp;
pub mod simulate;
pub mod sos;
pub mod verify;
