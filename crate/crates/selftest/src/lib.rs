//! Empty on purpose: this package only carries `tests/acceptance.rs`. Cargo
//! runs packages in name order and stops at the first failing test binary,
//! so the acceptance suite lives here, after `quartet` and `quartet-core`.
