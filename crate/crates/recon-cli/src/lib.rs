//! Placeholder; filled in once the core pipeline lands.
