pub use rbpdip_core;
