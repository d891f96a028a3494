//! Simulation study harness (placeholder during bring-up).
