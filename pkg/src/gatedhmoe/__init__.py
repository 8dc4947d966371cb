"""Hierarchical mixture-of-experts view of (gated) multi-head attention."""
