"""Thermal-only crowd counting with depth-conditioned consistency features."""
