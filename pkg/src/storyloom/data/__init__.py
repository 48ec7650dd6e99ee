"""Bundled sample premises, joint graphs, and the offline demo stub script."""
