"""Rendering services: scene, guiding, photon tracing and outputs."""
