"""Sparse raster-scan optoacoustic image reconstruction."""
