"""Hybrid classical-quantum threat detection pipelines.

Compact MLP encoder -> angle encoding -> ZZ-feature-map fidelity kernel ->
precomputed-kernel SVM, plus a data-re-uploading variational classifier,
backed by an exact statevector / density-matrix simulator for small qubit
registers.
"""

__version__ = "0.1.0"

RNG_KIND = "numpy-pcg64"  # recorded in every artifact manifest
