"""Shared builders for the test modules."""
import numpy as np

from protofed import nn


def linear_model(w, b, cw, cb):
    """One linear extractor layer plus a linear classifier from explicit arrays."""
    return nn.ModelParams((nn.Dense(np.asarray(w, float), np.asarray(b, float)),),
                          nn.Dense(np.asarray(cw, float), np.asarray(cb, float)))


def unit(rng, dim):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def tiny_config(**overrides):
    """A few clients on small blobs; runs a round in well under a second."""
    from protofed.config import ExperimentConfig, apply_overrides

    base = {"n_clients": 6, "rounds": 3, "avg": 2, "std": 1, "hidden": 16, "proto_dim": 8,
            "dataset.n_classes": 4, "dataset.dim": 8, "dataset.samples_per_class": 40}
    return apply_overrides(ExperimentConfig(), {**base, **overrides})
