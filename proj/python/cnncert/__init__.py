"""Certified robustness radii for convolutional networks."""

from ._core import (
    CertError,
    Network,
    certify,
    certify_margin,
    dense_output_bounds,
    forward,
    load_inputs,
    load_model,
    load_model_string,
    maxpool_planes,
    output_bounds,
    predict,
    relax,
    sample_attack,
)

__all__ = [
    "CertError",
    "Network",
    "certify",
    "certify_margin",
    "dense_output_bounds",
    "forward",
    "load_inputs",
    "load_model",
    "load_model_string",
    "maxpool_planes",
    "output_bounds",
    "predict",
    "relax",
    "sample_attack",
]
