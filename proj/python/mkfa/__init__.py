"""Python bindings for the mkfa deepfake detector."""

import json as _json

from ._mkfa import (
    Detector,
    amplitude_spectrum,
    auc,
    count_params,
    gradcheck,
    num_threads,
    preset_names,
    radial_profile,
    read_ppm,
    run_cli,
    set_num_threads,
    write_ppm,
)
from . import _mkfa


def generate_corpus(out_dir, n_real, n_fake, test_fraction=0.2, **spec):
    """Write a synthetic corpus; keyword arguments override generator settings."""
    return _mkfa.generate_corpus(str(out_dir), n_real, n_fake, test_fraction, _json.dumps(spec))


def generate_sample(index=0, kind=None, **spec):
    """One corpus image as an H x W x 3 uint8 array (kind=None for a real image)."""
    return _mkfa.generate_sample(_json.dumps(spec), kind or "", index)


def train(data_dir, out_dir, **config):
    """Train a detector; keyword arguments follow the checkpoint's training config keys."""
    return _mkfa.train(str(data_dir), str(out_dir), _json.dumps(config))


__all__ = [
    "Detector",
    "amplitude_spectrum",
    "auc",
    "count_params",
    "generate_corpus",
    "generate_sample",
    "gradcheck",
    "num_threads",
    "preset_names",
    "radial_profile",
    "read_ppm",
    "run_cli",
    "set_num_threads",
    "train",
    "write_ppm",
]
