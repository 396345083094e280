"""Input validation helpers shared by the estimator and the CLI."""

import numpy as np

from .audio import CorpusManifest, Waveform
from .errors import DataError


def as_waveform(x, sample_rate=None, name="waveform"):
    """Coerce a ``Waveform`` or 1-D array-like into a validated ``Waveform``.

    Checks: one dimension, non-empty, finite samples, and (when given) the
    expected sample rate.  Arrays get ``sample_rate`` attached, defaulting
    to 16 kHz.
    """
    if isinstance(x, Waveform):
        wave = x
    else:
        arr = np.asarray(x, dtype=np.float64)
        wave = Waveform(arr, sample_rate if sample_rate is not None else 16000)
    if len(wave) == 0:
        raise DataError(f"{name} is empty")
    if not np.all(np.isfinite(wave.samples)):
        raise DataError(f"{name} contains non-finite samples")
    if sample_rate is not None and wave.sample_rate != sample_rate:
        raise DataError(f"{name} has sample rate {wave.sample_rate}, expected {sample_rate}")
    return wave


def as_manifest(source):
    """Accept a ``CorpusManifest`` or a path to a manifest file."""
    if isinstance(source, CorpusManifest):
        return source
    return CorpusManifest.load(source)


def as_episode_pair(item, sample_rate=None):
    """Normalize one (mixture, reference) item into two Waveforms."""
    if not isinstance(item, (tuple, list)) or len(item) != 2:
        raise DataError("expected a (mixture, reference) pair")
    mixture = as_waveform(item[0], sample_rate, name="mixture")
    reference = as_waveform(item[1], sample_rate, name="reference")
    if mixture.sample_rate != reference.sample_rate:
        raise DataError(
            f"mixture rate {mixture.sample_rate} != reference rate {reference.sample_rate}")
    return mixture, reference
