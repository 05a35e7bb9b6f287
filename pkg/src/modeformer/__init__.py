"""Spectral-token transformer surrogates for time-dependent PDEs.

Pipeline: real fields -> truncated Fourier mode tokens (codec) ->
decoder-only transformer with a block-causal temporal mask (model) ->
inverse transform back to fields. Classical spectral solvers (datagen)
provide ground truth; trainer/evaluate/aligner/cli wire it together.
"""

from . import fft as _fft  # registers the spectral autodiff ops  # noqa: F401

__version__ = "0.1.0"
