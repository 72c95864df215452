"""Neuron misalignment and re-alignment for white-box membership inference."""

from ._shadowalign import *  # noqa: F401,F403
from ._shadowalign import __doc__  # noqa: F401
