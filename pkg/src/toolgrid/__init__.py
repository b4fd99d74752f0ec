"""Distributed tool-chain orchestration: publish executables as typed
workflow components, run dataflow workflows across nodes, keep every
execution on record, and share tools across organizations through a
restricted relay."""

__version__ = "0.1.0"

from .errors import ToolgridError

__all__ = ["ToolgridError", "__version__"]
