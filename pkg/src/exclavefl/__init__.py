"""Attested federated-learning runs and their audit.

Simulated integrity-only exclaves run each FL task and emit signed records
of what they consumed and produced; the auditor links the records into a
dataflow graph and checks claims about the trained model against it.
"""

__version__ = "0.1.0"

from ._backend import BACKEND  # noqa: E402

__all__ = ["BACKEND", "__version__"]
