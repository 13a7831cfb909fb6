"""Pick the compiled kernels when available, else the pure-Python ones.

Set ``EXCLAVEFL_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

if os.environ.get("EXCLAVEFL_PURE_PYTHON") == "1":
    kernels = _pykernels
else:
    try:
        from . import _kernels as kernels
    except ImportError:
        kernels = _pykernels

BACKEND = kernels.BACKEND
