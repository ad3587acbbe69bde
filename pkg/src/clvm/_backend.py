"""Select the compiled Jacobi kernel when it imports, the numpy one otherwise.

Set ``CLVM_PURE_PYTHON=1`` to force the fallback.
"""

import os

from clvm import _jacobi_py

BACKEND = "python"
jacobi_eigh = _jacobi_py.jacobi_eigh

if os.environ.get("CLVM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from clvm import _kernels
    except ImportError:
        pass
    else:
        jacobi_eigh = _kernels.jacobi_eigh
        BACKEND = "cython"
