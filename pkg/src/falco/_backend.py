"""Select the compiled REML kernels when available, else the numpy fallback.

Set ``FALCO_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

python_kernels = _kernels_py

try:
    if os.environ.get("FALCO_PURE_PYTHON", "").strip() not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from . import _kernels as compiled_kernels
except ImportError:
    compiled_kernels = None

kernels = compiled_kernels if compiled_kernels is not None else python_kernels
BACKEND = "cython" if compiled_kernels is not None else "python"
