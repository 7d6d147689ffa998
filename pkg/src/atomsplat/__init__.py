"""Atomic electron tomography by direct optimization of Gaussian atoms."""
import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
if os.environ.get("ATOMSPLAT_THREADS"):
    os.environ.setdefault("NUMBA_NUM_THREADS", os.environ["ATOMSPLAT_THREADS"])

__version__ = "0.1.0"


def num_threads() -> int:
    """Worker threads used by the parallel kernels."""
    import numba

    return int(numba.config.NUMBA_NUM_THREADS)
