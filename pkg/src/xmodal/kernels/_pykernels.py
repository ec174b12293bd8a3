"""NumPy implementations of the dense kernels.

This is the fallback backend used when the compiled extension is not
available. Arguments are C-contiguous float64 2-d arrays; shape checking
happens one layer up.
"""

import numpy as np


def mm_nn(a, b):
    """a @ b"""
    return np.matmul(a, b)


def mm_nt(a, b):
    """a @ b.T"""
    return np.matmul(a, b.T)


def mm_tn(a, b):
    """a.T @ b"""
    return np.matmul(a.T, b)
