"""Build script: compiles the optional kernel extension.

The package works without the extension (a NumPy fallback is selected at
import time), so a failed compile only costs speed. Build with the ambient
environment: pip install -e . --no-build-isolation
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "xmodal.kernels._ckernels",
                ["src/xmodal/kernels/_ckernels.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        language_level="3",
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "initializedcheck": False,
            "cdivision": True,
        },
    )
else:
    ext_modules = []

setup(ext_modules=ext_modules)
