import os

import numpy
from setuptools import Extension, setup

PYX = "src/etform/engine/_speedup.pyx"

try:
    if not os.path.exists(PYX):
        raise ImportError(f"{PYX} not present")
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "etform.engine._speedup",
                [PYX],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    # No Cython: install the pure-python package; the engine falls back at import.
    extensions = []

setup(ext_modules=extensions)
