"""Build script for the optional compiled kernel core.

The package is fully functional without the extension (a numpy fallback is
selected at import time); the Cython module only makes the hot kernels
faster.  Build in place with:

    python setup.py build_ext --inplace
"""

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = [
    Extension(
        "ripu._kernels._core",
        sources=["src/ripu/_kernels/_core.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        optional=True,
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"})
    if cythonize
    else [],
)
