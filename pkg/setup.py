"""Build the optional compiled LSTM kernel.

The extension is an accelerator only: if compilation is impossible the
package still installs and falls back to the NumPy kernels at import time.

    pip install -e . --no-build-isolation
    python setup.py build_ext --inplace
"""

import os

from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "battsoh._kernels._lstm_cy",
                sources=["src/battsoh/_kernels/_lstm_cy.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "language_level": "3",
        },
    )
except ImportError:
    extensions = []

if os.environ.get("BATTSOH_NO_EXT"):
    extensions = []

setup(ext_modules=extensions)
