"""Build script for the optional compiled kernels.

The package works without them: ``anypoint.tensorcore`` falls back to a
vectorized torch implementation when ``anypoint._kernels`` cannot be imported.
Set ``ANYPOINT_NO_EXT=1`` to skip compilation entirely.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("ANYPOINT_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "anypoint._kernels",
                    ["src/anypoint/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
