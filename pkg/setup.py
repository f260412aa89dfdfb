"""Build script for the optional compiled kernels.

The package works without them: ``emtts.kernels`` falls back to the numpy
implementation when the extension is missing.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("EMTTS_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "emtts.kernels._ckernels",
                    ["src/emtts/kernels/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
