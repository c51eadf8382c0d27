"""Builds the optional Cython kernels; the package works without them."""
import os

import numpy as np
from setuptools import setup

ext_modules = []
if os.environ.get("COSTROUTE_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "costroute._ckernels",
                    ["src/costroute/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
