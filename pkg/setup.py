"""Build script: compiles the optional Cython kernel, falling back to pure Python.

Set COMPORTAL_NO_EXT=1 to skip the extension entirely.
"""
import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("COMPORTAL_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "comportal.kernels._ckernels",
                    ["src/comportal/kernels/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except Exception as exc:  # no Cython / no compiler: install without the kernel
        print(f"comportal: skipping compiled kernel ({exc}); pure-Python fallback will be used")
        ext_modules = []

setup(ext_modules=ext_modules)
