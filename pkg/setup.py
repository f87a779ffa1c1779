"""Builds the optional compiled kernel; the package works without it."""
import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("ROMA_NO_EXT", "") in ("", "0"):
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [Extension("roma._core", ["src/roma/_core.pyx"],
                       include_dirs=[np.get_include()],
                       define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                       extra_compile_args=["-O3", "-march=native", "-fassociative-math", "-fno-signed-zeros", "-fno-trapping-math"])],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
