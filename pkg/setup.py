"""Build script. The compiled core is optional: if Cython or a C compiler is
unavailable the package installs pure-Python and selects the numpy backend at
import time."""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "rydsim._core",
                ["src/rydsim/_core.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3", "-march=native"],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    sys.stderr.write(f"rydsim: building without compiled core ({exc})\n")

setup(ext_modules=ext_modules)
