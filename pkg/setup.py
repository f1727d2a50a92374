import os

import numpy
from setuptools import Extension, setup

# Set CDR_NO_EXT=1 to install without the compiled core; the numpy
# fallback is selected at import time.
ext_modules = []
if not os.environ.get("CDR_NO_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "cdr._core",
                ["src/cdr/_core.pyx"],
                include_dirs=[numpy.get_include()],
                # no FMA contraction: kernels must match the fallback bit for bit
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
