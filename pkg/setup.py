"""Build script for the optional compiled quantization kernel.

The package is pure Python plus one Cython extension holding the hot
stochastic-rounding loop. If Cython or a C compiler is unavailable the
build falls through and the package runs on the numpy reference kernel
selected at import time by fedq._kernels.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "fedq._kernels._quantcore",
                ["src/fedq/_kernels/_quantcore.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
