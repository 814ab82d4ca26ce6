"""Build script for the optional compiled LOF kernel.

The extension is marked optional: if Cython or a C compiler is missing the
install still succeeds and the package falls back to the pure numpy kernels
at import time (see pmuattest._kernels).
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "pmuattest._kernels._lofkern",
                sources=["src/pmuattest/_kernels/_lofkern.pyx"],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
