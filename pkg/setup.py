# Builds the optional compiled 3x3 correlation core. The package falls back
# to the vectorized numpy kernels when the extension is absent, so a failed
# build only costs speed, never functionality.
import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "proxnn._kernels._corr3x3",
                sources=["src/proxnn/_kernels/_corr3x3.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                # no -ffast-math: outputs must be run-to-run deterministic
                # (fixed IEEE evaluation order); fallback parity is tested
                # to round-off, not bitwise
                extra_compile_args=["-O3", "-funroll-loops"],
                optional=True,
            )
        ],
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "language_level": 3,
        },
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
