"""Build script: compiles the optional Cython kernel for the FEM convolution.

The package is fully functional without the extension (a NumPy fallback is
selected at import time), so a failed compile degrades to a warning unless
FEMDIFF_REQUIRE_EXT is set.
"""

import os
import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext

REQUIRE_EXT = os.environ.get("FEMDIFF_REQUIRE_EXT", "") not in ("", "0")


def _extensions():
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError as exc:
        if REQUIRE_EXT:
            raise
        print(f"femdiff: skipping compiled kernels ({exc})", file=sys.stderr)
        return []
    ext = Extension(
        "femdiff._accel._femconv_cy",
        ["src/femdiff/_accel/_femconv_cy.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize(
        [ext],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "initializedcheck": False,
            "cdivision": True,
        },
    )


class optional_build_ext(build_ext):
    """Degrade to the pure-Python fallback if the compiler is unusable."""

    def run(self):
        try:
            super().run()
        except Exception as exc:
            if REQUIRE_EXT:
                raise
            print(f"femdiff: compiled kernels unavailable ({exc})", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            if REQUIRE_EXT:
                raise
            print(f"femdiff: failed to build {ext.name} ({exc})", file=sys.stderr)


setup(ext_modules=_extensions(), cmdclass={"build_ext": optional_build_ext})
