"""Build the optional compiled rasterizer core.

Usage:
    pip install -e . --no-build-isolation
    python setup.py build_ext --inplace

If the extension fails to compile the package still installs and uses the
numpy kernels; set DYNSPLAT_NO_OPENMP=1 to build without OpenMP.
"""

import os

import numpy as np
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:
            print(f"warning: compiled core not built ({exc}); using numpy kernels")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: failed to build {ext.name} ({exc}); using numpy kernels")


openmp = [] if os.environ.get("DYNSPLAT_NO_OPENMP") else ["-fopenmp"]
extensions = [
    Extension(
        "dynsplat.raster._kernels",
        sources=["src/dynsplat/raster/_kernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"] + openmp,
        extra_link_args=openmp,
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"})
    if cythonize else [],
    cmdclass={"build_ext": OptionalBuildExt},
)
