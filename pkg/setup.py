"""Build the optional compiled kernels.

A failed compile is not fatal: ``clvm._backend`` falls back to the numpy
implementation at import time.
"""

from setuptools import setup
from setuptools.command.build_ext import build_ext

try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "clvm._kernels",
                ["src/clvm/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            print("clvm: compiled kernels unavailable (%s); using numpy fallback" % exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            print("clvm: failed to build %s (%s)" % (ext.name, exc))


setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
