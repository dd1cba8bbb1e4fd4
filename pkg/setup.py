"""Build hook for the optional compiled kernels.

A failed compile is not fatal: the package falls back to the numpy kernels.
"""

import os

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            self.warn(f"compiled kernels not built ({exc}); using numpy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            self.warn(f"compiled kernels not built ({exc}); using numpy fallback")


def _extensions():
    if os.environ.get("FUSIONFILTER_NO_EXT"):
        return []
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "fusionfilter._kernels",
        ["src/fusionfilter/_kernels.pyx"],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], quiet=True)


setup(ext_modules=_extensions(), cmdclass={"build_ext": OptionalBuildExt})
