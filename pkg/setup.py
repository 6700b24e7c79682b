"""Build hook for the optional compiled flow kernels.

If Cython, numpy headers or a C compiler are missing, or the build fails,
the package installs without the extension and uses the numpy kernels.
"""

import os
import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            print(f"warning: compiled kernels not built ({exc}); using numpy fallback", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            print(f"warning: {ext.name} not built ({exc}); using numpy fallback", file=sys.stderr)


def extensions():
    if os.environ.get("DVALAB_NO_EXT"):
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        return []
    ext = Extension(
        "dvalab.kernels._cflow",
        ["src/dvalab/kernels/_cflow.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-march=native", "-ffast-math"],
        # -ffast-math lets gcc vectorise tanh through glibc's libmvec
        extra_link_args=["-lmvec", "-lm"],
    )
    try:
        return cythonize([ext], quiet=True)
    except Exception as exc:  # noqa: BLE001
        print(f"warning: cythonize failed ({exc}); using numpy fallback", file=sys.stderr)
        return []


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
