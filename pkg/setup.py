"""Build hooks for the optional compiled ranking kernel.

The package is pure Python except for ``fticir._ranktopk``, a small Cython
extension for the retrieval top-k selection. The build is best-effort: if
Cython or a C compiler is unavailable the install proceeds and the package
falls back to the numpy implementation at import time.
"""

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """build_ext that downgrades compilation failures to a warning."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # pragma: no cover - depends on toolchain
            print(f"warning: skipping compiled ranking kernel ({exc})")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # pragma: no cover - depends on toolchain
            print(f"warning: skipping {ext.name} ({exc})")


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:  # pragma: no cover - build env without Cython
        return []
    ext = Extension(
        "fticir._ranktopk",
        sources=["src/fticir/_ranktopk.pyx"],
    )
    return cythonize([ext], language_level="3")


setup(
    ext_modules=extensions(),
    cmdclass={"build_ext": OptionalBuildExt},
)
