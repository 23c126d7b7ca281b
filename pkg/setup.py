"""Builds the optional compiled kernel core.

The package works without it: ``stablab.kernels`` falls back to numpy when the
extension is missing. Set ``STABLAB_NO_EXT=1`` to skip the build entirely.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("STABLAB_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "stablab._ckernels",
                    ["src/stablab/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )

setup(ext_modules=ext_modules)
