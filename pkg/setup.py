import os

from setuptools import Extension, setup

ext_modules = []
pyx = os.path.join("src", "jumpopt", "_core.pyx")
if os.path.exists(pyx):
    try:
        import numpy as np
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "jumpopt._core",
                    [pyx],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )
    except ImportError:
        # No Cython / numpy at build time: install the pure-Python package only.
        ext_modules = []

setup(ext_modules=ext_modules)
