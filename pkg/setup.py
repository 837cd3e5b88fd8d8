import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("TENANTKV_SKIP_EXT") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "tenantkv._kernels._ckernels",
                    ["src/tenantkv/_kernels/_ckernels.pyx"],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # No Cython available: the package still works through the
        # pure-Python kernels selected at import time.
        ext_modules = []

setup(ext_modules=ext_modules)
