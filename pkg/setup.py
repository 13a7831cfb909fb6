import os

from setuptools import Extension, setup

# The compiled kernels are optional; the package falls back to pure Python.
ext_modules = []
if os.environ.get("EXCLAVEFL_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
        import numpy as np
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "exclavefl._kernels",
                    ["src/exclavefl/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no FMA contraction: results must match the Python fallback bit for bit
                    extra_compile_args=["-O2", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
