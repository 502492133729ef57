from setuptools import Extension, setup

import numpy as np

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "mdmf.alignment._softdp",
                ["src/mdmf/alignment/_softdp.pyx"],
                include_dirs=[np.get_include()],
                optional=True,
            )
        ]
    )
except ImportError:
    # No Cython: the package runs on the numpy reference backend.
    ext_modules = []

setup(ext_modules=ext_modules)
