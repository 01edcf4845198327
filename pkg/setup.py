import os

from setuptools import Extension, setup

# The compiled kernel core is optional: the package falls back to the numpy
# kernels when the extension is absent. CONVQA_SKIP_EXT=1 forces a pure-Python
# install on machines without a C toolchain.
ext_modules = []
if not os.environ.get("CONVQA_SKIP_EXT"):
    import numpy as np
    from Cython.Build import cythonize

    ext = Extension(
        "convqa.kernels._core",
        sources=["src/convqa/kernels/_core.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    ext_modules = cythonize([ext], language_level=3)

setup(ext_modules=ext_modules)
