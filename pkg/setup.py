from setuptools import setup, Extension
from Cython.Build import cythonize
import numpy as np


ext_module = Extension(
    "crowdscale._core",
    ["src/crowdscale/_core.pyx"],
    include_dirs=[np.get_include()],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    # keep rounding identical to the numpy fallback: no fused multiply-add
    extra_compile_args=["-ffp-contract=off"],
)

setup(
    ext_modules=cythonize([ext_module], language_level=3),
)
