"""Build script for the compiled geometry kernels.

The extension is optional: if Cython (or a C compiler) is unavailable the
package still installs and falls back to the pure-numpy kernels at import
time (see pointformer.kernels).
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "pointformer._geomcore",
                ["src/pointformer/_geomcore.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level="3",
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
