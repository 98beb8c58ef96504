import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffp-contract=off: no FMA contraction, so the compiled kernels produce
# bit-identical results to the pure-Python fallback. No -ffast-math for the
# same reason (reassociation would break the fixed summation order).
extensions = [
    Extension(
        "apm._fastcore",
        ["src/apm/_fastcore.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
