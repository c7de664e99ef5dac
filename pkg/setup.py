import platform

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

def _has_avx2():
    if platform.machine() not in ("x86_64", "AMD64"):
        return False
    try:
        with open("/proc/cpuinfo") as fh:
            return " avx2" in fh.read()
    except OSError:
        return False


compile_args = ["-O3", "-ffp-contract=off"]
if _has_avx2():
    compile_args.append("-mavx2")

# -ffp-contract=off keeps multiply-add unfused so results match the numpy fallback bit for bit.
extensions = [
    Extension(
        "mad_dg.tensor._ckernels",
        ["src/mad_dg/tensor/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=compile_args,
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
