import os

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python fallback still installs
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("GSCODEC_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "gscodec.coder._rc_ext",
                ["src/gscodec/coder/_rc_ext.pyx"],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
