"""Build script: optionally compiles the simulation core as a C extension.

The core lives in src/specsim/_engine.py (plain Python). When Cython and a C
compiler are available, the same source is compiled as specsim._engine_c and
selected at import time; otherwise the interpreted module is used. Install
with `pip install -e . --no-build-isolation`, or skip compilation entirely
with SPECSIM_NO_EXT=1.
"""

import os
import shutil

from setuptools import setup

ext_modules = []
if not os.environ.get("SPECSIM_NO_EXT"):
    try:
        from Cython.Build import cythonize

        src = os.path.join("src", "specsim", "_engine.py")
        twin = os.path.join("src", "specsim", "_engine_c.py")
        # The compiled twin must stay byte-identical to the fallback source.
        shutil.copyfile(src, twin)
        ext_modules = cythonize(
            [twin],
            compiler_directives={"language_level": "3"},
            quiet=True,
        )
    except Exception as exc:  # pragma: no cover - build environment dependent
        print(f"specsim: building without compiled core ({exc})")
        ext_modules = []

setup(ext_modules=ext_modules)
