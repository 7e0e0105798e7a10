"""Compare the compiled and pure-Python convolution backends on the default model.

    python benchmarks/compare_backends.py [--repeats 3] [--batch-sizes 1,8,64]
"""

import argparse
import sys

from ikmr import _kernels
from ikmr.bench import rows_to_csv, run_bench
from ikmr.nets import RetargetModel
from ikmr.resources import builtin_skeleton


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--batch-sizes", default="1,8,64")
    p.add_argument("--workers", type=int, default=8)
    a = p.parse_args(argv)
    if "compiled" not in _kernels.BACKENDS:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1
    sizes = [int(s) for s in a.batch_sizes.split(",")]
    model = RetargetModel(builtin_skeleton("toy-human"), builtin_skeleton("toy-robot"), seed=0)
    rows = run_bench(model, sizes, a.repeats, a.workers, ("python", "compiled"))
    sys.stdout.write(rows_to_csv(rows))
    fps = {(r.backend, r.batch_size): r.fps for r in rows}
    for bs in sizes:
        print(f"batch {bs}: compiled / python = {fps['compiled', bs] / fps['python', bs]:.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
