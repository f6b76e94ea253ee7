"""Smoke test for the hsrd_py extension.

Builds the extension with cargo when no build is found, loads it from the
target directory and exercises each binding once.

    python3 python/smoke_test.py
"""

import importlib.util
import json
import math
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent
LIB = "libhsrd_py.so" if sys.platform != "darwin" else "libhsrd_py.dylib"


def load_module():
    built = ROOT / "target" / "debug" / LIB
    if not built.exists():
        subprocess.run(
            ["cargo", "build", "-p", "hsrd-py", "--features", "extension-module"],
            cwd=ROOT,
            check=True,
        )
    tmp = pathlib.Path(tempfile.mkdtemp())
    target = tmp / "hsrd_py.so"
    shutil.copy(built, target)
    spec = importlib.util.spec_from_file_location("hsrd_py", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def close(a, b, tol=1e-5):
    return abs(a - b) <= tol


def main():
    h = load_module()
    bell = (ROOT / "data" / "bell.json").read_text()

    # Maximally entangled pair: H_min(C|B) = H_max(C|B) = -1.
    assert close(h.entropy_of(bell, "hmin", "C|B"), -1.0)
    assert close(h.entropy_of(bell, "hmax", "C|B"), -1.0)
    assert close(h.entropy_of(bell, "hmin", "C|"), 1.0)

    s = 1 / math.sqrt(2)
    phi = [s, 0, 0, s]
    rows = [[complex(a * b) for b in phi] for a in phi]
    assert close(h.hmin_matrix(rows, 2, 2), -1.0)

    inner = json.loads(h.region_report(bell, "asymptotic"))["inner"]
    assert inner["inequalities"], "asymptotic region has rows"
    # The inner region asks for e0 >= I(C:B)/2 = 1 catalytic ebit.
    checks = h.check_tuple(bell, "asymptotic-inner", "0,1,0,1")
    assert all(ok for _, ok, _ in checks), checks

    run = json.loads(h.protocol_run(bell, "0,1,0,0"))
    assert close(run["achieved_error"], 0.0), run

    code, out, _ = h.cli(["entropy", "--state", str(ROOT / "data" / "bell.json"), "--quantity", "hmin", "--systems", "C|B"])
    assert code == 0 and "-1.000000" in out, (code, out)
    code, _, _ = h.cli(["entropy", "--bogus"])
    assert code == 2

    try:
        h.entropy_of(bell, "hmin", "C|B|A")
    except ValueError as e:
        assert str(e).startswith("[2]"), e
    else:
        raise AssertionError("malformed systems accepted")
    try:
        h.protocol_run(bell, "0.5,1,0,0")
    except RuntimeError as e:
        assert str(e).startswith("[4]"), e
    else:
        raise AssertionError("fractional tuple accepted")

    print("smoke test passed (hsrd_py %s)" % h.__version__)


if __name__ == "__main__":
    main()
