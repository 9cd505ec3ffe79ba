"""Smoke test for the langevin_gf extension module.

Uses an installed ``langevin_gf`` if present, otherwise loads the library
built by ``cargo build -p langevin-gf-py --release --features extension-module``.
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[1]


def load():
    try:
        import langevin_gf

        return langevin_gf
    except ImportError:
        pass
    for profile in ("release", "debug"):
        for name in ("liblangevin_gf_py.so", "liblangevin_gf_py.dylib", "langevin_gf_py.dll"):
            path = ROOT / "target" / profile / name
            if path.exists():
                loader = importlib.machinery.ExtensionFileLoader("langevin_gf", str(path))
                spec = importlib.util.spec_from_file_location("langevin_gf", path, loader=loader)
                module = importlib.util.module_from_spec(spec)
                loader.exec_module(module)
                return module
    sys.exit("langevin_gf extension not found; build it first")


def main():
    lg = load()
    print("langevin_gf", lg.__version__)

    lin = lg.Model.linear(1.0, 2.0, 0.5)
    dw = lg.Model.double_well(4.0, 2.0)
    assert (lin.dim, lin.noise_dim) == (1, 1)

    p, q = lg.gf2_step(lin, [3.0], [1.0], 0.125, [0.1])
    p2, q2, t1 = lg.gf2_step_augmented(lin, [3.0], [1.0], 0.5, 0.125, [0.1])
    assert abs(p[0] - p2[0]) < 1e-12 and abs(q[0] - q2[0]) < 1e-12 and t1 == 0.625

    # One-step Jacobians are conformally symplectic with factor exp(-vh).
    h = 0.1
    jac = lg.gf2_jacobian(dw, [0.3], [-1.2], h, [0.05])
    assert lg.conformal_defect(jac, dw.friction, h) < 1e-12
    det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0]
    assert abs(det - math.exp(-dw.friction * h)) < 1e-12
    fd = lg.gf2_jacobian(dw, [0.3], [-1.2], h, [0.05], eps=1e-6)
    assert max(abs(a - b) for ra, rb in zip(jac, fd) for a, b in zip(ra, rb)) < 1e-6

    times, ps, qs = lg.simulate(dw, [0.0], [1.0], 0.01, 100, seed=3)
    assert len(times) == len(ps) == len(qs) == 101
    again = lg.simulate(dw, [0.0], [1.0], 0.01, 100, seed=3)
    assert again[1] == ps

    # Second-order decay of the deterministic weak error.
    errs = [(h, lg.weak_error_linear(lin, "cos_sum", [3.0], [1.0], h, 1.0)) for h in (0.125, 0.0625, 0.03125)]
    slope, _ = lg.fit_order(errs)
    assert 1.8 < slope < 2.2, slope

    # Stationary variance sigma²/(2v) gives E cos(p + q) = exp(-2 · 0.0625 / 2).
    ref = lg.ergodic_reference(lin, "cos_sum")
    assert abs(ref - math.exp(-0.0625)) < 1e-8, ref

    mean, se = lg.mc_expectation(lin, "exp_negsq", [0.0], [0.0], 0.0625, 5.0, 4000, seed=1)
    assert abs(mean - 1.0 / 1.0625) < 5 * se + 1e-3, (mean, se)

    try:
        lg.gf2_step(lin, [float("nan")], [0.0], 0.1, [0.0])
    except ValueError:
        pass
    else:
        raise AssertionError("non-finite state accepted")

    quad = lg.Model.quadratic([[2.0, 0.3], [0.3, 1.0]], [[1.0, 0.0], [0.0, 1.0]], 1.5, [[0.4, 0.0], [0.1, 0.3]])
    jac = lg.gf2_jacobian(quad, [0.1, -0.2], [0.5, 0.4], 0.05, [0.01, -0.02])
    assert lg.conformal_defect(jac, 1.5, 0.05) < 1e-12

    with tempfile.TemporaryDirectory() as out:
        paths = lg.run_experiment("structure", str(ROOT / "crates/core/presets/structure.toml"), out=out)
        text = pathlib.Path(paths[0]).read_text().splitlines()
        assert text[0].startswith("# langevin-gf") and len(text) > 2

    print("smoke test passed")


if __name__ == "__main__":
    main()
