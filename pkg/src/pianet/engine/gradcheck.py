"""Finite-difference verification of analytic gradients."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradcheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)  # tensor name -> max relative error
    checked: dict = field(default_factory=dict)  # tensor name -> entries compared
    diagnostics: list = field(default_factory=list)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return not self.diagnostics and self.max_error < self.tolerance

    def summary(self):
        lines = [f"{name}: max rel err {err:.3e} over {self.checked[name]} entries"
                 for name, err in sorted(self.errors.items())]
        lines += [f"FAIL: {d}" for d in self.diagnostics]
        lines.append(f"overall max rel err {self.max_error:.3e} (tolerance {self.tolerance:g}) -> "
                     + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)


def relative_error(analytic, numeric, floor):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradcheck(fragment, x, tolerance=1e-4, step=1e-5, param_fraction=1.0, seed=0, train=True,
              check_input=True, floor=1e-7):
    """Compare ``fragment``'s backward pass against central differences.

    ``fragment`` exposes ``forward(x, train)``, ``backward(grad)`` and
    ``named_parameters()``/``named_grads()``. Non-scalar outputs are reduced
    to a scalar by a fixed random projection. ``param_fraction`` < 1 checks a
    random subsample of each parameter tensor (at least one entry).
    Entries flagged by ``fragment.nondifferentiable_input(x)`` are skipped.

    The relative error denominator is floored at ``floor * max(1, |loss|)``,
    raised where needed above the central-difference round-off
    ``10 * eps * |loss| / (step * tolerance)``, so entries whose true gradient
    is zero are compared absolutely instead of against noise.
    """
    rng = np.random.default_rng(seed)
    report = GradcheckReport(tolerance)
    x = np.array(x, dtype=np.float64)
    out = fragment.forward(x, train)
    scalar = np.ndim(out) == 0
    proj = 1.0 if scalar else rng.standard_normal(np.shape(out))

    def loss(inp):
        return float(np.sum(fragment.forward(inp, train) * proj))

    base = float(np.sum(out * proj))
    if not np.isfinite(base):
        report.diagnostics.append("forward produced non-finite values")
        return report
    dx = fragment.backward(np.asarray(proj, dtype=np.float64) if not scalar else 1.0)
    analytic = {k: v.copy() for k, v in fragment.named_grads().items()}
    params = fragment.named_parameters()
    scale = max(1.0, abs(base))
    floor_abs = scale * max(floor, 10.0 * np.finfo(np.float64).eps / (step * tolerance))

    def compare(name, target, grad, entries, restore_input=False):
        if grad is None:
            report.diagnostics.append(f"{name}: no analytic gradient")
            return
        if not np.all(np.isfinite(grad)):
            report.diagnostics.append(f"{name}: analytic gradient has non-finite values")
            return
        flat, gflat = target.reshape(-1), grad.reshape(-1)
        numeric = np.empty(len(entries))
        for j, i in enumerate(entries):
            orig = flat[i]
            flat[i] = orig + step
            up = loss(x)
            flat[i] = orig - step
            down = loss(x)
            flat[i] = orig
            numeric[j] = (up - down) / (2 * step)
        if not np.all(np.isfinite(numeric)):
            report.diagnostics.append(f"{name}: finite differences are non-finite")
            return
        err = relative_error(gflat[entries], numeric, floor_abs)
        report.errors[name] = float(err.max()) if err.size else 0.0
        report.checked[name] = len(entries)

    for name, p in params.items():
        n = p.size
        k = n if param_fraction >= 1.0 else max(1, int(round(n * param_fraction)))
        entries = np.arange(n) if k == n else np.sort(rng.choice(n, size=k, replace=False))
        compare(name, p, analytic.get(name), entries)

    if check_input and dx is not None:
        skip = getattr(fragment, "nondifferentiable_input", None)
        mask = np.ones(x.size, dtype=bool) if skip is None else ~skip(x).reshape(-1)
        compare("input", x, dx, np.nonzero(mask)[0])
    # leave the fragment's caches consistent with the unperturbed input
    fragment.forward(x, train)
    return report
