import numpy as np


def central_diff(f, x, eps=1e-5):
    """Central-difference gradient of the scalar ``f`` at ``x`` (perturbed in place)."""
    x = np.asarray(x)
    flat = x.reshape(-1)
    g = np.empty(flat.size)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + eps
        fp = f()
        flat[k] = old - eps
        fm = f()
        flat[k] = old
        g[k] = (fp - fm) / (2 * eps)
    return g.reshape(x.shape)


def rel_err(a, b):
    """Norm-wise relative distance ``|a - b| / max(|a|, |b|)``."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / scale) if scale > 0 else 0.0


def random_normalizer(n_u, n_z, n_y, rng):
    from deeponet_mpc.datagen import Normalizer
    return Normalizer(rng.standard_normal(n_u), rng.uniform(0.5, 2, n_u),
                      rng.standard_normal(n_z), rng.uniform(0.5, 2, n_z),
                      rng.standard_normal(n_y), rng.uniform(0.5, 2, n_y))


def randomize_biases(nets, rng, scale=0.3):
    """Glorot init leaves biases at zero, which would hide bias terms from identity checks."""
    for net in nets:
        for b in net.biases:
            b[:] = scale * rng.standard_normal(b.shape)


def difference_operator(N, n_u, u_prev):
    """``D``, ``d0`` with ``D @ ubar - d0`` = successive input differences (first against u_prev)."""
    n = N * n_u
    D = np.eye(n) - np.eye(n, k=-n_u)
    d0 = np.zeros(n)
    d0[:n_u] = u_prev
    return D, d0


def enumerated_box_qp(H, f, lo, hi):
    """Minimize ``0.5 u'Hu + f'u`` on a box by visiting every free/lower/upper pattern."""
    import itertools
    n = len(f)
    best, best_u = np.inf, None
    for pattern in itertools.product((0, 1, 2), repeat=n):
        u = np.where(np.array(pattern) == 1, lo, hi).astype(float)
        free = np.array(pattern) == 0
        if free.any():
            fixed = ~free
            rhs = -f[free] - H[np.ix_(free, fixed)] @ u[fixed]
            u[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
            if np.any(u < lo - 1e-12) or np.any(u > hi + 1e-12):
                continue
        val = 0.5 * u @ H @ u + f @ u
        if val < best:
            best, best_u = val, u
    return best_u


def affine_mpc_qp(A, C, d, x, r, u_prev, Omega, Psi, N, n_u):
    """Quadratic form ``(H, f)`` of the tracking cost for the affine predictor ``y = A u + C x + d``."""
    D, d0 = difference_operator(N, n_u, u_prev)
    c = C @ x + d - r
    H = 2.0 * (A.T @ Omega @ A + D.T @ Psi @ D)
    f = 2.0 * (A.T @ Omega @ c - D.T @ Psi @ d0)
    return H, f


# ---------------------------------------------------------------------------
# acceptance bookkeeping: one PASS/FAIL line per criterion in the terminal summary

import pytest  # noqa: E402


def pytest_configure(config):
    config._acceptance_lines = {}
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number")


@pytest.fixture
def verdict(request):
    """``verdict(ok, detail)`` records the outcome of the calling acceptance test."""
    marker = request.node.get_closest_marker("acceptance")
    number = marker.args[0] if marker else request.node.name

    def record(ok, detail=""):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config._acceptance_lines[number] = line
        print(line, flush=True)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines, key=lambda k: (not isinstance(k, int), k)):
            terminalreporter.write_line(lines[key])
