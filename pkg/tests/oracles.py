"""Slow, transparent reference implementations used to check the fast ones.

Everything here favors scalar loops and textbook formulations over speed so
that a disagreement with the library code points at the library.
"""

import math

import numpy as np

# --- spatio-temporal binary-pattern histograms ------------------------------

_D = math.sqrt(0.5)
# (dx, dy) around the circle, counter-clockwise from the +x axis
_OFFSETS = [
    (1.0, 0.0),
    (_D, _D),
    (0.0, 1.0),
    (-_D, _D),
    (-1.0, 0.0),
    (-_D, -_D),
    (0.0, -1.0),
    (_D, -_D),
]


def _neighbor_value(plane, r, c, dy, dx):
    """plane[r + dy][c + dx] by bilinear interpolation.

    Weights come from the offset's fractional parts; zero-weight corners are
    skipped and the rest are added in row-major corner order.
    """
    y0, x0 = math.floor(dy), math.floor(dx)
    fy, fx = dy - y0, dx - x0
    corners = (
        (r + y0, c + x0, (1.0 - fy) * (1.0 - fx)),
        (r + y0, c + x0 + 1, (1.0 - fy) * fx),
        (r + y0 + 1, c + x0, fy * (1.0 - fx)),
        (r + y0 + 1, c + x0 + 1, fy * fx),
    )
    value = None
    for rr, cc, w in corners:
        if w != 0.0:
            term = w * plane[rr][cc]
            value = term if value is None else value + term
    return value


def naive_plane_codes(plane):
    """Pattern codes of one 2-D plane (list of rows), interior points only."""
    a, b = len(plane), len(plane[0])
    codes = []
    for r in range(1, a - 1):
        row = []
        for c in range(1, b - 1):
            center = plane[r][c]
            code = 0
            for bit, (dx, dy) in enumerate(_OFFSETS):
                if _neighbor_value(plane, r, c, dy, dx) >= center:
                    code |= 1 << bit
            row.append(code)
        codes.append(row)
    return codes


def _transitions(code):
    bits = [(code >> i) & 1 for i in range(8)]
    return sum(bits[i] != bits[(i + 1) % 8] for i in range(8))


_UNIFORM_CODES = sorted(c for c in range(256) if _transitions(c) <= 2)


def naive_bin(code):
    """Histogram bin of a code: uniform codes in ascending order, rest last."""
    if _transitions(code) <= 2:
        return _UNIFORM_CODES.index(code)
    return 58


def naive_lbp_top(vol, xy_frames="all", grid=(1, 1)):
    """Triple-loop histogram of a (t, h, w) volume.

    Returns the concatenation, per spatial block in row-major order, of the
    59-bin XY, XT and YT histograms, each normalized to sum 1.
    """
    vol = np.asarray(vol, dtype=np.float64).tolist()
    t, h, w = len(vol), len(vol[0]), len(vol[0][0])
    gy, gx = grid
    counts = [[[0] * 59 for _ in range(3)] for _ in range(gy * gx)]

    def block(y, x):
        return (y * gy) // h * gx + (x * gx) // w

    frames = range(t) if xy_frames == "all" else [t // 2]
    for tt in frames:
        for yi, row in enumerate(naive_plane_codes(vol[tt])):
            for xi, code in enumerate(row):
                counts[block(yi + 1, xi + 1)][0][naive_bin(code)] += 1

    for y in range(h):  # one time-by-x plane per image row
        plane = [[vol[tt][y][x] for x in range(w)] for tt in range(t)]
        for row in naive_plane_codes(plane):
            for xi, code in enumerate(row):
                counts[block(y, xi + 1)][1][naive_bin(code)] += 1

    for x in range(w):  # one time-by-y plane per image column
        plane = [[vol[tt][y][x] for y in range(h)] for tt in range(t)]
        for row in naive_plane_codes(plane):
            for yi, code in enumerate(row):
                counts[block(yi + 1, x)][2][naive_bin(code)] += 1

    out = []
    for blk in counts:
        for plane_counts in blk:
            total = sum(plane_counts)
            out.extend(c / total for c in plane_counts)
    return np.asarray(out)


# --- agreement and correlation ----------------------------------------------


def contingency_kappa(a, b, num_levels=4):
    """Quadratic-weighted kappa straight off the contingency table."""
    n = len(a)
    table = [[0] * num_levels for _ in range(num_levels)]
    for x, y in zip(a, b):
        table[int(x)][int(y)] += 1
    row = [sum(table[i]) for i in range(num_levels)]
    col = [sum(table[i][j] for i in range(num_levels)) for j in range(num_levels)]
    observed_disagreement = 0.0
    expected_disagreement = 0.0
    for i in range(num_levels):
        for j in range(num_levels):
            w = (i - j) ** 2 / (num_levels - 1) ** 2
            observed_disagreement += w * table[i][j]
            expected_disagreement += w * row[i] * col[j] / n
    if expected_disagreement == 0.0:
        return 1.0 if observed_disagreement == 0.0 else float("nan")
    return 1.0 - observed_disagreement / expected_disagreement


def two_pass_pcc(x, y):
    """Pearson correlation via explicit centered sums."""
    n = len(x)
    mean_x = sum(x) / n
    mean_y = sum(y) / n
    sxy = sum((a - mean_x) * (b - mean_y) for a, b in zip(x, y))
    sxx = sum((a - mean_x) ** 2 for a in x)
    syy = sum((b - mean_y) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


# ---------------------------------------------------------------------------
# dense QP reference for epsilon-insensitive kernel regression


def _project_box_hyperplane(v, s, c):
    """Euclidean projection onto {0 <= x <= c, s.x = 0} by bisection."""
    span = c + float(np.abs(v).max()) + 1.0
    lo, hi = -span, span
    for _ in range(80):
        lam = 0.5 * (lo + hi)
        x = np.clip(v - lam * s, 0.0, c)
        if s @ x > 0.0:
            lo = lam
        else:
            hi = lam
    lam = 0.5 * (lo + hi)
    return np.clip(v - lam * s, 0.0, c)


def qp_reference_svr(kernel_matrix, y, c, epsilon, max_iter=400_000):
    """Projected gradient descent on the full dense 2l-variable dual.

    Returns (dual_coefficients theta, bias, dual objective value).  The
    dual objective is reported in maximization form, matching the trace
    the iterative trainer keeps.
    """
    k = np.asarray(kernel_matrix, dtype=float)
    y = np.asarray(y, dtype=float)
    l = len(y)
    q = np.block([[k, -k], [-k, k]])
    p = np.concatenate([epsilon - y, epsilon + y])
    s = np.concatenate([np.ones(l), -np.ones(l)])
    step = 1.0 / (np.linalg.eigvalsh(q).max() + 1e-9)
    a = np.zeros(2 * l)
    f_prev = 0.0
    for it in range(max_iter):
        g = q @ a + p
        a = _project_box_hyperplane(a - step * g, s, c)
        if it % 500 == 499:
            f = 0.5 * a @ (q @ a) + p @ a
            if abs(f_prev - f) < 1e-11 * (1.0 + abs(f)):
                break
            f_prev = f
    g = q @ a + p
    viol = -s * g
    up = ((s > 0) & (a < c)) | ((s < 0) & (a > 0))
    low = ((s > 0) & (a > 0)) | ((s < 0) & (a < c))
    bias = 0.5 * (viol[up].max() + viol[low].min())
    objective = -(0.5 * a @ (q @ a) + p @ a)
    return a[:l] - a[l:], float(bias), float(objective)


def closed_form_ridge(x, y, penalty):
    """Exact minimizer of mean squared error + penalty*||w||^2 (free bias)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, dim = x.shape
    xc = x - x.mean(axis=0)
    yc = y - y.mean()
    w = np.linalg.solve(xc.T @ xc + n * penalty * np.eye(dim), xc.T @ yc)
    b = y.mean() - x.mean(axis=0) @ w
    return w, float(b)


def ridge_mean_at(x, y, alpha, beta, fit_intercept=True):
    """Posterior mean beta (beta X'X + alpha I)^-1 X'y at fixed precisions."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if fit_intercept:
        xc = x - x.mean(axis=0)
        yc = y - y.mean()
    else:
        xc, yc = x, y
    dim = x.shape[1]
    return np.linalg.solve(beta * xc.T @ xc + alpha * np.eye(dim), beta * xc.T @ yc)


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_gradients(loss_fn, params, eps=1e-5):
    """Central-difference gradients, one parameter entry at a time.

    loss_fn() must read the (mutated in place) parameter arrays on every
    call; entries are restored exactly after probing.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat_p, flat_g = p.ravel(), g.ravel()
        for i in range(flat_p.size):
            original = flat_p[i]
            flat_p[i] = original + eps
            f_plus = loss_fn()
            flat_p[i] = original - eps
            f_minus = loss_fn()
            flat_p[i] = original
            flat_g[i] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(g)
    return grads


def max_relative_gradient_error(analytic, numeric):
    worst = 0.0
    for ga, gn in zip(analytic, numeric):
        denom = np.maximum(np.abs(ga) + np.abs(gn), 1e-6)
        worst = max(worst, float((np.abs(ga - gn) / denom).max()))
    return worst
