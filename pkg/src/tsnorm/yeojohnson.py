"""Yeo-Johnson power transform primitives.

All functions are elementwise; the exponent broadcasts against the data.
The transform has removable singularities at lambda = 0 (for x >= 0) and
lambda = 2 (for x < 0); within ``BRANCH_EPS`` of those points the exact
log-limit branches are used, so values straddling the threshold agree to
better than 1e-8.  The lambda-derivative additionally switches to a short
series expansion inside a wider window (``SERIES_EPS``) where the closed
form loses precision to cancellation.
"""

from __future__ import annotations

import numpy as np

BRANCH_EPS = 1e-6
SERIES_EPS = 1e-4


class PowerDomainError(ValueError):
    """Inverse transform evaluated outside its domain."""


def _split(x, lam):
    x = np.asarray(x, dtype=np.float64)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), x.shape)
    pos = x >= 0
    return x, lam, pos


def forward(x, lam):
    """The four-branch transform; total and strictly increasing in x."""
    x, lam, pos = _split(x, lam)

    lp = np.log1p(np.abs(x))
    near0 = np.abs(lam) < BRANCH_EPS
    near2 = np.abs(lam - 2.0) < BRANCH_EPS
    # x >= 0: ((1+x)^lam - 1)/lam, log-limit log1p(x) at lam ~ 0
    safe_lam = np.where(near0, 1.0, lam)
    pos_val = np.where(near0, lp, np.expm1(safe_lam * lp) / safe_lam)
    # x < 0: -((1-x)^(2-lam) - 1)/(2-lam), log-limit -log1p(-x) at lam ~ 2
    w = 2.0 - lam
    safe_w = np.where(near2, 1.0, w)
    neg_val = np.where(near2, -lp, -np.expm1(safe_w * lp) / safe_w)

    return np.where(pos, pos_val, neg_val)


def dx(x, lam):
    """d(forward)/dx: (1+x)^(lam-1) for x >= 0, (1-x)^(1-lam) for x < 0."""
    x, lam, pos = _split(x, lam)
    lp = np.log1p(np.abs(x))
    expo = np.where(pos, lam - 1.0, 1.0 - lam)
    return np.exp(expo * lp)


def log_dx(x, lam):
    """log d(forward)/dx, the forward-direction log-Jacobian term."""
    x, lam, pos = _split(x, lam)
    lp = np.log1p(np.abs(x))
    return np.where(pos, lam - 1.0, 1.0 - lam) * lp


def dlam(x, lam):
    """d(forward)/dlambda, series-expanded near the singular exponents.

    For x >= 0 with L = log1p(x) and A = (1+x)^lam the closed form is
    (A*(lam*L - 1) + 1)/lam^2; the x < 0 branch is the mirror image in
    w = 2 - lam.  Both cancel catastrophically as the denominator
    approaches zero, hence the series fallback.
    """
    x, lam, pos = _split(x, lam)
    lp = np.log1p(np.abs(x))

    def one_side(e):
        # e is lam on the positive side, 2-lam on the negative side
        near = np.abs(e) < SERIES_EPS
        safe = np.where(near, 1.0, e)
        a = np.exp(safe * lp)
        closed = (a * (safe * lp - 1.0) + 1.0) / safe**2
        series = lp**2 / 2.0 + e * lp**3 / 3.0 + e**2 * lp**4 / 8.0
        return np.where(near, series, closed)

    return np.where(pos, one_side(lam), one_side(2.0 - lam))


def dlam_log_dx(x, lam):
    """d(log d(forward)/dx)/dlambda: log1p(x) for x >= 0, -log1p(-x) below."""
    x, lam, pos = _split(x, lam)
    lp = np.log1p(np.abs(x))
    return np.where(pos, lp, -lp)


def dx_log_dx(x, lam):
    """d(log d(forward)/dx)/dx: (lam-1)/(1+x) above zero, (lam-1)/(1-x) below."""
    x, lam, pos = _split(x, lam)
    return (lam - 1.0) / np.where(pos, 1.0 + x, 1.0 - x)


def inverse(z, lam):
    """Inverse transform; raises PowerDomainError outside the image."""
    z, lam, pos = _split(z, lam)

    near0 = np.abs(lam) < BRANCH_EPS
    near2 = np.abs(lam - 2.0) < BRANCH_EPS
    w = 2.0 - lam

    arg_pos = 1.0 + z * lam
    arg_neg = 1.0 - z * w
    bad = (pos & ~near0 & (arg_pos <= 0)) | (~pos & ~near2 & (arg_neg <= 0))
    if np.any(bad):
        flat = np.argwhere(np.atleast_1d(bad))[0]
        raise PowerDomainError(
            f"value at index {tuple(int(v) for v in flat)} lies outside the "
            f"power transform image"
        )

    safe_lam = np.where(near0, 1.0, lam)
    safe_w = np.where(near2, 1.0, w)
    # arguments masked to 0 outside their own branch to avoid spurious warnings
    arg_pos_m = np.where(pos & ~near0, z * lam, 0.0)
    arg_neg_m = np.where(~pos & ~near2, -z * w, 0.0)
    pos_val = np.where(near0, np.expm1(z), np.expm1(np.log1p(arg_pos_m) / safe_lam))
    neg_val = np.where(near2, -np.expm1(-z), -np.expm1(np.log1p(arg_neg_m) / safe_w))

    return np.where(pos, pos_val, neg_val)


def inverse_log_dz(z, lam):
    """log |d(inverse)/dz| evaluated at a point of the transformed space.

    Branches: ((1-lam)/lam) log(1 + z lam) for z >= 0 (limit z at lam = 0)
    and ((lam-1)/(2-lam)) log(1 - z (2-lam)) for z < 0 (limit -z at lam = 2).
    """
    z, lam, pos = _split(z, lam)

    near0 = np.abs(lam) < BRANCH_EPS
    near2 = np.abs(lam - 2.0) < BRANCH_EPS
    w = 2.0 - lam

    safe_lam = np.where(near0, 1.0, lam)
    safe_w = np.where(near2, 1.0, w)
    arg_pos_m = np.where(pos & ~near0, z * lam, 0.0)
    arg_neg_m = np.where(~pos & ~near2, -z * w, 0.0)
    pos_val = np.where(near0, z, (1.0 - lam) / safe_lam * np.log1p(arg_pos_m))
    neg_val = np.where(near2, -z, (lam - 1.0) / safe_w * np.log1p(arg_neg_m))

    return np.where(pos, pos_val, neg_val)
