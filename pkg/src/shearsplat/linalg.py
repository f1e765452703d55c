"""Small fixed-size linear algebra for 4D Gaussians.

Quaternions are stored ``(w, x, y, z)``.  4D vectors are ordered ``(x, y, z, t)``
so index 3 is the temporal axis.  Every function accepts arbitrary leading
batch dimensions, e.g. quaternions of shape ``(..., 4)`` and covariances of
shape ``(..., 4, 4)``.

Symmetric 4x4 matrices are kept as dense, exactly symmetric arrays; the blocks
used throughout are the spatial block ``cov[..., :3, :3]``, the cross column
``cov[..., :3, 3]`` and the temporal variance ``cov[..., 3, 3]``.
"""

import numpy as np

from .errors import DegenerateTemporalError, InvalidParameterError

QUAT_EPS = 1e-12
TEMPORAL_EPS = 1e-12

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def _isoclinic_bases():
    # left[k] and right[k] are d(matrix)/d(q[k]); both matrices are linear in q.
    left = np.zeros((4, 4, 4))
    right = np.zeros((4, 4, 4))
    # left-isoclinic: [[a,-b,-c,-d],[b,a,-d,c],[c,d,a,-b],[d,-c,b,a]]
    lpat = [[(0, 1), (1, -1), (2, -1), (3, -1)],
            [(1, 1), (0, 1), (3, -1), (2, 1)],
            [(2, 1), (3, 1), (0, 1), (1, -1)],
            [(3, 1), (2, -1), (1, 1), (0, 1)]]
    # right-isoclinic: [[p,q,r,s],[-q,p,-s,r],[-r,s,p,-q],[-s,-r,q,p]]
    rpat = [[(0, 1), (1, 1), (2, 1), (3, 1)],
            [(1, -1), (0, 1), (3, -1), (2, 1)],
            [(2, -1), (3, 1), (0, 1), (1, -1)],
            [(3, -1), (2, -1), (1, 1), (0, 1)]]
    for i in range(4):
        for j in range(4):
            k, sgn = lpat[i][j]
            left[k, i, j] = sgn
            k, sgn = rpat[i][j]
            right[k, i, j] = sgn
    return left, right


LEFT_BASIS, RIGHT_BASIS = _isoclinic_bases()


# --------------------------------------------------------------------------
# quaternions
# --------------------------------------------------------------------------

def quat_normalize(q):
    """Return ``q / |q|``; raises for (near) zero quaternions."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= QUAT_EPS):
        raise InvalidParameterError("quaternion has zero norm")
    return q / n


def quat_mul(a, b):
    """Hamilton product ``a ⊗ b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_mul_vjp(a, b, g):
    """Gradients of ``<g, a ⊗ b>`` with respect to ``a`` and ``b``."""
    # a⊗b = L(a) b = R'(b) a with L the left-multiplication matrix.
    # d/db = L(a)^T g ; d/da = conj-trick: g ⊗ conj(b) ; d/db = conj(a) ⊗ g
    conj = np.array([1.0, -1.0, -1.0, -1.0])
    ga = quat_mul(g, b * conj)
    gb = quat_mul(a * conj, g)
    return ga, gb


def normalize_vjp(q, g):
    """Gradient through ``q / |q|`` given the upstream gradient ``g``."""
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / n
    return (g - u * np.sum(u * g, axis=-1, keepdims=True)) / n


def quat_to_rot3(q):
    """Rotation matrix of a quaternion (normalized internally)."""
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=-2)


def left_isoclinic(q):
    """Matrix of left quaternion multiplication ``p -> q p`` (no normalization)."""
    return np.einsum("...k,kij->...ij", np.asarray(q, dtype=np.float64), LEFT_BASIS)


def right_isoclinic(q):
    """Right-isoclinic factor used for 4D rotations (no normalization)."""
    return np.einsum("...k,kij->...ij", np.asarray(q, dtype=np.float64), RIGHT_BASIS)


def quat_pair_to_rot4(q_l, q_r):
    """4D rotation ``L(q_l) @ R(q_r)`` from a pair of quaternions.

    Both quaternions are normalized first, so the product of the two
    isoclinic factors is in SO(4).
    """
    return left_isoclinic(quat_normalize(q_l)) @ right_isoclinic(quat_normalize(q_r))


def rot4_vjp(q_l, q_r, g):
    """Gradients of ``<g, quat_pair_to_rot4(q_l, q_r)>`` w.r.t. the raw quaternions."""
    ul = quat_normalize(q_l)
    ur = quat_normalize(q_r)
    ml = left_isoclinic(ul)
    mr = right_isoclinic(ur)
    g_ml = g @ np.swapaxes(mr, -1, -2)
    g_mr = np.swapaxes(ml, -1, -2) @ g
    g_ul = np.einsum("...ij,kij->...k", g_ml, LEFT_BASIS)
    g_ur = np.einsum("...ij,kij->...k", g_mr, RIGHT_BASIS)
    return normalize_vjp(q_l, g_ul), normalize_vjp(q_r, g_ur)


# --------------------------------------------------------------------------
# covariance assembly and shearing
# --------------------------------------------------------------------------

def _check_scales(s):
    s = np.asarray(s, dtype=np.float64)
    if np.any(~(s > 0)):
        raise InvalidParameterError("scales must be strictly positive")
    return s


def _symmetrize(c):
    return 0.5 * (c + np.swapaxes(c, -1, -2))


def cov4_from_rot(rot, s):
    """``rot @ diag(s)^2 @ rot.T``, exactly symmetric."""
    m = rot * s[..., None, :]
    return _symmetrize(m @ np.swapaxes(m, -1, -2))


def assemble_cov4(q_l, q_r, s):
    """4D covariance ``R S S^T R^T`` with ``R = quat_pair_to_rot4(q_l, q_r)``."""
    s = _check_scales(s)
    return cov4_from_rot(quat_pair_to_rot4(q_l, q_r), s)


def cov4_vjp(rot, s, g):
    """Gradients of ``<g, cov4_from_rot(rot, s)>`` w.r.t. ``rot`` and ``s``."""
    gs = _symmetrize(g)
    d = s * s
    g_rot = 2.0 * (gs @ rot) * d[..., None, :]
    g_s = 2.0 * s * np.einsum("...ji,...jk,...ki->...i", rot, gs, rot)
    return g_rot, g_s


def shear_matrix(v):
    """Galilean shear ``[[I3, v], [0, 1]]`` as a dense 4x4 matrix."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (4, 4))
    out[..., 0, 0] = out[..., 1, 1] = out[..., 2, 2] = out[..., 3, 3] = 1.0
    out[..., :3, 3] = v
    return out


def congruence_shear(cov, v):
    """Return ``V cov V^T`` for the shear ``V`` with velocity ``v``.

    Evaluated block-wise:

        spatial' = spatial + v b^T + b v^T + d v v^T
        cross'   = b + v d
        d'       = d

    with ``b`` the cross column and ``d`` the temporal variance.
    """
    cov = np.asarray(cov, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    a = cov[..., :3, :3]
    b = cov[..., :3, 3]
    d = cov[..., 3, 3]
    u = v[..., :, None] * b[..., None, :]
    spatial = a + (u + np.swapaxes(u, -1, -2)) + d[..., None, None] * (v[..., :, None] * v[..., None, :])
    cross = b + v * d[..., None]
    out = np.empty(np.broadcast_shapes(cov.shape, v.shape[:-1] + (4, 4)))
    out[..., :3, :3] = spatial
    out[..., :3, 3] = cross
    out[..., 3, :3] = cross
    out[..., 3, 3] = d
    return out


# --------------------------------------------------------------------------
# conditioning on time
# --------------------------------------------------------------------------

def _temporal_variance(cov):
    d = cov[..., 3, 3]
    if np.any(~(d > TEMPORAL_EPS)):
        raise DegenerateTemporalError("temporal variance must exceed %g" % TEMPORAL_EPS)
    return d


def schur_tt(cov):
    """Schur complement of the temporal entry: ``A - b b^T / d``."""
    cov = np.asarray(cov, dtype=np.float64)
    d = _temporal_variance(cov)
    b = cov[..., :3, 3]
    return cov[..., :3, :3] - (b[..., :, None] * b[..., None, :]) / d[..., None, None]


def intrinsic_velocity(cov):
    """Time-invariant velocity ``cross / d`` carried by a 4D covariance."""
    cov = np.asarray(cov, dtype=np.float64)
    d = _temporal_variance(cov)
    return cov[..., :3, 3] / d[..., None]


def conditional_moments(mean4, cov, t):
    """Mean and covariance of the 3D Gaussian obtained by fixing time ``t``."""
    mean4 = np.asarray(mean4, dtype=np.float64)
    tau = np.asarray(t, dtype=np.float64) - mean4[..., 3]
    mean3 = mean4[..., :3] + intrinsic_velocity(cov) * tau[..., None]
    return mean3, schur_tt(cov)


def conditional_moments_sheared(mean4, cov, v_t, t):
    """Conditional moments after shearing by the instantaneous velocity ``v_t``.

    Only the mean moves; the covariance is computed from the unsheared ``cov``
    and is therefore bit-identical to :func:`conditional_moments`.
    """
    mean4 = np.asarray(mean4, dtype=np.float64)
    tau = np.asarray(t, dtype=np.float64) - mean4[..., 3]
    vel = intrinsic_velocity(cov) + np.asarray(v_t, dtype=np.float64)
    return mean4[..., :3] + vel * tau[..., None], schur_tt(cov)


def temporal_marginal(mean4, cov, t):
    """Unnormalized temporal kernel ``exp(-(t - mu_t)^2 / (2 d))``, peak 1."""
    mean4 = np.asarray(mean4, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    d = _temporal_variance(cov)
    tau = np.asarray(t, dtype=np.float64) - mean4[..., 3]
    return np.exp(-0.5 * tau * tau / d)
