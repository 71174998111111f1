"""Shared finite-difference harness and random-state generators."""

import numpy as np

from jumpopt import manifold as mf

FD_EPS = 1e-6


def rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    """Max absolute deviation, normalised by the FD magnitude (floored at 1)."""
    analytic = np.asarray(analytic)
    fd = np.asarray(fd)
    scale = max(1.0, float(np.abs(fd).max()) if fd.size else 1.0)
    return float(np.abs(analytic - fd).max()) / scale


def random_rotvec(rng, max_angle=2.5):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, max_angle)


def random_state(rng, max_angle=2.5):
    return mf.State(
        mf.Pose(rng.normal(size=3), mf.exp_so3(random_rotvec(rng, max_angle))),
        rng.normal(size=3),
        rng.normal(size=3),
        rng.normal(size=(4, 3)),
    )


def fd_wrt_state(fn, x, eps=FD_EPS, dim=mf.NT):
    """Central differences of fn(x) over tangent perturbations of x.

    Returns an array whose trailing axis indexes the perturbed direction.
    """
    cols = []
    for j in range(dim):
        d = np.zeros(dim)
        d[j] = eps
        plus = fn(mf.integrate(x, d))
        d[j] = -eps
        minus = fn(mf.integrate(x, d))
        cols.append((np.asarray(plus) - np.asarray(minus)) / (2.0 * eps))
    return np.stack(cols, axis=-1)


def fd_wrt_vector(fn, u, eps=FD_EPS):
    """Central differences of fn(u) for a plain Euclidean argument."""
    u = np.asarray(u, dtype=float)
    cols = []
    for j in range(u.size):
        d = np.zeros_like(u)
        d[j] = eps
        cols.append((np.asarray(fn(u + d)) - np.asarray(fn(u - d))) / (2.0 * eps))
    return np.stack(cols, axis=-1)


def point_cloud_inertia(params, q_cfg, rng, n_pts=1000):
    """Monte-Carlo mass-integral oracle for the composite inertia.

    Each link becomes a point cloud whose first and second moments are
    matched exactly (whitened samples mapped through a square root of the
    link's covariance), placed in base frame by an independent forward
    kinematics built on scipy rotations.  Returns (inertia, com) about the
    composite CoM.
    """
    from scipy.spatial.transform import Rotation

    def cloud(link):
        S = 0.5 * np.trace(link.inertia) * np.eye(3) - link.inertia
        z = rng.normal(size=(n_pts, 3))
        z -= z.mean(axis=0)
        cov = z.T @ z / n_pts
        z = z @ np.linalg.inv(np.linalg.cholesky(cov)).T
        pts = link.com + z @ np.linalg.cholesky(S / link.mass).T
        return pts, np.full(n_pts, link.mass / n_pts)

    all_pts = []
    all_w = []
    pts, w = cloud(params.base)
    all_pts.append(pts)
    all_w.append(w)
    for i, leg in enumerate(params.legs):
        q1, q2, q3 = q_cfg[3 * i : 3 * i + 3]
        R1 = Rotation.from_euler("x", q1).as_matrix()
        R2 = R1 @ Rotation.from_euler("y", q2).as_matrix()
        R3 = R2 @ Rotation.from_euler("y", q3).as_matrix()
        o1 = leg.hip_offset
        o2 = o1 + R1 @ [0.0, leg.side * leg.d_ab, 0.0]
        o3 = o2 + R2 @ [0.0, 0.0, -leg.l_thigh]
        for link, (R, o) in zip(leg.links, ((R1, o1), (R2, o2), (R3, o3))):
            pts, w = cloud(link)
            all_pts.append(pts @ R.T + o)
            all_w.append(w)
    pts = np.vstack(all_pts)
    w = np.concatenate(all_w)
    com = w @ pts / w.sum()
    d = pts - com
    inertia = np.eye(3) * np.sum(w * np.sum(d * d, axis=1)) - (d.T * w) @ d
    return inertia, com
