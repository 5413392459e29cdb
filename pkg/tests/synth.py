"""Synthetic data generators shared by the tests."""

import json
from pathlib import Path

import numpy as np

from kendall.io import write_landmark_file
from kendall.preshape import slerp, sphere_exp, to_landmarks
from kendall.shape import horizontal
from kendall.transport import transport_velocity


def random_preshape(rng, m, k):
    x = rng.standard_normal((m, k - 1))
    return x / np.linalg.norm(x)


def random_rotation(rng, m):
    Q, R = np.linalg.qr(rng.standard_normal((m, m)))
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def random_skew(rng, m):
    A = rng.standard_normal((m, m))
    return A - A.T


def random_horizontal(rng, x, norm=None):
    u = horizontal(x, rng.standard_normal(x.shape))
    if norm is not None:
        u *= norm / np.linalg.norm(u)
    return u


def nearby(rng, x, spread):
    """A shape at distance about ``spread`` from ``x``."""
    return sphere_exp(x, random_horizontal(rng, x, spread))


def tangent_noise(rng, q, sigma):
    """Horizontal Gaussian perturbation of expected norm about ``sigma``."""
    e = rng.standard_normal(q.shape) * sigma / np.sqrt(q.size)
    return sphere_exp(q, horizontal(q, e))


def geodesic_data(rng, m=3, k=10, N=6, spread=0.4, sigma=0.0, rotate=True):
    """Observations on a random geodesic at equispaced times, optionally noisy
    and with each observation in a random orbit representative."""
    x = random_preshape(rng, m, k)
    y = nearby(rng, x, spread)
    t = np.linspace(0.0, 1.0, N)
    Q = slerp(t, x, y)
    if sigma:
        Q = np.stack([tangent_noise(rng, q, sigma) for q in Q])
    if rotate:
        Q = np.stack([random_rotation(rng, m) @ q for q in Q])
    return t, Q, x, y


def write_manifest(root, groups, rng, m=3, k=12, N=4, spread=0.3, sigma=0.02, effects=None,
                   base=None):
    """Write a synthetic study: ``groups`` maps label -> subject count.

    Each subject starts near a common base shape and moves along a group
    specific direction (``effects[label]``, a horizontal vector at the base)
    plus individual noise.  Returns the manifest path.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if base is None:
        base = random_preshape(rng, m, k)
    if effects is None:
        effects = {g: random_horizontal(rng, base, spread) for g in groups}
    subjects = []
    for g, n in groups.items():
        for s in range(n):
            sid = f"{g}{s:02d}"
            x0 = nearby(rng, base, 0.05)
            v = transport_velocity(base, effects[g], x0) + random_horizontal(rng, x0, 0.02)
            obs = []
            for j, t in enumerate(np.linspace(0.0, 1.0, N)):
                q = sphere_exp(x0, t * v)
                if sigma:
                    q = tangent_noise(rng, q, sigma)
                q = random_rotation(rng, m) @ q
                name = f"{sid}_{j}.txt"
                write_landmark_file(root / name, to_landmarks(q, 10.0) + 3.0)
                obs.append({"time": 12.0 * j, "path": name})
            subjects.append({"subject_id": sid, "group": g, "observations": obs})
    path = root / "manifest.json"
    path.write_text(json.dumps({"schema_version": 1, "subjects": subjects}, indent=1))
    return path
