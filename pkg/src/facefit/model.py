"""Linear statistical face model: PCA shape/albedo spaces and the latent code.

The model is built procedurally (no licensed asset): a face-like open shell
mesh plus smooth random PCA bases with a decaying standard-deviation
spectrum. Coefficients are expressed in std-normal units, i.e. the bases are
applied as ``mean + sum_k coeff_k * std_k * basis_k``.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass

import numpy as np
import torch

SHAPE_DIM = 144
ALBEDO_DIM = 80
ILLUM_DIM = 27
CAM_DIM = 6
PARAM_DIM = SHAPE_DIM + ALBEDO_DIM + ILLUM_DIM + CAM_DIM  # 257

N_LANDMARKS = 68

# cam = (yaw, pitch, roll, tx, ty, log_scale); angles in radians, translations
# in normalized image units, scale applied as exp(log_scale) under weak
# perspective.
YAW_MAX = np.deg2rad(45.0)
PITCH_MAX = np.deg2rad(20.0)
ROLL_MAX = np.deg2rad(10.0)
TRANS_MAX = 0.15
LOG_SCALE_MAX = 0.2

_MODEL_MAGIC = b"FFM1"
_MODEL_VERSION = 1


@dataclass
class LatentParams:
    """Latent code [alpha, gamma, phi, cam] driving the decoder.

    alpha/gamma are PCA coefficients in std-normal units, phi holds 9
    spherical-harmonics coefficients per RGB channel (ambient first), cam is
    (yaw, pitch, roll, tx, ty, log_scale). Fields may carry leading batch
    dimensions; the concatenation order of :meth:`pack` is fixed.
    """

    alpha: torch.Tensor
    gamma: torch.Tensor
    phi: torch.Tensor
    cam: torch.Tensor

    def __post_init__(self):
        dims = (SHAPE_DIM, ALBEDO_DIM, ILLUM_DIM, CAM_DIM)
        for name, dim in zip(("alpha", "gamma", "phi", "cam"), dims):
            t = getattr(self, name)
            if not torch.is_tensor(t):
                t = torch.as_tensor(np.asarray(t), dtype=torch.float32)
                object.__setattr__(self, name, t)
            if t.shape[-1] != dim:
                raise ValueError(f"{name} must have last dimension {dim}, got {tuple(t.shape)}")

    def pack(self) -> torch.Tensor:
        """Concatenate to a (..., 257) vector."""
        return torch.cat([self.alpha, self.gamma, self.phi, self.cam], dim=-1)

    @classmethod
    def unpack(cls, vec: torch.Tensor) -> "LatentParams":
        """Split a (..., 257) vector back into structured fields."""
        if vec.shape[-1] != PARAM_DIM:
            raise ValueError(f"expected last dimension {PARAM_DIM}, got {tuple(vec.shape)}")
        alpha, gamma, phi, cam = torch.split(
            vec, [SHAPE_DIM, ALBEDO_DIM, ILLUM_DIM, CAM_DIM], dim=-1
        )
        return cls(alpha, gamma, phi, cam)

    @classmethod
    def zeros(cls, dtype=torch.float32) -> "LatentParams":
        return cls.unpack(torch.zeros(PARAM_DIM, dtype=dtype))

    def detach(self) -> "LatentParams":
        return LatentParams(
            self.alpha.detach(), self.gamma.detach(), self.phi.detach(), self.cam.detach()
        )


@dataclass(eq=False)
class FaceModel:
    """PCA face model: mean/bases/stds for shape and albedo plus topology.

    Shapes: mean_shape (p,3), shape_basis (p,3,144), shape_std (144,),
    mean_albedo (p,3), albedo_basis (p,3,80), albedo_std (80,),
    triangles (t,3) int64, landmark_indices (68,) int64. Immutable by
    convention after construction; all operations on it are pure.
    """

    mean_shape: torch.Tensor
    shape_basis: torch.Tensor
    shape_std: torch.Tensor
    mean_albedo: torch.Tensor
    albedo_basis: torch.Tensor
    albedo_std: torch.Tensor
    triangles: torch.Tensor
    landmark_indices: torch.Tensor

    def __post_init__(self):
        p = self.mean_shape.shape[0]
        if self.triangles.numel() and (
            int(self.triangles.min()) < 0 or int(self.triangles.max()) >= p
        ):
            raise ValueError("triangle indices out of range")
        if (self.shape_std <= 0).any() or (self.albedo_std <= 0).any():
            raise ValueError("basis stds must be strictly positive")
        lm = self.landmark_indices
        if lm.shape[0] != N_LANDMARKS or len(set(lm.tolist())) != N_LANDMARKS:
            raise ValueError("need 68 distinct landmark indices")
        if int(lm.min()) < 0 or int(lm.max()) >= p:
            raise ValueError("landmark indices out of range")

    @property
    def p(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]


def decode_shape(model: FaceModel, alpha: torch.Tensor) -> torch.Tensor:
    """Decode shape coefficients to vertices: mean + sum_k a_k*std_k*B_k.

    alpha may carry leading batch dims; returns (..., p, 3). Exactly linear
    in alpha and differentiable.
    """
    if alpha.shape[-1] != SHAPE_DIM:
        raise ValueError(f"alpha must have last dimension {SHAPE_DIM}")
    basis = model.shape_basis.to(alpha.dtype)
    scaled = alpha * model.shape_std.to(alpha.dtype)
    return model.mean_shape.to(alpha.dtype) + torch.einsum("pck,...k->...pc", basis, scaled)


def decode_albedo(model: FaceModel, gamma: torch.Tensor) -> torch.Tensor:
    """Decode albedo coefficients to per-vertex colors (unclamped).

    Clamping to [0,1] happens at render time only, keeping the output
    differentiable and exactly linear in gamma.
    """
    if gamma.shape[-1] != ALBEDO_DIM:
        raise ValueError(f"gamma must have last dimension {ALBEDO_DIM}")
    basis = model.albedo_basis.to(gamma.dtype)
    scaled = gamma * model.albedo_std.to(gamma.dtype)
    return model.mean_albedo.to(gamma.dtype) + torch.einsum("pck,...k->...pc", basis, scaled)


# ---------------------------------------------------------------------------
# synthetic model construction


def _gauss2(x, y, cx, cy, sx, sy):
    return np.exp(-((x - cx) / sx) ** 2 - ((y - cy) / sy) ** 2)


def _face_surface(u, v):
    """Map unit-disk coordinates (u right, v up) to a face-like shell.

    Returns (x, y, z) with the face spanning roughly [-1,1]^3 and the nose
    pointing toward +z.
    """
    jaw_taper = 1.0 - 0.20 * np.clip(-v, 0.0, 1.0) ** 1.5
    x = 0.80 * u * jaw_taper
    y = 0.97 * v
    r2 = u * u + v * v
    z = 0.50 * np.sqrt(np.clip(1.15 - r2, 0.0, None))
    z += 0.28 * _gauss2(x, y, 0.0, -0.08, 0.11, 0.26)  # nose ridge
    z += 0.06 * _gauss2(x, y, 0.0, -0.17, 0.18, 0.08)  # nose base
    z -= 0.07 * (_gauss2(x, y, -0.32, 0.18, 0.17, 0.10) + _gauss2(x, y, 0.32, 0.18, 0.17, 0.10))
    z += 0.05 * _gauss2(x, y, 0.0, -0.47, 0.26, 0.09)  # lips
    z += 0.05 * _gauss2(x, y, 0.0, -0.82, 0.20, 0.13)  # chin
    z += 0.04 * (_gauss2(x, y, -0.30, 0.34, 0.22, 0.08) + _gauss2(x, y, 0.30, 0.34, 0.22, 0.08))
    z -= 0.35
    return x, y, z


def _mean_albedo_for(x, y):
    """Skin-toned base color with lip/brow/eye features."""
    p = x.shape[0]
    alb = np.empty((p, 3))
    alb[:, 0] = 0.78 + 0.02 * y
    alb[:, 1] = 0.60 + 0.02 * y
    alb[:, 2] = 0.50 + 0.02 * y
    lips = _gauss2(x, y, 0.0, -0.47, 0.24, 0.075)
    alb += lips[:, None] * np.array([0.08, -0.22, -0.14])
    brows = _gauss2(x, y, -0.31, 0.335, 0.16, 0.045) + _gauss2(x, y, 0.31, 0.335, 0.16, 0.045)
    alb -= brows[:, None] * np.array([0.42, 0.36, 0.28])
    eyes = _gauss2(x, y, -0.32, 0.18, 0.10, 0.042) + _gauss2(x, y, 0.32, 0.18, 0.10, 0.042)
    alb -= eyes[:, None] * np.array([0.40, 0.33, 0.22])
    nostrils = _gauss2(x, y, 0.0, -0.19, 0.10, 0.035)
    alb -= nostrils[:, None] * np.array([0.18, 0.16, 0.12])
    return np.clip(alb, 0.05, 0.95)


def _disk_layout(p):
    """Ring sizes for a triangulated disk with exactly p vertices."""
    n_rings = 1
    while 1 + 3 * (n_rings + 1) * (n_rings + 2) <= p:
        n_rings += 1
    counts = [6 * k for k in range(1, n_rings + 1)]
    counts[-1] += p - (1 + 3 * n_rings * (n_rings + 1))
    return counts


def _bridge_rings(inner_idx, inner_ang, outer_idx, outer_ang):
    """Triangulate the band between two concentric vertex loops."""
    a, b = len(inner_idx), len(outer_idx)
    tris = []
    i = j = 0
    while i < a or j < b:
        next_inner = inner_ang[(i + 1) % a] + (2 * np.pi if i + 1 >= a else 0.0)
        next_outer = outer_ang[(j + 1) % b] + (2 * np.pi if j + 1 >= b else 0.0)
        if i < a and (j >= b or next_inner <= next_outer):
            tris.append((inner_idx[i % a], outer_idx[j % b], inner_idx[(i + 1) % a]))
            i += 1
        else:
            tris.append((inner_idx[i % a], outer_idx[j % b], outer_idx[(j + 1) % b]))
            j += 1
    return tris


def _build_mesh(p):
    """Polar disk mesh shaped into a face shell; exact vertex count p."""
    counts = _disk_layout(p)
    us = [0.0]
    vs = [0.0]
    ring_indices = [[0]]
    ring_angles = [[0.0]]
    n_rings = len(counts)
    idx = 1
    for k, m in enumerate(counts, start=1):
        r = k / n_rings
        offset = (k % 2) * np.pi / m
        ang = (2 * np.pi * np.arange(m) / m + offset) % (2 * np.pi)
        order = np.argsort(ang)
        ang = ang[order]
        us.extend(r * np.cos(ang))
        vs.extend(r * np.sin(ang))
        ring_indices.append(list(range(idx, idx + m)))
        ring_angles.append(list(ang))
        idx += m
    u = np.asarray(us)
    v = np.asarray(vs)

    tris = []
    center = ring_indices[0][0]
    first = ring_indices[1]
    for j in range(len(first)):
        tris.append((center, first[j], first[(j + 1) % len(first)]))
    for k in range(1, n_rings):
        tris.extend(
            _bridge_rings(ring_indices[k], ring_angles[k], ring_indices[k + 1], ring_angles[k + 1])
        )
    tris = np.asarray(tris, dtype=np.int64)

    x, y, z = _face_surface(u, v)
    verts = np.stack([x, y, z], axis=1)

    # orient all triangles counter-clockwise in the (x, y) plane so that
    # outward normals point toward +z (the camera side)
    e1 = verts[tris[:, 1], :2] - verts[tris[:, 0], :2]
    e2 = verts[tris[:, 2], :2] - verts[tris[:, 0], :2]
    flip = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0] < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return verts, tris


# canonical (x, y) targets for the 68 landmarks, iBUG ordering:
# 0-16 jaw, 17-26 brows, 27-30 nose ridge, 31-35 nose base, 36-47 eyes,
# 48-59 outer lip, 60-67 inner lip. Index 36 region is the image-left eye.
def _landmark_targets():
    pts = []
    for i in range(17):  # jaw along the lower outline, image-left to image-right
        ang = np.pi + i * np.pi / 16
        pts.append((0.74 * np.cos(ang), 0.92 * np.sin(ang) + 0.10))
    for s in (-1, 1):  # brows
        xs = np.linspace(0.50, 0.12, 5) * s
        for k, bx in enumerate(xs):
            pts.append((bx, 0.34 + 0.05 * np.sin(np.pi * k / 4)))
    for yy in np.linspace(0.26, -0.05, 4):  # nose ridge
        pts.append((0.0, yy))
    for bx in np.linspace(-0.14, 0.14, 5):  # nose base
        pts.append((bx, -0.15 - 0.03 * (1 - abs(bx) / 0.14)))
    eye = [(-0.11, 0.0), (-0.055, 0.045), (0.045, 0.045), (0.10, 0.0), (0.045, -0.045), (-0.055, -0.045)]
    for cx in (-0.32, 0.32):  # image-left eye first (indices 36-41)
        for ex, ey in eye:
            pts.append((cx + ex, 0.18 + ey))
    outer = [
        (-0.28, -0.47), (-0.17, -0.405), (-0.07, -0.375), (0.0, -0.385), (0.07, -0.375),
        (0.17, -0.405), (0.28, -0.47), (0.17, -0.535), (0.07, -0.565), (0.0, -0.575),
        (-0.07, -0.565), (-0.17, -0.535),
    ]
    inner = [
        (-0.21, -0.47), (-0.08, -0.432), (0.0, -0.442), (0.08, -0.432), (0.21, -0.47),
        (0.08, -0.508), (0.0, -0.498), (-0.08, -0.508),
    ]
    pts.extend(outer)
    pts.extend(inner)
    return np.asarray(pts)


NOSE_RIDGE_LANDMARKS = list(range(27, 31))
INNER_LIP_LANDMARKS = list(range(60, 68))


def _pick_landmarks(verts):
    targets = _landmark_targets()
    xy = verts[:, :2]
    used = set()
    picked = []
    for t in targets:
        d = np.sum((xy - t) ** 2, axis=1)
        for i in np.argsort(d):
            if int(i) not in used:
                used.add(int(i))
                picked.append(int(i))
                break
    return np.asarray(picked, dtype=np.int64)


def _smooth_fields(rng, points, n_fields, n_bumps=6):
    """Random smooth per-vertex 3-vector fields, unit per-vertex RMS.

    Even-indexed fields get a bilaterally symmetric component by evaluating
    the same bumps at x-mirrored positions with x-mirrored directions.
    """
    p = points.shape[0]
    mirrored = points * np.array([-1.0, 1.0, 1.0])
    fields = np.empty((p, 3, n_fields))
    for k in range(n_fields):
        f = np.zeros((p, 3))
        for _ in range(n_bumps):
            c = rng.uniform([-0.8, -1.0, -0.3], [0.8, 1.0, 0.6])
            w = rng.uniform(0.18, 0.55)
            d = rng.standard_normal(3)
            d /= np.linalg.norm(d)
            amp = rng.standard_normal()
            f += amp * np.exp(-np.sum((points - c) ** 2, axis=1) / (2 * w * w))[:, None] * d
            if k % 2 == 0:
                dm = d * np.array([-1.0, 1.0, 1.0])
                f += amp * np.exp(-np.sum((mirrored - c) ** 2, axis=1) / (2 * w * w))[:, None] * dm
        rms = np.sqrt(np.mean(f**2))
        fields[:, :, k] = f / max(rms, 1e-12)
    return fields


def build_synthetic_model(seed: int, p: int = 1562) -> FaceModel:
    """Build a deterministic synthetic PCA face model with p vertices."""
    if p < 300:
        raise ValueError(f"p must be >= 300, got {p}")
    rng = np.random.default_rng(seed)
    verts, tris = _build_mesh(p)
    mean_albedo = _mean_albedo_for(verts[:, 0], verts[:, 1])

    shape_basis = _smooth_fields(rng, verts, SHAPE_DIM)
    albedo_basis = _smooth_fields(rng, verts, ALBEDO_DIM)
    ks = np.arange(1, SHAPE_DIM + 1, dtype=np.float64)
    shape_std = 0.05 * ks**-0.7
    ka = np.arange(1, ALBEDO_DIM + 1, dtype=np.float64)
    albedo_std = 0.07 * ka**-0.7

    f32 = lambda a: torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))
    return FaceModel(
        mean_shape=f32(verts),
        shape_basis=f32(shape_basis),
        shape_std=f32(shape_std),
        mean_albedo=f32(mean_albedo),
        albedo_basis=f32(albedo_basis),
        albedo_std=f32(albedo_std),
        triangles=torch.from_numpy(tris),
        landmark_indices=torch.from_numpy(_pick_landmarks(verts)),
    )


# ---------------------------------------------------------------------------
# latent sampling

SH_AMBIENT = 1.0 / 0.28209479177  # phi value rendering albedo unchanged


def sample_params(rng: np.random.Generator, truncation: float = 2.5) -> LatentParams:
    """Sample a latent code from the generative prior.

    alpha/gamma are std-normal truncated to [-truncation, truncation]; phi
    follows a natural-illumination prior (positive ambient, smaller higher
    bands); cam stays within the documented pose bounds.
    """
    if truncation <= 0:
        raise ValueError("truncation must be positive")

    def trunc_normal(n):
        out = rng.standard_normal(n)
        bad = np.abs(out) > truncation
        while bad.any():
            out[bad] = rng.standard_normal(int(bad.sum()))
            bad = np.abs(out) > truncation
        return out

    alpha = trunc_normal(SHAPE_DIM)
    gamma = trunc_normal(ALBEDO_DIM)

    phi = np.zeros((3, 9))
    ambient = SH_AMBIENT * rng.uniform(0.80, 1.05)
    tint = 1.0 + 0.04 * rng.standard_normal(3)
    phi[:, 0] = ambient * tint
    band1 = 0.35 * rng.standard_normal(3)
    phi[:, 1:4] = band1 + 0.10 * rng.standard_normal((3, 3))
    band2 = 0.10 * rng.standard_normal(5)
    phi[:, 4:9] = band2 + 0.04 * rng.standard_normal((3, 5))

    cam = np.array(
        [
            rng.uniform(-YAW_MAX, YAW_MAX),
            rng.uniform(-PITCH_MAX, PITCH_MAX),
            rng.uniform(-ROLL_MAX, ROLL_MAX),
            rng.uniform(-TRANS_MAX, TRANS_MAX),
            rng.uniform(-TRANS_MAX, TRANS_MAX),
            rng.uniform(-LOG_SCALE_MAX, LOG_SCALE_MAX),
        ]
    )
    as32 = lambda a: torch.from_numpy(np.asarray(a, dtype=np.float32).reshape(-1))
    return LatentParams(as32(alpha), as32(gamma), as32(phi), as32(cam))


# ---------------------------------------------------------------------------
# serialization: versioned header + little-endian arrays in fixed order


def _model_bytes(model: FaceModel) -> bytes:
    buf = io.BytesIO()
    buf.write(_MODEL_MAGIC)
    buf.write(
        struct.pack(
            "<5i",
            _MODEL_VERSION,
            model.p,
            model.n_triangles,
            SHAPE_DIM,
            ALBEDO_DIM,
        )
    )
    for arr in (
        model.mean_shape,
        model.shape_basis,
        model.shape_std,
        model.mean_albedo,
        model.albedo_basis,
        model.albedo_std,
    ):
        buf.write(arr.numpy().astype("<f4").tobytes())
    buf.write(model.triangles.numpy().astype("<i4").tobytes())
    buf.write(model.landmark_indices.numpy().astype("<i4").tobytes())
    return buf.getvalue()


def save_model(model: FaceModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_model_bytes(model))


def load_model(path) -> FaceModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MODEL_MAGIC:
        raise ValueError(f"{path}: not a face model file")
    version, p, t, sdim, adim = struct.unpack_from("<5i", raw, 4)
    if version != _MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    if (sdim, adim) != (SHAPE_DIM, ALBEDO_DIM):
        raise ValueError(f"{path}: unexpected basis dimensions {(sdim, adim)}")
    off = 4 + 20

    def take(shape, dtype):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype=dtype, count=n, offset=off).reshape(shape).copy()
        off += n * 4
        return arr

    mean_shape = take((p, 3), "<f4")
    shape_basis = take((p, 3, SHAPE_DIM), "<f4")
    shape_std = take((SHAPE_DIM,), "<f4")
    mean_albedo = take((p, 3), "<f4")
    albedo_basis = take((p, 3, ALBEDO_DIM), "<f4")
    albedo_std = take((ALBEDO_DIM,), "<f4")
    triangles = take((t, 3), "<i4")
    landmarks = take((N_LANDMARKS,), "<i4")
    f32 = lambda a: torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))
    return FaceModel(
        mean_shape=f32(mean_shape),
        shape_basis=f32(shape_basis),
        shape_std=f32(shape_std),
        mean_albedo=f32(mean_albedo),
        albedo_basis=f32(albedo_basis),
        albedo_std=f32(albedo_std),
        triangles=torch.from_numpy(triangles.astype(np.int64)),
        landmark_indices=torch.from_numpy(landmarks.astype(np.int64)),
    )


def model_hash(model: FaceModel) -> str:
    """Short content hash used to tie corpora and priors to a model."""
    return hashlib.sha256(_model_bytes(model)).hexdigest()[:16]
