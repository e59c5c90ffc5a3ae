"""Differentiable decoder: projection, spherical-harmonics shading, and
z-buffered rasterization of the face model.

Differentiability contract: gradients flow to the latent code through
barycentric color/position interpolation; visibility (which triangle wins
the z-test, and the coverage mask) is piecewise-constant with zero
gradient. The visibility pass therefore runs gradient-free in a compiled
kernel; the interpolation pass is pure torch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import torch

from .model import FaceModel, LatentParams, decode_albedo, decode_shape

# real spherical harmonics up to order 2, evaluated on unit normals
SH_C = (
    0.28209479177,  # Y00
    0.48860251190,  # Y1-1 * y
    0.48860251190,  # Y10  * z
    0.48860251190,  # Y11  * x
    1.09254843059,  # Y2-2 * xy
    1.09254843059,  # Y2-1 * yz
    0.31539156525,  # Y20  * (3z^2 - 1)
    1.09254843059,  # Y21  * xz
    0.54627421529,  # Y22  * (x^2 - y^2)
)


@dataclass
class RenderOutput:
    """Raster output: image (H,W,3) in [0,1] and zero off-coverage,
    coverage (H,W) in {0,1}, landmarks2d (68,2) pixels, depth (H,W)
    camera-space depth (+inf where uncovered), tri_id (H,W) visibility
    buffer (-1 background)."""

    image: torch.Tensor
    coverage: torch.Tensor
    landmarks2d: torch.Tensor
    depth: torch.Tensor
    tri_id: torch.Tensor


def rotation_matrix(angles: torch.Tensor) -> torch.Tensor:
    """Rotation from (yaw, pitch, roll): R = Rz(roll) @ Rx(pitch) @ Ry(yaw)."""
    yaw, pitch, roll = angles[..., 0], angles[..., 1], angles[..., 2]
    cy, sy = torch.cos(yaw), torch.sin(yaw)
    cx, sx = torch.cos(pitch), torch.sin(pitch)
    cz, sz = torch.cos(roll), torch.sin(roll)
    one = torch.ones_like(cy)
    zero = torch.zeros_like(cy)
    ry = torch.stack(
        [cy, zero, sy, zero, one, zero, -sy, zero, cy], dim=-1
    ).reshape(angles.shape[:-1] + (3, 3))
    rx = torch.stack(
        [one, zero, zero, zero, cx, -sx, zero, sx, cx], dim=-1
    ).reshape(angles.shape[:-1] + (3, 3))
    rz = torch.stack(
        [cz, -sz, zero, sz, cz, zero, zero, zero, one], dim=-1
    ).reshape(angles.shape[:-1] + (3, 3))
    return rz @ rx @ ry


def project(vertices: torch.Tensor, cam: torch.Tensor, height: int, width: int):
    """Weak-perspective projection to pixel coordinates.

    Rotates by the Euler angles in cam[:3], translates by cam[3:5] in
    normalized image units, scales by exp(cam[5]) * width/2. A vertex at the
    origin under identity cam lands at (width/2, height/2). Returns
    (pixels (..., p, 2), depth (..., p)); depth grows away from the camera.
    """
    rot = rotation_matrix(cam[..., :3]).to(vertices.dtype)
    v_cam = vertices @ rot.transpose(-1, -2)
    scale = torch.exp(cam[..., 5:6]).to(vertices.dtype) * (width / 2.0)
    tx = cam[..., 3:4].to(vertices.dtype)
    ty = cam[..., 4:5].to(vertices.dtype)
    px = width / 2.0 + scale * (v_cam[..., 0] + tx)
    py = height / 2.0 - scale * (v_cam[..., 1] + ty)
    depth = -v_cam[..., 2]
    return torch.stack([px, py], dim=-1), depth


def shade_sh(normals: torch.Tensor, albedo: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
    """Per-vertex color: albedo modulated by 9-band SH irradiance per channel.

    phi has 27 entries, 9 per RGB channel (ambient first). Normals are
    renormalized internally. Output is unclamped; clamping to [0,1] happens
    at rasterization.
    """
    n = normals / normals.norm(dim=-1, keepdim=True).clamp(min=1e-12)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    basis = torch.stack(
        [
            torch.full_like(x, SH_C[0]),
            SH_C[1] * y,
            SH_C[2] * z,
            SH_C[3] * x,
            SH_C[4] * x * y,
            SH_C[5] * y * z,
            SH_C[6] * (3.0 * z * z - 1.0),
            SH_C[7] * x * z,
            SH_C[8] * (x * x - y * y),
        ],
        dim=-1,
    )  # (..., p, 9)
    coeff = phi.reshape(phi.shape[:-1] + (3, 9)).to(normals.dtype)
    irradiance = torch.einsum("...pb,...cb->...pc", basis, coeff)
    return albedo * irradiance


def vertex_normals(vertices: torch.Tensor, triangles: torch.Tensor) -> torch.Tensor:
    """Area-weighted average of incident triangle normals, unit length."""
    if vertices.dim() != 2:
        raise ValueError("vertex_normals expects an unbatched (p,3) tensor")
    v0 = vertices[triangles[:, 0]]
    v1 = vertices[triangles[:, 1]]
    v2 = vertices[triangles[:, 2]]
    face_n = torch.cross(v1 - v0, v2 - v0, dim=-1)  # length = 2 * area
    normals = torch.zeros_like(vertices)
    for k in range(3):
        normals = normals.index_add(0, triangles[:, k], face_n)
    return normals / normals.norm(dim=-1, keepdim=True).clamp(min=1e-12)


@numba.njit(cache=True)
def _zbuffer(xy, depth, tris, height, width):  # pragma: no cover - compiled
    tri_id = np.full((height, width), -1, np.int32)
    zbuf = np.full((height, width), np.inf, np.float64)
    for f in range(tris.shape[0]):
        i0, i1, i2 = tris[f, 0], tris[f, 1], tris[f, 2]
        x0, y0 = xy[i0, 0], xy[i0, 1]
        x1, y1 = xy[i1, 0], xy[i1, 1]
        x2, y2 = xy[i2, 0], xy[i2, 1]
        denom = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(denom) < 1e-12:
            continue
        xmin = max(0, int(np.ceil(min(x0, min(x1, x2)))))
        xmax = min(width - 1, int(np.floor(max(x0, max(x1, x2)))))
        ymin = max(0, int(np.ceil(min(y0, min(y1, y2)))))
        ymax = min(height - 1, int(np.floor(max(y0, max(y1, y2)))))
        for i in range(ymin, ymax + 1):
            for j in range(xmin, xmax + 1):
                w1 = ((j - x0) * (y2 - y0) - (x2 - x0) * (i - y0)) / denom
                w2 = ((x1 - x0) * (i - y0) - (j - x0) * (y1 - y0)) / denom
                w0 = 1.0 - w1 - w2
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                z = w0 * depth[i0] + w1 * depth[i1] + w2 * depth[i2]
                if z < zbuf[i, j]:
                    zbuf[i, j] = z
                    tri_id[i, j] = f
    return tri_id


def visibility_buffer(pixels: torch.Tensor, depth: torch.Tensor, triangles: torch.Tensor,
                      height: int, width: int) -> torch.Tensor:
    """Hard z-buffer pass: per-pixel winning triangle index, -1 background."""
    xy = pixels.detach().cpu().numpy().astype(np.float64)
    z = depth.detach().cpu().numpy().astype(np.float64)
    tris = triangles.cpu().numpy().astype(np.int64)
    return torch.from_numpy(_zbuffer(xy, z, tris, height, width))


def rasterize(model: FaceModel, params: LatentParams, height: int, width: int) -> RenderOutput:
    """Render the latent code to an image with coverage, landmarks and depth.

    A degenerate view (all triangles off-screen or edge-on) yields all-zero
    coverage rather than raising.
    """
    if height < 32 or width < 32:
        raise ValueError("height and width must be >= 32")
    alpha = params.alpha
    dtype = alpha.dtype if alpha.is_floating_point() else torch.float32

    vertices = decode_shape(model, alpha)
    albedo = decode_albedo(model, params.gamma)
    normals = vertex_normals(vertices, model.triangles)
    rot = rotation_matrix(params.cam[..., :3]).to(dtype)
    normals_cam = normals @ rot.transpose(-1, -2)
    colors = shade_sh(normals_cam, albedo, params.phi).clamp(0.0, 1.0)
    pixels, vdepth = project(vertices, params.cam, height, width)

    tri_id = visibility_buffer(pixels, vdepth, model.triangles, height, width)
    coverage = (tri_id >= 0).to(dtype)

    image = torch.zeros(height, width, 3, dtype=dtype)
    depth = torch.full((height, width), np.inf, dtype=dtype)
    cov_idx = torch.nonzero(tri_id >= 0, as_tuple=False)
    if cov_idx.shape[0]:
        rows, cols = cov_idx[:, 0], cov_idx[:, 1]
        tri = model.triangles[tri_id[rows, cols].long()]  # (n, 3)
        va = pixels[tri[:, 0]]
        vb = pixels[tri[:, 1]]
        vc = pixels[tri[:, 2]]
        px = cols.to(dtype)
        py = rows.to(dtype)
        denom = (vb[:, 0] - va[:, 0]) * (vc[:, 1] - va[:, 1]) - (vc[:, 0] - va[:, 0]) * (
            vb[:, 1] - va[:, 1]
        )
        denom = torch.where(denom.abs() < 1e-12, torch.full_like(denom, 1e-12), denom)
        w1 = ((px - va[:, 0]) * (vc[:, 1] - va[:, 1]) - (vc[:, 0] - va[:, 0]) * (py - va[:, 1])) / denom
        w2 = ((vb[:, 0] - va[:, 0]) * (py - va[:, 1]) - (px - va[:, 0]) * (vb[:, 1] - va[:, 1])) / denom
        w0 = 1.0 - w1 - w2
        col = (
            w0.unsqueeze(-1) * colors[tri[:, 0]]
            + w1.unsqueeze(-1) * colors[tri[:, 1]]
            + w2.unsqueeze(-1) * colors[tri[:, 2]]
        )
        image = image.index_put((rows, cols), col.clamp(0.0, 1.0))
        pix_depth = w0 * vdepth[tri[:, 0]] + w1 * vdepth[tri[:, 1]] + w2 * vdepth[tri[:, 2]]
        depth = depth.index_put((rows, cols), pix_depth)

    landmarks2d = pixels[model.landmark_indices]
    return RenderOutput(
        image=image, coverage=coverage, landmarks2d=landmarks2d, depth=depth, tri_id=tri_id
    )


def project_landmarks(model: FaceModel, params: LatentParams, height: int, width: int) -> torch.Tensor:
    """Project the 68 landmark vertices of the decoded shape to pixels."""
    vertices = decode_shape(model, params.alpha)
    pixels, _ = project(vertices, params.cam, height, width)
    return pixels[..., model.landmark_indices, :]


def rasterize_batch(model: FaceModel, codes: torch.Tensor, height: int, width: int):
    """Render a (B, 257) batch of packed codes.

    Returns (images (B,H,W,3), coverages (B,H,W), landmarks (B,68,2)).
    Gradients flow into codes as in :func:`rasterize`.
    """
    outs = [rasterize(model, LatentParams.unpack(codes[b]), height, width) for b in range(codes.shape[0])]
    images = torch.stack([o.image for o in outs])
    coverages = torch.stack([o.coverage for o in outs])
    landmarks = torch.stack([o.landmarks2d for o in outs])
    return images, coverages, landmarks
