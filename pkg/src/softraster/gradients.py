"""Analytic backward pass through the soft rasterizer.

Takes the fragment tape of a forward render plus upstream gradients
with respect to the image and the silhouette, and accumulates exact
derivatives for vertex positions (world and model space), vertex
colors, and the pose parameters.

The fragment-level chain rules worth writing down:

  softmax color fusion, a_j = log D_j + z_j / gamma:
      dL/da_j = w_j (<g, C_j> - <g, I>)
  coverage probability, D = sigmoid(s / sigma):
      color path      dL/ds += dL/da_j (1 - D_j) / sigma
      silhouette path dL/ds += g_alpha exp(S + log D_j) / sigma
  with S = sum_k log(1 - D_k); both forms avoid dividing by D or
  (1 - D), so saturated fragments contribute exact zeros instead of
  NaNs.

  euclidean distance, s = delta |U t - p|^2 with t the boundary-point
  barycentric held fixed:
      dL/d uv_m = dL/ds * 2 delta (U t - p) t_m
  smallest barycentric coordinate and interpolation weights share one
  identity, d b_s / d U_{k,m} = -(U^-1)_{s,k} b_m, applied to the raw
  coordinates at the pixel.

Clamped quantities (clipped barycentric coordinates, the depth clamp,
the shading clamps) pass gradient only where the clamp is inactive.
"""

from dataclasses import dataclass

import numpy as np

from .camera import project_jacobians


@dataclass
class GradientSet:
    """Parameter gradients of a scalar loss through one render.

    d_vertices      : (V, 3) with respect to world-space positions
    d_displacements : (V, 3) with respect to model-space positions
                      (world gradient pulled back through the pose
                      rotation); this is the block a deformation
                      optimizer steps on
    d_colors        : (V, 3)
    d_quaternion    : (4,) raw (unnormalized) quaternion parameters
    d_translation   : (3,)
    """
    d_vertices: np.ndarray
    d_displacements: np.ndarray
    d_colors: np.ndarray
    d_quaternion: np.ndarray
    d_translation: np.ndarray


def _scatter_corners(values, corner_idx, n_vertices):
    """Accumulate per-fragment-corner values (N, 3, C) onto vertices."""
    flat_idx = corner_idx.ravel()
    if values.ndim == 2:
        return np.bincount(flat_idx, weights=values.ravel(), minlength=n_vertices)
    out = np.empty((n_vertices, values.shape[-1]))
    for c in range(values.shape[-1]):
        out[:, c] = np.bincount(flat_idx, weights=values[..., c].ravel(),
                                minlength=n_vertices)
    return out


def backward(tape, d_image, d_alpha=None):
    """Propagate dL/dimage (H, W, 3) and dL/dalpha (H, W) to a GradientSet."""
    if tape is None:
        raise ValueError("no fragment tape; render with keep_tape=True")
    cfg = tape.config
    H, W = cfg.height, cfg.width
    d_image = np.asarray(d_image, dtype=np.float64)
    if d_image.shape != (H, W, 3):
        raise ValueError(f"d_image must be ({H}, {W}, 3), got {d_image.shape}")
    if d_alpha is None:
        d_alpha = np.zeros((H, W))
    d_alpha = np.asarray(d_alpha, dtype=np.float64)
    if d_alpha.shape != (H, W):
        raise ValueError(f"d_alpha must be ({H}, {W}), got {d_alpha.shape}")

    mesh = tape.mesh
    nv = mesh.num_vertices
    g_img = d_image.reshape(-1, 3)
    g_alpha = d_alpha.ravel()

    jac = project_jacobians(mesh.vertices, tape.pose, tape.camera)

    if tape.n_fragments() == 0:
        zero3 = np.zeros((nv, 3))
        return GradientSet(zero3, zero3.copy(), np.zeros((nv, 3)),
                           np.zeros(4), np.zeros(3))

    pix = tape.pix
    fface = tape.fface
    cam = tape.camera

    # --- aggregation backward -------------------------------------------
    gdot_img = np.einsum("pc,pc->p", g_img, tape.image)
    da = tape.w * (np.einsum("nc,nc->n", g_img[pix], tape.color) - gdot_img[pix])
    one_m_d = np.exp(tape.log1mD)
    ds = (da * one_m_d + g_alpha[pix] * np.exp(tape.s_log[pix] + tape.logD)) / cfg.sigma

    # fragment color and depth
    d_color_frag = tape.w[:, None] * g_img[pix]             # (N, 3)
    dz = da / cfg.gamma
    dZ = np.where(tape.z_clamped, 0.0, -dz / (cam.z_far - cam.z_near))

    # --- shading backward -------------------------------------------------
    intensity = tape.intensity[fface]
    d_albedo = d_color_frag * intensity[:, None]
    corner_idx = mesh.faces[tape.gface]                     # (N, 3)
    corner_colors = mesh.colors[corner_idx]                 # (N, 3, 3)
    d_colors = _scatter_corners(tape.bary[:, :, None] * d_albedo[:, None, :],
                                corner_idx, nv)

    d_world_direct = np.zeros((nv, 3))
    if cfg.shading == "lit":
        d_int_face = np.bincount(
            fface, weights=np.einsum("nc,nc->n", d_color_frag, tape.albedo),
            minlength=tape.kept.shape[0])
        gate = tape.lit_active & tape.lit_interior & tape.normal_ok
        if np.any(gate):
            light = -np.asarray(cfg.light_dir, dtype=np.float64)
            light = light / np.linalg.norm(light)
            world_tri = tape.world[mesh.faces[tape.kept]]   # (K, 3, 3)
            e1 = world_tri[:, 1] - world_tri[:, 0]
            e2 = world_tri[:, 2] - world_tri[:, 0]
            nraw = np.cross(e1, e2)
            nlen = np.linalg.norm(nraw, axis=1)
            nlen_safe = np.where(tape.normal_ok, nlen, 1.0)
            nunit = nraw / nlen_safe[:, None]
            dnd = cfg.diffuse * d_int_face * gate
            dn = dnd[:, None] * light[None, :]
            # unit-normalization backward: (I - n n^T) / |n_raw|
            dnraw = (dn - nunit * np.einsum("kc,kc->k", nunit, dn)[:, None]) / nlen_safe[:, None]
            de1 = np.cross(e2, dnraw)
            de2 = np.cross(dnraw, e1)
            d_tri = np.stack([-de1 - de2, de1, de2], axis=1)  # (K, 3, 3)
            d_world_direct = _scatter_corners(d_tri, mesh.faces[tape.kept], nv)

    # --- interpolation backward -------------------------------------------
    # gradient on the clipped coordinates from albedo and depth
    face_z = tape.face_z[fface]                             # (N, 3)
    d_bary = np.einsum("nc,nkc->nk", d_albedo, corner_colors)
    d_bary += dZ[:, None] * face_z
    # through clip + renormalize
    csum = np.maximum(np.clip(tape.bary_raw, 0.0, 1.0).sum(axis=1), 1e-12)
    g_c = (d_bary - np.einsum("nk,nk->n", d_bary, tape.bary)[:, None]) / csum[:, None]
    interior = (tape.bary_raw > 0.0) & (tape.bary_raw < 1.0)
    d_braw = np.where(interior, g_c, 0.0)

    # the smallest-coordinate metric feeds the same raw-coordinate chain
    if cfg.metric == "barycentric":
        d_braw[np.arange(d_braw.shape[0]), tape.edge_state] += ds

    uinv = tape.uinv[fface]                                 # (N, 3, 3)
    h2 = np.einsum("nsk,ns->nk", uinv[:, :, 0:2], d_braw)   # (N, 2)
    d_uv_frag = -tape.bary_raw[:, :, None] * h2[:, None, :]  # (N, 3, 2)

    if cfg.metric == "euclidean":
        px_x = (2.0 * (np.arange(W) + 0.5) / W) - 1.0
        px_y = 1.0 - 2.0 * (np.arange(H) + 0.5) / H
        p = np.column_stack([px_x[pix % W], px_y[pix // W]])
        closest = np.einsum("nk,nkc->nc", tape.t_closest, tape.face_uv[fface])
        e = closest - p
        coef = (2.0 * ds * tape.delta)[:, None] * e          # (N, 2)
        d_uv_frag += tape.t_closest[:, :, None] * coef[:, None, :]

    d_uv_vertex = _scatter_corners(d_uv_frag, corner_idx, nv)          # (V, 2)
    d_depth_vertex = _scatter_corners(dZ[:, None] * tape.bary, corner_idx, nv)  # (V,)

    # --- projection and pose backward --------------------------------------
    d_world = np.einsum("vik,vi->vk", jac.uv_world, d_uv_vertex)
    d_world += jac.depth_world[None, :] * d_depth_vertex[:, None]
    d_world += d_world_direct

    d_quaternion = np.einsum("vik,vi->k", jac.world_quat, d_world)
    d_translation = d_world.sum(axis=0)
    d_model = d_world @ jac.world_model

    return GradientSet(
        d_vertices=d_world,
        d_displacements=d_model,
        d_colors=d_colors,
        d_quaternion=d_quaternion,
        d_translation=d_translation,
    )
