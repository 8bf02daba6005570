"""Soft rasterization forward pass.

Every triangle is turned into a per-pixel coverage probability
D = sigmoid(s / sigma), where s is a signed screen-space distance
(positive inside the triangle).  Fragments from all triangles are then
fused per pixel: colors through a depth softmax with temperature gamma
against a fixed background pseudo-fragment, and the silhouette through
the complement product 1 - prod(1 - D).

All per-pixel math runs in log space so extreme sigma / gamma values
(the hard-rasterizer limit, or the blurry start of an annealing
schedule) neither overflow nor collapse.  The forward pass records a
flat fragment tape with everything the analytic backward pass needs;
fragments are generated face by face in index order and reduced with
sequential accumulators, so results are bit-reproducible.
"""

from dataclasses import dataclass, field

import numpy as np

from .camera import Pose, project


@dataclass
class RenderConfig:
    width: int = 64
    height: int = 64
    sigma: float = 1e-4
    gamma: float = 1e-4
    # exponent of the background pseudo-fragment in the depth softmax;
    # 0 puts it at the far plane
    epsilon: float = 0.0
    background: tuple = (0.0, 0.0, 0.0)
    metric: str = "euclidean"      # or "barycentric"
    shading: str = "flat"          # or "lit"
    light_dir: tuple = (0.0, 0.0, -1.0)
    ambient: float = 0.3
    diffuse: float = 0.7
    # drop fragments whose coverage probability is below this; None
    # rasterizes every (face, pixel) pair
    cutoff: float | None = 0.01
    keep_tape: bool = True

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if self.sigma <= 0.0 or self.gamma <= 0.0:
            raise ValueError("sigma and gamma must be positive")
        if self.metric not in ("euclidean", "barycentric"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.shading not in ("flat", "lit"):
            raise ValueError(f"unknown shading {self.shading!r}")
        if self.cutoff is not None and not 0.0 < self.cutoff < 0.5:
            raise ValueError("cutoff must lie in (0, 0.5) or be None")
        if not 0.0 <= self.ambient <= 1.0 or not 0.0 <= self.diffuse <= 1.0:
            raise ValueError("ambient and diffuse must lie in [0, 1]")
        if self.ambient + self.diffuse > 1.0:
            raise ValueError("ambient + diffuse must not exceed 1")
        bg = np.asarray(self.background, dtype=np.float64)
        if bg.shape != (3,) or bg.min() < 0.0 or bg.max() > 1.0:
            raise ValueError("background must be an RGB triple in [0, 1]")


@dataclass
class FragmentBuffer:
    """Forward tape: per-face, per-fragment, and per-pixel intermediates.

    Fragment arrays are flat and sorted by (face, pixel row-major);
    `pix` holds row-major pixel indices, `fface` indexes the kept-face
    arrays and `gface` the original mesh faces.
    """
    mesh: object
    pose: object
    camera: object
    config: RenderConfig
    # per mesh vertex
    uv: np.ndarray
    depth: np.ndarray
    world: np.ndarray
    # per kept face
    kept: np.ndarray          # (K,) original face indices
    face_uv: np.ndarray       # (K, 3, 2)
    face_z: np.ndarray        # (K, 3) view depths
    uinv: np.ndarray          # (K, 3, 3)
    intensity: np.ndarray     # (K,)
    lit_active: np.ndarray    # (K,) bool, diffuse term gate
    lit_interior: np.ndarray  # (K,) bool, intensity clamp gate
    normal_ok: np.ndarray     # (K,) bool
    # per fragment
    pix: np.ndarray
    fface: np.ndarray
    gface: np.ndarray
    bary_raw: np.ndarray
    bary: np.ndarray          # clipped + renormalized
    sdist: np.ndarray
    logD: np.ndarray
    log1mD: np.ndarray
    D: np.ndarray
    z: np.ndarray             # normalized fragment depth in [0, 1]
    z_clamped: np.ndarray     # bool, view depth hit near/far clamp
    albedo: np.ndarray        # (N, 3) interpolated vertex color
    color: np.ndarray         # (N, 3) after shading
    w: np.ndarray             # softmax weight
    delta: np.ndarray         # +1 inside / -1 outside (euclidean)
    t_closest: np.ndarray     # (N, 3) boundary point barycentric (euclidean)
    edge_state: np.ndarray    # (N,) int regime id of the distance argmin
    # per pixel (flat, H*W)
    image: np.ndarray
    alpha: np.ndarray
    s_log: np.ndarray         # sum of log(1 - D)
    w_b: np.ndarray
    shift: np.ndarray         # per-pixel max exponent
    denom: np.ndarray

    def n_fragments(self):
        return self.pix.shape[0]


@dataclass
class RenderOutput:
    image: np.ndarray   # (H, W, 3)
    alpha: np.ndarray   # (H, W)
    tape: FragmentBuffer | None = None


# ---------------------------------------------------------------------------
# building blocks


def signed_distance(points, tri_uv, metric, uinv=None):
    """Signed screen-space distance of points to one projected triangle.

    points : (N, 2), tri_uv : (3, 2).

    euclidean   : +d^2 inside / -d^2 outside, d the distance to the
                  nearest boundary segment.
    barycentric : the smallest (affine) barycentric coordinate, which
                  is negative outside and has no squaring.

    Returns (sdist, aux) where aux carries what the backward pass and
    the regime bookkeeping need: for "euclidean" the boundary-point
    barycentric `t`, the inside sign `delta`, and an `edge_state` id
    encoding which segment won and whether its endpoint clamped; for
    "barycentric" the raw coordinates and the argmin index.
    """
    points = np.asarray(points, dtype=np.float64)
    tri_uv = np.asarray(tri_uv, dtype=np.float64)
    if uinv is None:
        u3 = np.vstack([tri_uv.T, np.ones(3)])
        uinv = np.linalg.inv(u3)
    ph = np.column_stack([points, np.ones(points.shape[0])])
    bary_raw = ph @ uinv.T

    if metric == "barycentric":
        s = np.argmin(bary_raw, axis=1)
        sdist = bary_raw[np.arange(points.shape[0]), s]
        return sdist, {"bary_raw": bary_raw, "argmin": s, "edge_state": s}

    # distance to each boundary segment
    n = points.shape[0]
    d2 = np.empty((n, 3))
    sparam = np.empty((n, 3))
    for k in range(3):
        a = tri_uv[k]
        b = tri_uv[(k + 1) % 3]
        ab = b - a
        denom = max(float(ab @ ab), 1e-30)
        s = ((points - a) @ ab) / denom
        s = np.clip(s, 0.0, 1.0)
        closest = a + s[:, None] * ab
        diff = points - closest
        d2[:, k] = np.einsum("ij,ij->i", diff, diff)
        sparam[:, k] = s
    edge = np.argmin(d2, axis=1)
    rows = np.arange(n)
    dmin = d2[rows, edge]
    s_win = sparam[rows, edge]
    t = np.zeros((n, 3))
    t[rows, edge] = 1.0 - s_win
    t[rows, (edge + 1) % 3] = s_win
    inside = np.all(bary_raw >= 0.0, axis=1)
    delta = np.where(inside, 1.0, -1.0)
    sdist = delta * dmin
    # regime id: the closest boundary feature.  Corners get their own
    # id (0..2) rather than an (edge, endpoint) pair, because the two
    # edges meeting at a corner tie in distance there and the argmin
    # between them is floating-point noise, while the distance function
    # itself is one smooth thing; edge interiors map to 3..5.
    edge_state = np.where(s_win <= 0.0, edge,
                          np.where(s_win >= 1.0, (edge + 1) % 3, edge + 3))
    return sdist, {
        "bary_raw": bary_raw,
        "t": t,
        "delta": delta,
        "edge_state": edge_state,
    }


def probability(sdist, sigma):
    """Coverage probability sigmoid(sdist / sigma), stable for any ratio."""
    logd, _ = _log_prob(np.asarray(sdist, dtype=np.float64) / sigma)
    return np.exp(logd)


def _log_prob(x):
    """(log sigmoid(x), log sigmoid(-x)) without cancellation."""
    zeros = np.zeros_like(x)
    return -np.logaddexp(zeros, -x), -np.logaddexp(zeros, x)


def clipped_barycentric(bary_raw):
    """Clip raw barycentric coordinates to [0, 1] and renormalize.

    Keeps interpolation inside the triangle's value hull even for
    fragments outside the footprint.  Returns (bary, interior) where
    interior marks coordinates that escaped clipping (the only ones a
    gradient can flow through).
    """
    c = np.clip(bary_raw, 0.0, 1.0)
    s = c.sum(axis=-1, keepdims=True)
    # raw coordinates sum to 1, so at least one entry survives clipping
    # for any finite pixel; guard the impossible all-zero case anyway
    dead = s[..., 0] < 1e-12
    if np.any(dead):
        c = np.where(dead[..., None], 1.0 / 3.0, c)
        s = np.where(dead[..., None], 1.0, s)
    interior = (bary_raw > 0.0) & (bary_raw < 1.0)
    return c / s, interior


def normalize_depth(z_view, z_near, z_far):
    """Map view depth to [0, 1] with 1 at the near plane, clamping first."""
    z = np.clip(z_view, z_near, z_far)
    return (z_far - z) / (z_far - z_near)


def shade(albedo, normals, config):
    """Apply the shading model to interpolated albedo.

    flat : color = albedo.
    lit  : color = albedo * clamp(ambient + diffuse * max(0, n . l), 0, 1)
           with l the unit vector pointing toward the light.

    `normals` is (..., 3) matching albedo rows.  Returns (color,
    intensity).
    """
    albedo = np.asarray(albedo, dtype=np.float64)
    if config.shading == "flat":
        intensity = np.ones(albedo.shape[:-1])
        return albedo.copy(), intensity
    light = -np.asarray(config.light_dir, dtype=np.float64)
    ln = np.linalg.norm(light)
    if ln < 1e-12:
        raise ValueError("light_dir is numerically zero")
    light = light / ln
    ndotl = np.maximum(np.asarray(normals) @ light, 0.0)
    intensity = np.clip(config.ambient + config.diffuse * ndotl, 0.0, 1.0)
    return albedo * intensity[..., None], intensity


# ---------------------------------------------------------------------------
# aggregation


def aggregate_softmax(pix, logD, z, colors, n_pixels, gamma, epsilon, background):
    """Depth-softmax color fusion against a background pseudo-fragment.

    Fragment j at pixel i gets weight
        w_j = D_j exp(z_j / gamma) / (sum_k D_k exp(z_k / gamma) + exp(eps / gamma))
    computed via a per-pixel max shift, so the weights sum to one by
    construction.  Returns (image, w, w_b, shift, denom) with image
    (n_pixels, 3).
    """
    background = np.asarray(background, dtype=np.float64)
    a_b = epsilon / gamma
    a = logD + z / gamma
    shift = np.full(n_pixels, a_b)
    np.maximum.at(shift, pix, a)
    wt = np.exp(a - shift[pix])
    denom = np.exp(a_b - shift) + np.bincount(pix, weights=wt, minlength=n_pixels)
    w = wt / denom[pix]
    w_b = np.exp(a_b - shift) / denom
    image = np.empty((n_pixels, 3))
    for c in range(3):
        image[:, c] = np.bincount(pix, weights=w * colors[:, c], minlength=n_pixels)
        image[:, c] += w_b * background[c]
    return image, w, w_b, shift, denom


def aggregate_silhouette(pix, log1mD, n_pixels):
    """Occupancy alpha = 1 - prod_j (1 - D_j), accumulated in log space.

    Returns (alpha, s_log) where s_log = sum_j log(1 - D_j) per pixel;
    the log-space form survives thousands of fragments and D values
    within one ulp of 1.
    """
    s_log = np.bincount(pix, weights=log1mD, minlength=n_pixels)
    return -np.expm1(s_log), s_log


# ---------------------------------------------------------------------------
# the forward pass


def render(mesh, camera, config=None, pose=None):
    """Render a mesh; returns RenderOutput with an (H, W, 3) image in
    [0, 1], an (H, W) silhouette alpha, and (unless disabled) the
    fragment tape consumed by `softraster.gradients.backward`."""
    if config is None:
        config = RenderConfig()
    if pose is None:
        pose = Pose()
    W, H = config.width, config.height
    n_px = W * H

    sv = project(mesh.vertices, pose, camera)
    f_idx = mesh.faces
    tri_depth = sv.depth[f_idx]                     # (F, 3)
    in_front = np.all(tri_depth >= camera.z_near, axis=1)

    tri_uv = sv.uv[f_idx]                           # (F, 3, 2)
    # twice the signed screen area; degenerate projections are dropped
    e1 = tri_uv[:, 1] - tri_uv[:, 0]
    e2 = tri_uv[:, 2] - tri_uv[:, 0]
    area2 = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    kept = np.nonzero(in_front & (np.abs(area2) > 1e-12))[0]

    face_uv = tri_uv[kept]
    face_z = tri_depth[kept]
    k = kept.shape[0]
    u3 = np.empty((k, 3, 3))
    u3[:, 0, :] = face_uv[:, :, 0]
    u3[:, 1, :] = face_uv[:, :, 1]
    u3[:, 2, :] = 1.0
    uinv = np.linalg.inv(u3) if k else np.zeros((0, 3, 3))

    # per-face shading intensity (normals are flat, light is constant)
    world_tri = sv.world[f_idx[kept]]
    nraw = np.cross(world_tri[:, 1] - world_tri[:, 0], world_tri[:, 2] - world_tri[:, 0])
    nlen = np.linalg.norm(nraw, axis=1)
    normal_ok = nlen > 1e-12
    normals = np.where(normal_ok[:, None], nraw / np.where(normal_ok, nlen, 1.0)[:, None], 0.0)
    if config.shading == "lit":
        light = -np.asarray(config.light_dir, dtype=np.float64)
        light = light / np.linalg.norm(light)
        ndotl = normals @ light
        lit_active = ndotl > 0.0
        pre = config.ambient + config.diffuse * np.maximum(ndotl, 0.0)
        lit_interior = (pre > 0.0) & (pre < 1.0)
        intensity = np.clip(pre, 0.0, 1.0)
    else:
        intensity = np.ones(k)
        lit_active = np.zeros(k, dtype=bool)
        lit_interior = np.zeros(k, dtype=bool)

    # candidate pixels per face, then the fragment filter
    if config.cutoff is not None:
        logit_tau = np.log(config.cutoff) - np.log1p(-config.cutoff)
        s_thresh = config.sigma * logit_tau          # negative
    else:
        logit_tau = None
        s_thresh = None

    px_x = (2.0 * (np.arange(W) + 0.5) / W) - 1.0
    px_y = 1.0 - 2.0 * (np.arange(H) + 0.5) / H

    frag_pix, frag_face = [], []
    frag_sdist, frag_braw = [], []
    frag_t, frag_delta, frag_state = [], [], []
    for fi in range(k):
        if config.cutoff is None:
            cols = np.arange(W)
            rows = np.arange(H)
        else:
            if config.metric == "euclidean":
                r_ndc = np.sqrt(-s_thresh)
            else:
                grad = np.linalg.norm(uinv[fi, :, 0:2], axis=1)
                r_ndc = -s_thresh / max(grad.min(), 1e-12)
            lo = face_uv[fi].min(axis=0) - r_ndc
            hi = face_uv[fi].max(axis=0) + r_ndc
            c0 = max(int(np.ceil((lo[0] + 1.0) * W / 2.0 - 0.5)), 0)
            c1 = min(int(np.floor((hi[0] + 1.0) * W / 2.0 - 0.5)), W - 1)
            # +y is up, so the row range comes from uv_y flipped
            r0 = max(int(np.ceil((1.0 - hi[1]) * H / 2.0 - 0.5)), 0)
            r1 = min(int(np.floor((1.0 - lo[1]) * H / 2.0 - 0.5)), H - 1)
            if c0 > c1 or r0 > r1:
                continue
            cols = np.arange(c0, c1 + 1)
            rows = np.arange(r0, r1 + 1)
        pts = np.empty((rows.shape[0] * cols.shape[0], 2))
        pts[:, 0] = np.tile(px_x[cols], rows.shape[0])
        pts[:, 1] = np.repeat(px_y[rows], cols.shape[0])
        sdist, aux = signed_distance(pts, face_uv[fi], config.metric, uinv=uinv[fi])
        if config.cutoff is not None:
            keep = sdist >= s_thresh
            if not np.any(keep):
                continue
        else:
            keep = slice(None)
        pixids = (np.repeat(rows, cols.shape[0]) * W + np.tile(cols, rows.shape[0]))[keep]
        frag_pix.append(pixids)
        frag_face.append(np.full(pixids.shape[0], fi, dtype=np.int64))
        frag_sdist.append(sdist[keep])
        frag_braw.append(aux["bary_raw"][keep])
        frag_state.append(aux["edge_state"][keep])
        if config.metric == "euclidean":
            frag_t.append(aux["t"][keep])
            frag_delta.append(aux["delta"][keep])

    if frag_pix:
        pix = np.concatenate(frag_pix)
        fface = np.concatenate(frag_face)
        sdist = np.concatenate(frag_sdist)
        bary_raw = np.concatenate(frag_braw, axis=0)
        edge_state = np.concatenate(frag_state)
        if config.metric == "euclidean":
            t_closest = np.concatenate(frag_t, axis=0)
            delta = np.concatenate(frag_delta)
        else:
            t_closest = np.zeros((pix.shape[0], 3))
            delta = np.ones(pix.shape[0])
    else:
        pix = np.zeros(0, dtype=np.int64)
        fface = np.zeros(0, dtype=np.int64)
        sdist = np.zeros(0)
        bary_raw = np.zeros((0, 3))
        edge_state = np.zeros(0, dtype=np.int64)
        t_closest = np.zeros((0, 3))
        delta = np.zeros(0)

    logD, log1mD = _log_prob(sdist / config.sigma)
    D = np.exp(logD)

    bary, _interior = clipped_barycentric(bary_raw)
    z_view = np.einsum("nk,nk->n", bary, face_z[fface]) if pix.size else np.zeros(0)
    z_clamped = (z_view < camera.z_near) | (z_view > camera.z_far)
    z = normalize_depth(z_view, camera.z_near, camera.z_far)

    corner_colors = mesh.colors[f_idx[kept[fface]]] if pix.size else np.zeros((0, 3, 3))
    albedo = np.einsum("nk,nkc->nc", bary, corner_colors) if pix.size else np.zeros((0, 3))
    color = albedo * intensity[fface][:, None] if pix.size else np.zeros((0, 3))

    image_flat, w, w_b, shift, denom = aggregate_softmax(
        pix, logD, z, color, n_px, config.gamma, config.epsilon, config.background)
    alpha_flat, s_log = aggregate_silhouette(pix, log1mD, n_px)

    tape = None
    if config.keep_tape:
        tape = FragmentBuffer(
            mesh=mesh, pose=pose, camera=camera, config=config,
            uv=sv.uv, depth=sv.depth, world=sv.world,
            kept=kept, face_uv=face_uv, face_z=face_z, uinv=uinv,
            intensity=intensity, lit_active=lit_active,
            lit_interior=lit_interior, normal_ok=normal_ok,
            pix=pix, fface=fface, gface=kept[fface] if pix.size else np.zeros(0, dtype=np.int64),
            bary_raw=bary_raw, bary=bary, sdist=sdist,
            logD=logD, log1mD=log1mD, D=D, z=z, z_clamped=z_clamped,
            albedo=albedo, color=color, w=w,
            delta=delta, t_closest=t_closest, edge_state=edge_state,
            image=image_flat, alpha=alpha_flat, s_log=s_log,
            w_b=w_b, shift=shift, denom=denom,
        )
    return RenderOutput(
        image=image_flat.reshape(H, W, 3),
        alpha=alpha_flat.reshape(H, W),
        tape=tape,
    )
