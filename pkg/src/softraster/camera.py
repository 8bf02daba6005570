"""Pinhole camera, rigid pose, and the projection Jacobians.

The convention throughout: world space is right handed, the camera
looks from `eye` toward `target` with `up` fixing the roll, and view
depth is the distance along the forward axis (positive in front of the
camera).  Projected coordinates live in the normalized square
[-1, 1]^2 with +x right and +y up; the raster grid maps pixel centers
into that square.

Poses are a quaternion (w, x, y, z) plus a translation.  The quaternion
is normalized on use rather than on construction, so optimizers can
treat all four components as free parameters; the normalization
Jacobian is folded into `project_jacobians`.
"""

import numpy as np


class Pose:
    """Rigid transform v_world = R(q / |q|) @ v_model + t."""

    def __init__(self, quaternion=(1.0, 0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0)):
        q = np.asarray(quaternion, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64)
        if q.shape != (4,):
            raise ValueError(f"quaternion must have shape (4,), got {q.shape}")
        if t.shape != (3,):
            raise ValueError(f"translation must have shape (3,), got {t.shape}")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if np.linalg.norm(q) < 1e-12:
            raise ValueError("quaternion norm is numerically zero")
        self.quaternion = q.copy()
        self.translation = t.copy()

    def normalized_quaternion(self):
        return self.quaternion / np.linalg.norm(self.quaternion)

    def rotation_matrix(self):
        return quat_to_matrix(self.normalized_quaternion())

    def apply(self, points):
        """Transform (N, 3) model-space points to world space."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation_matrix().T + self.translation


class Camera:
    """Look-at pinhole camera with a vertical field of view in radians."""

    def __init__(self, eye=(0.0, 0.0, 3.2), target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0),
                 fov_y=np.deg2rad(45.0), aspect=1.0, z_near=1.0, z_far=100.0):
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        if eye.shape != (3,) or target.shape != (3,) or up.shape != (3,):
            raise ValueError("eye, target, up must have shape (3,)")
        if not 0.0 < fov_y < np.pi:
            raise ValueError("fov_y must lie in (0, pi)")
        if z_near <= 0.0 or z_far <= z_near:
            raise ValueError("need 0 < z_near < z_far")
        if aspect <= 0.0:
            raise ValueError("aspect must be positive")
        forward = target - eye
        fn = np.linalg.norm(forward)
        if fn < 1e-12:
            raise ValueError("eye and target coincide")
        forward = forward / fn
        right = np.cross(forward, up)
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            raise ValueError("up is parallel to the view direction")
        self.eye = eye
        self.target = target
        self.up = up
        self.fov_y = float(fov_y)
        self.aspect = float(aspect)
        self.z_near = float(z_near)
        self.z_far = float(z_far)
        self.forward = forward
        self.right = right / rn
        self.true_up = np.cross(self.right, forward)

    def basis(self):
        """(right, up, forward) orthonormal rows."""
        return self.right, self.true_up, self.forward


class ScreenVertex:
    """Projection result: uv in [-1,1]^2 (unclipped), view depth, world position."""

    def __init__(self, uv, depth, world):
        self.uv = uv
        self.depth = depth
        self.world = world


def project(vertices, pose, camera):
    """Project model-space vertices through a pose and camera.

    Vertices at or behind the eye plane get a sentinel depth and a
    zeroed uv; callers are expected to drop faces that touch them (the
    renderer drops any face with a vertex closer than z_near).
    """
    world = pose.apply(vertices)
    r, u, f = camera.basis()
    rel = world - camera.eye
    depth = rel @ f
    x_v = rel @ r
    y_v = rel @ u
    safe = np.where(depth > 1e-12, depth, 1.0)
    half_h = np.tan(camera.fov_y / 2.0)
    uv = np.empty((world.shape[0], 2))
    uv[:, 0] = x_v / (safe * half_h * camera.aspect)
    uv[:, 1] = y_v / (safe * half_h)
    bad = depth <= 1e-12
    uv[bad] = 0.0
    return ScreenVertex(uv, depth, world)


class ProjectionJacobians:
    """Analytic derivative blocks for one projection.

    uv_world    : (V, 2, 3)  d uv / d world position
    depth_world : (3,)       d view depth / d world position (same for all)
    world_quat  : (V, 3, 4)  d world / d raw quaternion (normalization included)
    world_model : (3, 3)     d world / d model position, i.e. R(q / |q|)
    """

    def __init__(self, uv_world, depth_world, world_quat, world_model):
        self.uv_world = uv_world
        self.depth_world = depth_world
        self.world_quat = world_quat
        self.world_model = world_model


def project_jacobians(vertices, pose, camera):
    vertices = np.asarray(vertices, dtype=np.float64)
    q = pose.quaternion
    qn = np.linalg.norm(q)
    qh = q / qn
    rot = quat_to_matrix(qh)
    world = vertices @ rot.T + pose.translation

    r, u, f = camera.basis()
    rel = world - camera.eye
    depth = rel @ f
    x_v = rel @ r
    y_v = rel @ u
    half_h = np.tan(camera.fov_y / 2.0)
    sx = half_h * camera.aspect
    sy = half_h
    safe = np.where(np.abs(depth) > 1e-12, depth, 1.0)

    # uv_x = (rel.r) / (sx * depth): quotient rule against world position
    n = vertices.shape[0]
    uv_world = np.empty((n, 2, 3))
    uv_world[:, 0, :] = (r[None, :] - (x_v / safe)[:, None] * f[None, :]) / (sx * safe[:, None])
    uv_world[:, 1, :] = (u[None, :] - (y_v / safe)[:, None] * f[None, :]) / (sy * safe[:, None])
    uv_world[np.abs(depth) <= 1e-12] = 0.0

    # d(R(qh) v)/d qh for unit qh = (w, ux, uy, uz):
    #   R v = (w^2 - u.u) v + 2 (u.v) u + 2 w (u x v)
    w = qh[0]
    uvec = qh[1:]
    cross_uv = np.cross(np.broadcast_to(uvec, (n, 3)), vertices)
    j_unit = np.empty((n, 3, 4))
    j_unit[:, :, 0] = 2.0 * w * vertices + 2.0 * cross_uv
    udotv = vertices @ uvec
    eye3 = np.eye(3)
    vx = _cross_matrices(vertices)  # (n, 3, 3), [v]_x per vertex
    j_unit[:, :, 1:] = 2.0 * (
        -vertices[:, :, None] * uvec[None, None, :]
        + uvec[None, :, None] * vertices[:, None, :]
        + udotv[:, None, None] * eye3[None, :, :]
        - w * vx
    )
    # chain through qh = q / |q|: d qh / d q = (I - qh qh^T) / |q|
    norm_jac = (np.eye(4) - np.outer(qh, qh)) / qn
    world_quat = j_unit @ norm_jac

    return ProjectionJacobians(uv_world, f.copy(), world_quat, rot)


def _cross_matrices(v):
    """Stack of skew-symmetric matrices [v]_x such that [v]_x w = v x w."""
    n = v.shape[0]
    m = np.zeros((n, 3, 3))
    m[:, 0, 1] = -v[:, 2]
    m[:, 0, 2] = v[:, 1]
    m[:, 1, 0] = v[:, 2]
    m[:, 1, 2] = -v[:, 0]
    m[:, 2, 0] = -v[:, 1]
    m[:, 2, 1] = v[:, 0]
    return m


# ---------------------------------------------------------------------------
# quaternion helpers


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        raise ValueError("axis is numerically zero")
    axis = axis / norm
    half = angle / 2.0
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def random_rotation_quaternion(rng):
    """Uniform random rotation: normalized 4-vector of standard normals."""
    q = rng.standard_normal(4)
    return q / np.linalg.norm(q)


def rotation_geodesic_angle(q1, q2):
    """Relative rotation angle between two quaternions, in [0, pi].

    Both inputs are normalized first; the absolute value of the dot
    product removes the double-cover sign ambiguity.
    """
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    d = abs(np.dot(q1 / np.linalg.norm(q1), q2 / np.linalg.norm(q2)))
    return 2.0 * np.arccos(min(d, 1.0))
