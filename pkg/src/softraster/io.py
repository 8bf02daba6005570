"""File formats: OBJ meshes (with the common vertex-color extension),
PNG images, and a flat JSON scene configuration."""

import json
from dataclasses import dataclass, asdict, fields

import numpy as np
from PIL import Image

from .camera import Camera
from .mesh import Mesh
from .render import RenderConfig


def load_obj(path):
    """Read a triangle mesh from a Wavefront OBJ file.

    Supports `v x y z` with an optional `r g b` color triple (all
    vertices must agree on whether colors are present; a colorless
    mesh gets a uniform 0.8 gray) and `f` faces with 1-based indices
    in any of the v, v/vt, v/vt/vn, v//vn forms; polygons are
    fan-triangulated.  Other directives are ignored.  Malformed lines
    raise ValueError naming the line number.
    """
    vertices, colors, faces = [], [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if tok[0] == "v":
                vals = tok[1:]
                if len(vals) not in (3, 6):
                    raise ValueError(
                        f"{path}:{lineno}: vertex needs 3 or 6 numbers, got {len(vals)}")
                try:
                    nums = [float(x) for x in vals]
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: non-numeric vertex data") from None
                vertices.append(nums[:3])
                colors.append(nums[3:] if len(nums) == 6 else None)
            elif tok[0] == "f":
                if len(tok) < 4:
                    raise ValueError(f"{path}:{lineno}: face needs at least 3 vertices")
                idx = []
                for part in tok[1:]:
                    head = part.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise ValueError(f"{path}:{lineno}: bad face index {part!r}") from None
                    if i < 1:
                        raise ValueError(
                            f"{path}:{lineno}: only positive 1-based indices are supported")
                    idx.append(i - 1)
                for a, b in zip(idx[1:], idx[2:]):
                    faces.append((idx[0], a, b))
    if not vertices:
        raise ValueError(f"{path}: no vertices found")
    has_color = [c is not None for c in colors]
    if any(has_color) and not all(has_color):
        first = has_color.index(False) if has_color[0] else has_color.index(True)
        raise ValueError(f"{path}: vertex colors must be given for all vertices or none "
                         f"(vertex {first + 1} disagrees)")
    if all(has_color):
        color_arr = np.array(colors, dtype=np.float64)
    else:
        color_arr = np.full((len(vertices), 3), 0.8)
    return Mesh(np.array(vertices), np.array(faces, dtype=np.int64), color_arr)


def save_obj(path, mesh):
    """Write a mesh as OBJ with per-vertex colors appended to v lines."""
    with open(path, "w") as fh:
        for v, c in zip(mesh.vertices, mesh.colors):
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g} "
                     f"{c[0]:.9g} {c[1]:.9g} {c[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def _to_u8(channel):
    # round half away from zero, like a hardware quantizer
    return np.floor(np.clip(channel, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, image, alpha=None):
    """Save a float image in [0, 1] as an 8-bit PNG.  Row 0 is the top
    row.  `image` is (H, W, 3), or (H, W, 4) with alpha fused in; a
    separate (H, W) `alpha` channel may be given instead."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[2] == 4:
        if alpha is not None:
            raise ValueError("give alpha either fused or separately, not both")
        image, alpha = image[:, :, :3], image[:, :, 3]
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3) or (H, W, 4), got {image.shape}")
    rgb = _to_u8(image)
    if alpha is not None:
        alpha = np.asarray(alpha, dtype=np.float64)
        if alpha.shape != image.shape[:2]:
            raise ValueError(f"alpha must be {image.shape[:2]}, got {alpha.shape}")
        data = np.concatenate([rgb, _to_u8(alpha)[:, :, None]], axis=2)
        Image.fromarray(data, mode="RGBA").save(path, format="PNG")
    else:
        Image.fromarray(rgb, mode="RGB").save(path, format="PNG")


def read_png(path):
    """Load a PNG as float arrays in [0, 1]: (image, alpha or None)."""
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        return np.stack([arr] * 3, axis=2), None
    if arr.shape[2] == 4:
        return arr[:, :, :3], arr[:, :, 3]
    return arr[:, :, :3], None


@dataclass
class SceneConfig:
    """Flat, JSON-serializable bundle of render and camera settings.

    Precedence when assembling from the command line: explicit flags
    beat file values, file values beat these defaults.
    """
    width: int = 64
    height: int = 64
    sigma: float = 1e-4
    gamma: float = 1e-4
    epsilon: float = 0.0
    background: tuple = (0.0, 0.0, 0.0)
    metric: str = "euclidean"
    shading: str = "flat"
    light_dir: tuple = (0.0, 0.0, -1.0)
    ambient: float = 0.3
    diffuse: float = 0.7
    cutoff: float | None = 0.01
    eye: tuple = (0.0, 0.0, 3.2)
    target: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 1.0, 0.0)
    fov_deg: float = 45.0
    aspect: float = 1.0
    z_near: float = 1.0
    z_far: float = 100.0

    def __post_init__(self):
        # JSON has no tuples; normalize so round-tripped configs compare equal
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(v))

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def from_file(cls, path, overrides=None):
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a flat JSON object")
        known = set(cls.field_names())
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"{path}: unknown config keys: {', '.join(unknown)}")
        cfg = cls(**data)
        if overrides:
            cfg = cfg.updated(overrides)
        return cfg

    def updated(self, overrides):
        """New config with non-None override values applied."""
        data = asdict(self)
        for k, v in overrides.items():
            if v is None:
                continue
            if k not in data:
                raise ValueError(f"unknown config key {k!r}")
            data[k] = v
        return SceneConfig(**data)

    def to_file(self, path):
        data = asdict(self)
        for k, v in data.items():
            if isinstance(v, tuple):
                data[k] = list(v)
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def render_config(self, keep_tape=True):
        return RenderConfig(
            width=self.width, height=self.height, sigma=self.sigma,
            gamma=self.gamma, epsilon=self.epsilon,
            background=tuple(self.background), metric=self.metric,
            shading=self.shading, light_dir=tuple(self.light_dir),
            ambient=self.ambient, diffuse=self.diffuse,
            cutoff=self.cutoff, keep_tape=keep_tape)

    def camera(self):
        return Camera(eye=self.eye, target=self.target, up=self.up,
                      fov_y=np.deg2rad(self.fov_deg), aspect=self.aspect,
                      z_near=self.z_near, z_far=self.z_far)
