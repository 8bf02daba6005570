"""Image and regularization losses, each returning its gradient too.

Every loss comes back as (value, gradient) so the fitting loops can
feed the gradients straight into the renderer's backward pass without
a second evaluation.
"""

from dataclasses import dataclass

import numpy as np

from .mesh import uniform_laplacian


@dataclass
class LossWeights:
    """Coefficients of the combined objective
    L = L_silhouette + lambda_color * L_color + mu_laplacian * L_smooth."""
    lambda_color: float = 1.0
    mu_laplacian: float = 1e-3


def silhouette_iou_loss(pred_alpha, target_alpha):
    """1 - intersection-over-union of two soft masks.

    loss = 1 - |A * B|_1 / |A + B - A * B|_1, zero when the masks agree
    and one when they are disjoint.  Returns (loss, d_pred).
    """
    a = np.asarray(pred_alpha, dtype=np.float64)
    b = np.asarray(target_alpha, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    prod = a * b
    inter = prod.sum()
    union = (a + b - prod).sum()
    if union < 1e-12:
        return 0.0, np.zeros_like(a)
    loss = 1.0 - inter / union
    d_pred = -(b * union - inter * (1.0 - b)) / union ** 2
    return float(loss), d_pred


def color_l1_loss(pred, target):
    """Mean absolute difference; the gradient is sign / count."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"image shapes differ: {p.shape} vs {t.shape}")
    diff = p - t
    loss = float(np.mean(np.abs(diff)))
    return loss, np.sign(diff) / diff.size


def laplacian_loss(mesh, values=None):
    """Mean squared norm of the uniform Laplacian of per-vertex values.

    Defaults to the vertex positions.  With delta = M values, the loss
    is mean_i |delta_i|^2 and the gradient is (2 / V) M^T M values; the
    transpose apply reuses the same 1-ring as the forward operator.
    """
    if values is None:
        values = mesh.vertices
    values = np.asarray(values, dtype=np.float64)
    squeeze = values.ndim == 1
    if squeeze:
        values = values[:, None]
    nv = mesh.num_vertices
    delta = uniform_laplacian(mesh, values)
    loss = float(np.sum(delta * delta) / nv)

    # M^T u where M = A - I with A the degree-normalized adjacency:
    # (M^T u)_j = sum_{i in N(j)} u_i / deg_i - u_j
    edges, degree = mesh.vertex_neighbors()
    deg = np.maximum(degree, 1).astype(np.float64)
    scaled = delta / deg[:, None]
    mt = np.zeros_like(delta)
    for c in range(delta.shape[1]):
        mt[:, c] = np.bincount(edges[:, 0], weights=scaled[edges[:, 1], c],
                               minlength=nv)
    mt -= delta
    mt[degree == 0] = 0.0
    grad = 2.0 * mt / nv
    return loss, (grad[:, 0] if squeeze else grad)


def total_loss(pred_image, pred_alpha, target_image, target_alpha, mesh,
               weights=None, colors=None):
    """Combined objective for shape-and-color fitting.

    L = L_iou(alpha) + lambda * L1(image) + mu * (smooth(vertices) +
    smooth(colors)).  Returns (loss, d_image, d_alpha, d_vertices,
    d_colors, parts) where parts breaks the total down by term.
    `colors` defaults to the mesh's own colors.
    """
    if weights is None:
        weights = LossWeights()
    if colors is None:
        colors = mesh.colors
    l_s, d_alpha = silhouette_iou_loss(pred_alpha, target_alpha)
    l_c, d_image = color_l1_loss(pred_image, target_image)
    l_gv, d_vertices = laplacian_loss(mesh)
    l_gc, d_colors = laplacian_loss(mesh, colors)
    lam, mu = weights.lambda_color, weights.mu_laplacian
    loss = l_s + lam * l_c + mu * (l_gv + l_gc)
    parts = {"silhouette": l_s, "color": l_c,
             "smooth_vertices": l_gv, "smooth_colors": l_gc}
    return (loss, lam * d_image, d_alpha,
            mu * d_vertices, mu * d_colors, parts)
