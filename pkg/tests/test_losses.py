import numpy as np
import pytest

from softraster import (LossWeights, color_l1_loss, laplacian_loss, make_ico_sphere,
                        silhouette_iou_loss, total_loss)
from softraster.mesh import Mesh


def test_iou_identical_binary_masks():
    rng = np.random.default_rng(0)
    mask = (rng.uniform(0.0, 1.0, size=(16, 16)) > 0.5).astype(np.float64)
    loss, grad = silhouette_iou_loss(mask, mask.copy())
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert grad.shape == mask.shape
    # identical soft masks are not a zero of the loss: intersection
    # a*a stays below union 2a - a*a wherever a is fractional
    soft = rng.uniform(0.1, 0.9, size=(16, 16))
    loss_soft, _ = silhouette_iou_loss(soft, soft.copy())
    assert loss_soft > 0.0


def test_iou_disjoint_masks():
    a = np.zeros((8, 8))
    b = np.zeros((8, 8))
    a[:4] = 1.0
    b[4:] = 1.0
    loss, _ = silhouette_iou_loss(a, b)
    assert loss == pytest.approx(1.0, abs=1e-12)


def test_iou_range_and_symmetry():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a = rng.uniform(0.0, 1.0, size=(6, 6))
        b = rng.uniform(0.0, 1.0, size=(6, 6))
        l_ab, _ = silhouette_iou_loss(a, b)
        l_ba, _ = silhouette_iou_loss(b, a)
        assert 0.0 <= l_ab <= 1.0
        assert l_ab == pytest.approx(l_ba, abs=1e-12)


def test_iou_empty_masks():
    loss, grad = silhouette_iou_loss(np.zeros((4, 4)), np.zeros((4, 4)))
    assert loss == 0.0
    np.testing.assert_array_equal(grad, 0.0)


def test_iou_gradient_finite_difference():
    rng = np.random.default_rng(2)
    a = rng.uniform(0.1, 0.9, size=(5, 5))
    b = rng.uniform(0.1, 0.9, size=(5, 5))
    _, grad = silhouette_iou_loss(a, b)
    h = 1e-7
    for idx in [(0, 0), (2, 3), (4, 4)]:
        ap = a.copy(); ap[idx] += h
        am = a.copy(); am[idx] -= h
        fd = (silhouette_iou_loss(ap, b)[0] - silhouette_iou_loss(am, b)[0]) / (2 * h)
        assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-10)


def test_color_l1_value_and_gradient():
    p = np.array([[[0.5, 0.2, 0.9]]])
    t = np.array([[[0.4, 0.4, 0.9]]])
    loss, grad = color_l1_loss(p, t)
    assert loss == pytest.approx((0.1 + 0.2 + 0.0) / 3.0)
    np.testing.assert_allclose(grad, np.array([[[1.0, -1.0, 0.0]]]) / 3.0)


def test_color_l1_shape_mismatch():
    with pytest.raises(ValueError):
        color_l1_loss(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))
    with pytest.raises(ValueError):
        silhouette_iou_loss(np.zeros((2, 2)), np.zeros((3, 2)))


def test_laplacian_loss_flat_values():
    mesh = make_ico_sphere(1)
    flat = np.full((mesh.num_vertices, 3), 0.25)
    loss, grad = laplacian_loss(mesh, flat)
    assert loss == pytest.approx(0.0, abs=1e-24)
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


def test_laplacian_loss_gradient_finite_difference():
    mesh = make_ico_sphere(0)
    rng = np.random.default_rng(3)
    vals = rng.normal(size=(mesh.num_vertices, 3))
    _, grad = laplacian_loss(mesh, vals)
    h = 1e-6
    for idx in [(0, 0), (5, 1), (11, 2)]:
        vp = vals.copy(); vp[idx] += h
        vm = vals.copy(); vm[idx] -= h
        fd = (laplacian_loss(mesh, vp)[0] - laplacian_loss(mesh, vm)[0]) / (2 * h)
        assert grad[idx] == pytest.approx(fd, rel=1e-6, abs=1e-10)


def test_laplacian_loss_vector_values():
    mesh = make_ico_sphere(0)
    rng = np.random.default_rng(4)
    vals = rng.normal(size=mesh.num_vertices)
    loss, grad = laplacian_loss(mesh, vals)
    assert grad.shape == (mesh.num_vertices,)
    loss2, grad2 = laplacian_loss(mesh, vals[:, None])
    assert loss == pytest.approx(loss2)
    np.testing.assert_allclose(grad, grad2[:, 0])


def test_total_loss_linearity_in_weights():
    # the combined objective is exactly linear in lambda and mu with the
    # component losses as coefficients
    mesh = make_ico_sphere(1)
    rng = np.random.default_rng(5)
    pi = rng.uniform(0, 1, size=(8, 8, 3))
    ti = rng.uniform(0, 1, size=(8, 8, 3))
    pa = rng.uniform(0, 1, size=(8, 8))
    ta = rng.uniform(0, 1, size=(8, 8))

    l_s, _ = silhouette_iou_loss(pa, ta)
    l_c, _ = color_l1_loss(pi, ti)
    l_gv, _ = laplacian_loss(mesh)
    l_gc, _ = laplacian_loss(mesh, mesh.colors)

    for lam in (0.0, 1.0, 2.5):
        for mu in (0.0, 1e-3, 0.1):
            w = LossWeights(lambda_color=lam, mu_laplacian=mu)
            loss, d_img, d_alpha, d_v, d_c, parts = total_loss(
                pi, pa, ti, ta, mesh, weights=w)
            assert loss == pytest.approx(l_s + lam * l_c + mu * (l_gv + l_gc),
                                         rel=1e-12)
            assert parts["silhouette"] == pytest.approx(l_s)
            assert parts["color"] == pytest.approx(l_c)


def test_total_loss_perfect_prediction_smooth_mesh():
    # a flat (constant-Laplacian-free) mesh with matching images scores 0
    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0],
                      [0.5, 1.0, 0.0], [1.5, 1.0, 0.0]])
    # vertex 1's neighbors average to itself; the outer vertices do not,
    # so restrict the check to the image terms with mu = 0
    mesh = Mesh(verts, np.array([[0, 1, 3], [1, 4, 3], [1, 2, 4]]),
                np.full((5, 3), 0.5))
    img = np.random.default_rng(6).uniform(0, 1, size=(4, 4, 3))
    alpha = (np.random.default_rng(7).uniform(0, 1, size=(4, 4)) > 0.4).astype(float)
    loss, *_ = total_loss(img, alpha, img.copy(), alpha.copy(), mesh,
                          weights=LossWeights(lambda_color=1.0, mu_laplacian=0.0))
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_total_loss_component_arithmetic():
    # components (0.2, 0.3, 10) with lambda=1, mu=1e-3 combine to 0.51
    assert 0.2 + 1.0 * 0.3 + 1e-3 * 10.0 == pytest.approx(0.51)
