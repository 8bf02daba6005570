from dataclasses import replace

import numpy as np
import pytest

from softraster import (Camera, Mesh, Pose, RenderConfig, backward,
                        make_unit_cube, render)
from softraster.oracles import (finite_difference_check, hard_raster_oracle,
                                random_scene)
from softraster.render import aggregate_silhouette, aggregate_softmax

CHECK_CONFIG = dict(width=32, height=32, sigma=1e-2, gamma=1e-2)


def probe_weights(rng, shape_img, shape_alpha):
    return rng.standard_normal(shape_img), rng.standard_normal(shape_alpha)


def run_check(seed, metric, shading, n_coords=10):
    rng = np.random.default_rng(seed)
    mesh, pose, camera = random_scene(rng)
    config = RenderConfig(metric=metric, shading=shading, **CHECK_CONFIG)
    g_image, g_alpha = probe_weights(rng, (32, 32, 3), (32, 32))
    coords = {
        "displacements": rng.choice(mesh.num_vertices * 3,
                                    size=min(n_coords, mesh.num_vertices * 3),
                                    replace=False),
        "colors": rng.choice(mesh.num_vertices * 3,
                             size=min(n_coords, mesh.num_vertices * 3),
                             replace=False),
    }
    return finite_difference_check(mesh, camera, config, pose,
                                   g_image, g_alpha, coords=coords)


def test_analytic_gradients_match_finite_differences_euclidean_flat():
    for seed in range(5):
        res = run_check(seed, "euclidean", "flat")
        assert res["max_err"] < 1e-3, f"seed {seed}: {res['max_err']}"


def test_analytic_gradients_match_finite_differences_barycentric():
    for seed in (10, 11, 12):
        res = run_check(seed, "barycentric", "flat")
        assert res["max_err"] < 1e-3, f"seed {seed}: {res['max_err']}"


def test_analytic_gradients_match_finite_differences_lit():
    for seed in (20, 21, 22):
        res = run_check(seed, "euclidean", "lit")
        assert res["max_err"] < 1e-3, f"seed {seed}: {res['max_err']}"


def test_finite_difference_probes_all_blocks():
    res = run_check(0, "euclidean", "flat")
    for block in ("displacements", "colors", "quaternion", "translation"):
        assert res[block]["checked"].any(), f"{block} never checked"


# ---------------------------------------------------------------------------
# occlusion


def occlusion_scene(gamma=1e-2):
    # a big near plate hides a small far triangle completely; the far
    # triangle must still receive gradients through the depth softmax
    vertices = np.array([
        [-0.8, -0.8, 0.5], [0.8, -0.8, 0.5], [0.0, 0.9, 0.5],    # near plate
        [-0.2, -0.2, -0.5], [0.2, -0.2, -0.5], [0.0, 0.2, -0.5], # hidden
    ])
    colors = np.array([[0.9, 0.1, 0.1]] * 3 + [[0.1, 0.9, 0.1]] * 3)
    mesh = Mesh(vertices, np.array([[0, 1, 2], [3, 4, 5]]), colors)
    camera = Camera(eye=(0.0, 0.0, 3.2))
    config = RenderConfig(width=32, height=32, gamma=gamma)
    return mesh, camera, config


def test_occluded_triangle_receives_color_loss_gradient():
    mesh, camera, config = occlusion_scene()
    # the plate really does hide the far triangle: a z-buffer never
    # paints a single green pixel
    hard = hard_raster_oracle(mesh, camera, config)
    assert not np.any(np.all(hard.image == [0.1, 0.9, 0.1], axis=2))
    out = render(mesh, camera, config)
    grads = backward(out.tape, np.ones((32, 32, 3)))
    hidden = grads.d_vertices[3:6]
    assert np.linalg.norm(hidden) > 0.0
    assert np.any(hidden[:, 2] != 0.0)


def test_occluded_gradient_survives_sharp_gamma():
    mesh, camera, config = occlusion_scene(gamma=1e-4)
    out = render(mesh, camera, config)
    grads = backward(out.tape, np.ones((32, 32, 3)))
    assert np.linalg.norm(grads.d_vertices[3:6]) > 0.0
    assert np.linalg.norm(grads.d_colors[3:6]) > 0.0


# ---------------------------------------------------------------------------
# structural properties


def test_identity_pose_displacement_gradient_equals_world():
    rng = np.random.default_rng(30)
    mesh, _, camera = random_scene(rng)
    out = render(mesh, camera, RenderConfig(**CHECK_CONFIG), Pose())
    g = rng.standard_normal((32, 32, 3))
    grads = backward(out.tape, g)
    np.testing.assert_allclose(grads.d_displacements, grads.d_vertices,
                               rtol=1e-12, atol=1e-15)


def test_translation_gradient_is_world_gradient_sum():
    rng = np.random.default_rng(31)
    mesh, pose, camera = random_scene(rng)
    out = render(mesh, camera, RenderConfig(**CHECK_CONFIG), pose)
    g_image = rng.standard_normal((32, 32, 3))
    g_alpha = rng.standard_normal((32, 32))
    grads = backward(out.tape, g_image, g_alpha)
    np.testing.assert_allclose(grads.d_translation,
                               grads.d_vertices.sum(axis=0),
                               rtol=1e-9, atol=1e-12)


def test_zero_upstream_gives_zero_gradients():
    out = render(make_unit_cube(), Camera(eye=(0.0, 0.0, 3.2)),
                 RenderConfig(width=16, height=16))
    grads = backward(out.tape, np.zeros((16, 16, 3)), np.zeros((16, 16)))
    for arr in (grads.d_vertices, grads.d_displacements, grads.d_colors,
                grads.d_quaternion, grads.d_translation):
        np.testing.assert_array_equal(arr, np.zeros_like(arr))


def test_alpha_only_loss_ignores_colors():
    rng = np.random.default_rng(32)
    mesh, pose, camera = random_scene(rng)
    out = render(mesh, camera, RenderConfig(**CHECK_CONFIG), pose)
    grads = backward(out.tape, np.zeros((32, 32, 3)),
                     rng.standard_normal((32, 32)))
    np.testing.assert_array_equal(grads.d_colors, np.zeros_like(grads.d_colors))
    assert np.linalg.norm(grads.d_vertices) > 0.0


def test_backward_validates_inputs():
    out = render(make_unit_cube(), Camera(eye=(0.0, 0.0, 3.2)),
                 RenderConfig(width=16, height=16))
    with pytest.raises(ValueError, match="d_image"):
        backward(out.tape, np.zeros((8, 8, 3)))
    with pytest.raises(ValueError, match="d_alpha"):
        backward(out.tape, np.zeros((16, 16, 3)), np.zeros((8, 8)))
    bare = render(make_unit_cube(), Camera(eye=(0.0, 0.0, 3.2)),
                  RenderConfig(width=16, height=16, keep_tape=False))
    with pytest.raises(ValueError, match="tape"):
        backward(bare.tape, np.zeros((16, 16, 3)))


def test_empty_mesh_backward_is_zero():
    mesh = Mesh(np.zeros((3, 3)), np.zeros((0, 3), dtype=np.int64),
                np.full((3, 3), 0.5))
    out = render(mesh, Camera(eye=(0.0, 0.0, 3.2)),
                 RenderConfig(width=8, height=8))
    grads = backward(out.tape, np.ones((8, 8, 3)), np.ones((8, 8)))
    assert np.linalg.norm(grads.d_vertices) == 0.0
    assert np.linalg.norm(grads.d_quaternion) == 0.0


# ---------------------------------------------------------------------------
# closed-form derivatives of the aggregates
#
# backward() folds these chain rules into one pass, so the textbook
# per-stage slopes are pinned here by differencing the forward aggregates
# directly: d I / d z_j = (w_j / gamma)(C_j - I), d I / d C_j = w_j,
# d I / d D_j = (w_j / D_j)(C_j - I), d alpha / d D_j = (1 - alpha)/(1 - D_j).


def fuse_pixel(depths, coverages, colors, gamma):
    pix = np.zeros(len(depths), dtype=np.int64)
    image, w, w_b, _, _ = aggregate_softmax(
        pix, np.log(np.asarray(coverages, dtype=np.float64)),
        np.asarray(depths, dtype=np.float64),
        np.asarray(colors, dtype=np.float64),
        1, gamma, 0.0, (0.0, 0.0, 0.0))
    return image[0], w


def test_color_aggregate_depth_slope_two_fragments():
    # two equal-weight fragments, pure red over black: nudging the red
    # one toward the camera steers the pixel with slope
    # (w1 / gamma)(1 - I_red) = 0.25 / gamma
    gamma = 1e-2
    colors = [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]
    image, w = fuse_pixel([1.0, 1.0], [0.9, 0.9], colors, gamma)
    np.testing.assert_allclose(w, [0.5, 0.5], rtol=1e-12)
    np.testing.assert_allclose(image, [0.5, 0.0, 0.0], rtol=1e-12, atol=1e-40)
    h = 1e-6
    up, _ = fuse_pixel([1.0 + h, 1.0], [0.9, 0.9], colors, gamma)
    dn, _ = fuse_pixel([1.0 - h, 1.0], [0.9, 0.9], colors, gamma)
    fd = (up[0] - dn[0]) / (2.0 * h)
    np.testing.assert_allclose(fd, 0.25 / gamma, rtol=1e-5)


def test_color_aggregate_color_slope_is_weight():
    gamma = 1e-2
    h = 1e-6
    up, _ = fuse_pixel([1.0, 1.0], [0.9, 0.9], [[1.0 + h, 0, 0], [0, 0, 0]], gamma)
    dn, w = fuse_pixel([1.0, 1.0], [0.9, 0.9], [[1.0 - h, 0, 0], [0, 0, 0]], gamma)
    fd = (up[0] - dn[0]) / (2.0 * h)
    np.testing.assert_allclose(fd, w[0], rtol=1e-9)


def test_color_aggregate_coverage_slope():
    # d I / d D = (w / D)(C - I), checked against a central difference
    # on the coverage of the red fragment
    gamma = 1e-2
    colors = [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]
    image, w = fuse_pixel([1.0, 1.0], [0.9, 0.9], colors, gamma)
    h = 1e-6
    up, _ = fuse_pixel([1.0, 1.0], [0.9 + h, 0.9], colors, gamma)
    dn, _ = fuse_pixel([1.0, 1.0], [0.9 - h, 0.9], colors, gamma)
    fd = (up[0] - dn[0]) / (2.0 * h)
    np.testing.assert_allclose(fd, (w[0] / 0.9) * (1.0 - image[0]), rtol=1e-5)


def test_color_aggregate_saturated_fragment_ignores_coverage():
    # one fragment monopolizing the pixel (w within an ulp of 1) makes
    # the color insensitive to its own coverage: C - I underflows to zero
    gamma = 1e-4
    color = [[0.3, 0.7, 0.2]]
    image, w = fuse_pixel([1.0], [0.999], color, gamma)
    assert w[0] > 1.0 - 1e-15
    np.testing.assert_allclose(image, color[0], rtol=1e-12)
    h = 1e-6
    up, _ = fuse_pixel([1.0], [0.999 + h], color, gamma)
    dn, _ = fuse_pixel([1.0], [0.999 - h], color, gamma)
    assert np.max(np.abs(up - dn)) / (2.0 * h) < 1e-8


def test_silhouette_slope_matches_closed_form():
    def alpha(coverages):
        cov = np.asarray(coverages, dtype=np.float64)
        pix = np.zeros(cov.shape[0], dtype=np.int64)
        return aggregate_silhouette(pix, np.log1p(-cov), 1)[0][0]

    h = 1e-6
    # lone fragment at D = 0.5: slope (1 - 0.5)/(1 - 0.5) = 1
    fd = (alpha([0.5 + h]) - alpha([0.5 - h])) / (2.0 * h)
    np.testing.assert_allclose(fd, 1.0, rtol=1e-9)
    # pair of halves: alpha = 0.75 and each fragment's slope is
    # (1 - 0.75)/(1 - 0.5) = 0.5
    np.testing.assert_allclose(alpha([0.5, 0.5]), 0.75, rtol=1e-12)
    fd = (alpha([0.5 + h, 0.5]) - alpha([0.5 - h, 0.5])) / (2.0 * h)
    np.testing.assert_allclose(fd, 0.5, rtol=1e-9)


# ---------------------------------------------------------------------------
# distance and shading chains at their exact zeros


def screen_plane_mesh(camera, uv, faces, colors):
    # place vertices on the z = 0 world plane at prescribed screen
    # coordinates (the projection is an exact scaling there)
    scale = camera.eye[2] * np.tan(camera.fov_y / 2.0)
    vertices = np.column_stack([np.asarray(uv) * scale, np.zeros(len(uv))])
    return Mesh(vertices, np.asarray(faces, dtype=np.int64), colors)


def test_distance_gradient_vanishes_for_pixel_on_edge():
    # a pixel center lying exactly on an edge has D = 1/2, and the
    # euclidean gradient 2 delta (closest - p) vanishes because the
    # closest edge point is the pixel itself
    camera = Camera(eye=(0.0, 0.0, 3.2))
    mesh = screen_plane_mesh(
        camera, [[0.125, 0.3], [0.125, -0.4], [0.6, 0.0]], [[0, 1, 2]],
        np.full((3, 3), 0.6))
    out = render(mesh, camera,
                 RenderConfig(width=8, height=8, sigma=1e-2, cutoff=None))
    # pixel (4, 4) center is (0.125, -0.125), on the first edge
    frag = np.nonzero(out.tape.pix == 4 * 8 + 4)[0]
    assert frag.shape == (1,)
    assert abs(out.tape.D[frag[0]] - 0.5) < 1e-9
    d_alpha = np.zeros((8, 8))
    d_alpha[4, 4] = 1.0
    grads = backward(out.tape, np.zeros((8, 8, 3)), d_alpha)
    assert np.linalg.norm(grads.d_vertices) < 1e-9


def test_distance_gradient_concentrates_on_closest_vertex():
    # a pixel out past a corner keeps the corner as closest point; the
    # retained barycentric weight is one-hot, so the other two vertices
    # receive exact zeros from a silhouette loss
    camera = Camera(eye=(0.0, 0.0, 3.2))
    mesh = screen_plane_mesh(
        camera, [[0.1, 0.4], [0.1, -0.4], [0.6, 0.0]], [[0, 1, 2]],
        np.full((3, 3), 0.6))
    out = render(mesh, camera,
                 RenderConfig(width=8, height=8, sigma=5e-2, cutoff=None))
    pixel = 1 * 8 + 4            # center (0.125, 0.625), beyond the top corner
    frag = np.nonzero(out.tape.pix == pixel)[0]
    assert frag.shape == (1,)
    np.testing.assert_array_equal(out.tape.t_closest[frag[0]], [1.0, 0.0, 0.0])
    d_alpha = np.zeros((8, 8))
    d_alpha[1, 4] = 1.0
    grads = backward(out.tape, np.zeros((8, 8, 3)), d_alpha)
    assert np.linalg.norm(grads.d_vertices[0]) > 0.0
    np.testing.assert_array_equal(grads.d_vertices[1], np.zeros(3))
    np.testing.assert_array_equal(grads.d_vertices[2], np.zeros(3))


def test_lit_gradients_vanish_when_light_grazes():
    # light running parallel to the face closes the diffuse gate, so
    # forward and backward match a pure-ambient render bit for bit
    camera = Camera(eye=(0.0, 0.0, 3.2))
    vertices = np.array([[-0.6, -0.5, 0.0], [0.7, -0.4, 0.0], [0.0, 0.8, 0.0]])
    colors = np.array([[0.9, 0.3, 0.2], [0.2, 0.8, 0.3], [0.2, 0.3, 0.9]])
    mesh = Mesh(vertices, np.array([[0, 1, 2]]), colors)
    grazing = RenderConfig(width=16, height=16, sigma=1e-2, gamma=1e-2,
                           shading="lit", light_dir=(-1.0, 0.0, 0.0))
    ambient_only = replace(grazing, diffuse=0.0)
    rng = np.random.default_rng(7)
    g_image = rng.standard_normal((16, 16, 3))
    g_alpha = rng.standard_normal((16, 16))
    out_a = render(mesh, camera, grazing)
    out_b = render(mesh, camera, ambient_only)
    np.testing.assert_array_equal(out_a.image, out_b.image)
    ga = backward(out_a.tape, g_image, g_alpha)
    gb = backward(out_b.tape, g_image, g_alpha)
    np.testing.assert_array_equal(ga.d_vertices, gb.d_vertices)
    np.testing.assert_array_equal(ga.d_colors, gb.d_colors)
    np.testing.assert_array_equal(ga.d_quaternion, gb.d_quaternion)


def test_degenerate_face_is_dropped_with_zero_gradient():
    # a zero-area projection never reaches the tape, so its exclusive
    # vertices keep exact zero gradients while the healthy face's move
    camera = Camera(eye=(0.0, 0.0, 3.2))
    vertices = np.array([
        [-0.5, -0.5, 0.0], [0.6, -0.4, 0.0], [0.0, 0.7, 0.0],
        [-0.3, 0.1, 0.0], [0.0, 0.1, 0.0], [0.3, 0.1, 0.0],   # collinear
    ])
    mesh = Mesh(vertices, np.array([[0, 1, 2], [3, 4, 5]]),
                np.full((6, 3), 0.6))
    out = render(mesh, camera, RenderConfig(width=16, height=16, sigma=1e-2))
    assert 1 not in out.tape.kept
    grads = backward(out.tape, np.ones((16, 16, 3)), np.ones((16, 16)))
    assert np.all(np.isfinite(grads.d_vertices))
    assert np.linalg.norm(grads.d_vertices[:3]) > 0.0
    np.testing.assert_array_equal(grads.d_vertices[3:], np.zeros((3, 3)))
