import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clutterbench.errors import DegenerateSceneError, InvalidInputError
from clutterbench.scene import (
    LABEL_NONE,
    LABEL_TABLE,
    TABLE_ID,
    CameraSpec,
    ObjectSpec,
    SceneSpec,
    Shape,
    footprint_gap,
    has_grasp_affordance,
    load_scene,
    occlusion_ratio,
    render,
    render_labels,
    save_scene,
)

EXTENT = (-0.5, 0.5, -0.5, 0.5)
TOP = CameraSpec((0.0, 0.0, 1.5), (0.0, 0.0, 0.0), math.radians(45), (64, 64))


def obj(id, shape, dims, x, y, color=(0.8, 0.1, 0.1), yaw=0.0):
    return ObjectSpec.on_table(id, shape, dims, color, x, y, yaw)


def scene_of(objects, target, robot=None, top=TOP, extent=EXTENT, anchors=()):
    robot = robot or CameraSpec((0.0, -0.8, 0.6), (0.0, 0.0, 0.0), math.radians(50), (96, 72))
    return SceneSpec(extent, tuple(objects), target, robot, top, anchor_ids=anchors)


def test_rest_height_validated():
    with pytest.raises(InvalidInputError):
        ObjectSpec("a", Shape.SPHERE, (0.05,), (1, 0, 0), (0, 0, 0.2, 0))
    o = obj("s", Shape.SPHERE, (0.05,), 0, 0)
    assert o.pose[2] == pytest.approx(0.05)


def test_scene_rejects_bad_input():
    a = obj("a", Shape.SPHERE, (0.05,), 0, 0)
    with pytest.raises(InvalidInputError):
        scene_of([a, a], "a")
    with pytest.raises(InvalidInputError):
        scene_of([a], "missing")
    with pytest.raises(InvalidInputError):
        scene_of([obj("edge", Shape.SPHERE, (0.05,), 0.48, 0)], "edge")


def test_scene_json_round_trip(tmp_path):
    s = scene_of(
        [obj("t", Shape.CYLINDER, (0.03, 0.1), 0.1, 0.0), obj("b", Shape.BOX, (0.1, 0.05, 0.04), -0.2, 0.1, yaw=0.3)],
        "t",
        anchors=("b",),
    )
    save_scene(s, tmp_path / "s.json")
    assert load_scene(tmp_path / "s.json") == s


def test_table_and_background_labels():
    s = scene_of([obj("t", Shape.SPHERE, (0.03,), 0.3, 0.3)], "t")
    cam = CameraSpec((0.0, 0.0, 1.5), (0.0, 0.0, 0.0), math.radians(60), (64, 64))
    out = render(s, cam)
    # center pixel hits the bare table, corners see past its edge
    assert out.labels[32, 32] == LABEL_TABLE
    assert out.object_id(32, 32) == TABLE_ID
    assert out.depth[32, 32] == pytest.approx(1.5, rel=1e-3)
    assert out.labels[0, 0] == LABEL_NONE
    assert out.object_id(0, 0) is None
    assert np.isinf(out.depth[0, 0])
    assert tuple(out.color.data[:, 0, 0]) == pytest.approx(s.background_color)


def test_sphere_disc_matches_projected_area():
    r, D = 0.05, 1.0
    s = scene_of([obj("ball", Shape.SPHERE, (r,), 0.0, 0.0)], "ball")
    fov = math.radians(20)
    cam = CameraSpec((0.0, -D, r), (0.0, 0.0, r), fov, (200, 200))
    out = render(s, cam)
    # silhouette of a sphere seen from distance D: tan(half-angle) = r / sqrt(D^2 - r^2)
    radius_px = r / math.sqrt(D * D - r * r) / math.tan(fov / 2) * 100
    expected = math.pi * radius_px**2
    assert abs(out.pixel_count("ball") - expected) / expected < 0.05


def test_nearer_object_wins():
    near = obj("near", Shape.BOX, (0.1, 0.1, 0.2), 0.0, -0.15, color=(0, 0, 1))
    far = obj("far", Shape.BOX, (0.2, 0.1, 0.3), 0.0, 0.15, color=(0, 1, 0))
    s = scene_of([near, far], "far")
    cam = CameraSpec((0.0, -1.0, 0.1), (0.0, 0.0, 0.1), math.radians(30), (64, 64))
    out = render(s, cam)
    assert out.object_id(32, 32) == "near"
    # the far box is taller and wider, so it still shows around the near one
    assert out.pixel_count("far") > 0
    assert out.depth[32, 32] < np.min(out.depth[out.mask("far")])


def test_render_deterministic():
    s = scene_of([obj("t", Shape.CYLINDER, (0.04, 0.12), 0.0, 0.0), obj("b", Shape.BOX, (0.1, 0.1, 0.1), 0.2, 0.1, yaw=0.5)], "t")
    a, b = render(s, s.robot_cam), render(s, s.robot_cam)
    assert a.color == b.color
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.depth, b.depth)


def _mirror_obj(o):
    return o.moved(-o.x, o.y, -o.yaw)


def _mirror_cam(c):
    px, py, pz = c.position
    lx, ly, lz = c.look_at
    dx, dy, dz = c.light_dir
    return CameraSpec((-px, py, pz), (-lx, ly, lz), c.vertical_fov, c.resolution, (-dx, dy, dz))


def test_mirrored_scene_renders_column_reversed():
    objects = [
        obj("t", Shape.CYLINDER, (0.04, 0.12), 0.12, 0.05),
        obj("b", Shape.BOX, (0.12, 0.06, 0.08), -0.15, -0.05, color=(0.1, 0.6, 0.2), yaw=0.4),
        obj("s", Shape.SPHERE, (0.05,), 0.05, 0.25, color=(0.2, 0.2, 0.9)),
    ]
    robot = CameraSpec((0.1, -0.8, 0.5), (0.05, 0.0, 0.0), math.radians(50), (80, 60), (0.5, -0.4, 1.0))
    s = scene_of(objects, "t", robot=robot, extent=(-0.4, 0.5, -0.5, 0.5))
    m = scene_of([_mirror_obj(o) for o in objects], "t", robot=_mirror_cam(robot), extent=(-0.5, 0.4, -0.5, 0.5))
    a, b = render(s, s.robot_cam), render(m, m.robot_cam)
    assert np.array_equal(a.labels[:, ::-1], b.labels)
    np.testing.assert_allclose(a.color.data[:, :, ::-1], b.color.data, atol=1e-9)


def test_footprint_gap_examples():
    a = obj("a", Shape.CYLINDER, (0.5, 0.1), 0.0, 0.0)
    b = obj("b", Shape.CYLINDER, (0.5, 0.1), 0.0, 0.0)
    far = b.moved(2.0, 0.0)
    assert footprint_gap(a, far) == pytest.approx(1.0)
    box = obj("box", Shape.BOX, (0.2, 0.2, 0.1), 0.0, 0.0)
    ball = obj("ball", Shape.SPHERE, (0.05,), 0.5, 0.0)
    assert footprint_gap(box, ball) == pytest.approx(0.5 - 0.1 * math.sqrt(2) - 0.05)
    assert footprint_gap(a, b) < 0


@given(
    st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1),
    st.floats(0.01, 0.2), st.floats(0.01, 0.2),
)
def test_footprint_gap_symmetric(x1, y1, x2, y2, r1, r2):
    a = obj("a", Shape.SPHERE, (r1,), x1, y1)
    b = obj("b", Shape.CYLINDER, (r2, 0.1), x2, y2)
    assert footprint_gap(a, b) == footprint_gap(b, a)


def test_affordance():
    t = obj("t", Shape.CYLINDER, (0.03, 0.1), 0.0, 0.0)
    assert has_grasp_affordance(scene_of([t], "t"))
    crowd = obj("c", Shape.SPHERE, (0.03,), 0.08, 0.0)
    assert not has_grasp_affordance(scene_of([t, crowd], "t"))
    # exactly tangent to the clearance cylinder: 0.03 + 0.04 + 0.03
    tangent = obj("c", Shape.SPHERE, (0.03,), 0.1, 0.0)
    assert has_grasp_affordance(scene_of([t, tangent], "t"), clearance=0.04)


def _occluder_scene(occluder_x, occluder_y, occluder_dims=(0.3, 0.02, 0.3)):
    target = obj("t", Shape.BOX, (0.1, 0.1, 0.1), 0.0, 0.0)
    occ = obj("o", Shape.BOX, occluder_dims, occluder_x, occluder_y, color=(0.1, 0.9, 0.1))
    cam = CameraSpec((0.0, -1.0, 0.05), (0.0, 0.0, 0.05), math.radians(30), (128, 128))
    return scene_of([target, occ], "t", robot=cam)


def test_occlusion_isolated_is_zero():
    s = scene_of([obj("t", Shape.BOX, (0.1, 0.1, 0.1), 0.0, 0.0)], "t")
    assert occlusion_ratio(s, s.robot_cam) == 0.0


def test_occlusion_full_and_behind():
    full = _occluder_scene(0.0, -0.3)
    assert occlusion_ratio(full, full.robot_cam) >= 0.98
    behind = _occluder_scene(0.0, 0.3)
    assert occlusion_ratio(behind, behind.robot_cam) == 0.0


def test_occlusion_half_cover():
    # camera looks along +y at the target's center; the occluder's edge sits
    # on the line of sight through the target center, so half the target is hidden
    s = _occluder_scene(-0.15, -0.3)
    assert abs(occlusion_ratio(s, s.robot_cam) - 0.5) <= 0.02


@settings(max_examples=15, deadline=None)
@given(st.floats(-0.2, 0.0), st.floats(0.0, 0.1))
def test_occlusion_antitone_in_occluder_offset(x0, dx):
    # sliding the occluder further left can only reveal more of the target
    a = _occluder_scene(x0, -0.3)
    b = _occluder_scene(x0 - dx, -0.3)
    assert occlusion_ratio(b, b.robot_cam) <= occlusion_ratio(a, a.robot_cam) + 1e-12


def test_occlusion_target_out_of_view():
    s = scene_of([obj("t", Shape.SPHERE, (0.03,), 0.0, 0.0)], "t")
    away = CameraSpec((0.0, 0.0, 0.5), (0.0, 0.0, 1.0), math.radians(30), (32, 32))
    with pytest.raises(DegenerateSceneError):
        occlusion_ratio(s, away)


def test_render_labels_subset():
    t = obj("t", Shape.BOX, (0.1, 0.1, 0.1), 0.0, 0.0)
    s = scene_of([t, obj("o", Shape.BOX, (0.3, 0.02, 0.3), 0.0, -0.3)], "t")
    only_t = render_labels(s, s.robot_cam, (t,))
    assert set(np.unique(only_t)) <= {LABEL_NONE, LABEL_TABLE, 0}
    assert np.count_nonzero(only_t == 0) > 0
