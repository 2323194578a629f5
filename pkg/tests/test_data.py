import struct

import numpy as np
import pytest

from segflow.data import (
    FloDimensionError,
    FloMagicError,
    FloTruncatedError,
    FlowField,
    SceneSpecError,
    SequenceDataset,
    ShapeObject,
    ShapeSceneSpec,
    MissingAnnotationError,
    export_sequence,
    flow_hue,
    flow_to_color,
    generate_scene,
    load_davis_layout,
    load_flow_dataset,
    read_flo,
    render_scene,
    write_flo,
)
from tests.oracles import bilinear_sample_loop, interior


def test_flo_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    f = FlowField(rng.normal(size=(5, 7)).astype(np.float32), rng.normal(size=(5, 7)).astype(np.float32))
    write_flo(f, tmp_path / "a.flo")
    g = read_flo(tmp_path / "a.flo")
    assert (g.width, g.height) == (7, 5)
    assert g.u.tobytes() == f.u.tobytes() and g.v.tobytes() == f.v.tobytes()


def test_flo_hand_assembled_bytes(tmp_path):
    raw = struct.pack("<f", 202021.25) + struct.pack("<ii", 2, 1) + struct.pack("<4f", 1, 3, 2, 4)
    (tmp_path / "h.flo").write_bytes(raw)
    f = read_flo(tmp_path / "h.flo")
    assert f.u.tolist() == [[1.0, 2.0]] and f.v.tolist() == [[3.0, 4.0]]
    write_flo(FlowField([[1, 2]], [[3, 4]]), tmp_path / "w.flo")
    assert (tmp_path / "w.flo").read_bytes() == raw


def test_flo_errors_are_distinct(tmp_path):
    bad_magic = struct.pack("<f", 0.0) + struct.pack("<ii", 1, 1) + struct.pack("<2f", 0, 0)
    (tmp_path / "m.flo").write_bytes(bad_magic)
    with pytest.raises(FloMagicError):
        read_flo(tmp_path / "m.flo")
    short = struct.pack("<f", 202021.25) + struct.pack("<ii", 3, 3) + struct.pack("<2f", 0, 0)
    (tmp_path / "t.flo").write_bytes(short)
    with pytest.raises(FloTruncatedError):
        read_flo(tmp_path / "t.flo")
    neg = struct.pack("<f", 202021.25) + struct.pack("<ii", 0, 3)
    (tmp_path / "d.flo").write_bytes(neg)
    with pytest.raises(FloDimensionError):
        read_flo(tmp_path / "d.flo")
    assert not issubclass(FloMagicError, FloTruncatedError)


def test_flo_unknown_sentinel_maps_to_invalid():
    flow = np.ones((2, 3, 3), np.float32)
    valid = np.ones((3, 3), np.uint8)
    valid[1, 1] = 0
    f = FlowField.from_array(flow, valid)
    assert f.valid.tolist() == valid.tolist()
    assert f.to_array()[:, 1, 1].tolist() == [0.0, 0.0]


def test_flow_to_color_zero_is_white():
    img = flow_to_color(np.zeros((2, 4, 5)))
    assert img.shape == (4, 5, 3)
    assert (img == 255).all()


def test_flow_color_hue_symmetries():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(2, 6, 6))
    h = flow_hue(f)
    assert np.allclose(np.mod(flow_hue(-f) - h, 1.0), 0.5)
    assert np.allclose(flow_hue(3.7 * f), h, rtol=0, atol=1e-12)
    c1 = flow_to_color(f).astype(int)
    c2 = flow_to_color(3.7 * f).astype(int)
    assert np.abs(c1 - c2).max() <= 1  # auto max-magnitude normalises the scale away


def single_square_spec(velocity=(2.0, 0.0), shake=None, frames=4):
    sq = ShapeObject("rectangle", center=(20.0, 30.0), radii=(6.0, 6.0), velocity=velocity)
    return ShapeSceneSpec(canvas=(64, 64), background_seed=3, objects=[sq], frames=frames, camera_shake=shake)


def test_single_square_flow_is_analytic():
    scene = render_scene(single_square_spec())
    for t, flow in enumerate(scene.flows):
        m = scene.masks[t].astype(bool)
        assert np.allclose(flow[0][m], 2.0, atol=1e-5) and np.allclose(flow[1][m], 0.0, atol=1e-5)
        assert np.allclose(flow[:, ~m], 0.0)


def test_camera_shake_composes_with_object_motion():
    spec = ShapeSceneSpec(canvas=(64, 64), background_seed=5, frames=3, camera_shake=(1.0, 1.0),
                          objects=[ShapeObject("ellipse", (30.0, 30.0), (7.0, 5.0), velocity=(0.0, 0.0), foreground=False),
                                   ShapeObject("rectangle", (15.0, 45.0), (5.0, 4.0), velocity=(2.0, -1.0))])
    scene = render_scene(spec)
    owner = scene.owners[0]
    assert np.allclose(scene.flows[0][:, owner == -1].T, [1.0, 1.0])
    assert np.allclose(scene.flows[0][:, owner == 0].T, [1.0, 1.0], atol=1e-5)
    assert np.allclose(scene.flows[0][:, owner == 1].T, [3.0, 0.0], atol=1e-5)
    # warping oracle: frame t+1 sampled at x + flow reproduces frame t away from edges
    for t in range(2):
        ok = interior(scene.owners[t], scene.owners[t + 1], scene.flows[t], scene.valids[t])
        assert ok.sum() > 1000
        warped = bilinear_sample_loop(scene.frames[t + 1], scene.flows[t], ok)
        assert np.abs(warped - scene.frames[t])[:, ok].max() < 1e-2


def test_masks_match_coverage():
    spec = single_square_spec(velocity=(1.5, 0.5))
    scene = render_scene(spec)
    obj = spec.objects[0]
    for t, m in enumerate(scene.masks):
        c, _ = spec.pose(obj, t)
        # supersampled coverage of an axis-aligned square, computed independently
        ys, xs = np.mgrid[0:64, 0:64]
        cov = np.zeros((64, 64))
        for oy in (np.arange(8) + 0.5) / 8 - 0.5:
            for ox in (np.arange(8) + 0.5) / 8 - 0.5:
                cov += (np.abs(xs + ox - c[0]) <= 6) & (np.abs(ys + oy - c[1]) <= 6)
        cov /= 64
        clear = np.abs(cov - 0.5) > 0.2
        assert np.array_equal(m[clear], (cov >= 0.5)[clear].astype(np.uint8))
        assert set(np.unique(m)) <= {0, 1} and m.any()


def test_scene_rejects_objects_leaving_canvas():
    with pytest.raises(SceneSpecError):
        render_scene(single_square_spec(velocity=(20.0, 0.0)))
    with pytest.raises(SceneSpecError):
        ShapeSceneSpec(objects=[ShapeObject("ellipse", (5.0, 5.0), (2.0, 2.0))], frames=1)


def test_generate_scene_pairs():
    pairs = generate_scene(single_square_spec(frames=5))
    assert len(pairs) == 4
    for p in pairs:
        assert p.mask_gt is not None and p.flow_gt is not None and p.flow_valid is not None


def test_layout_round_trip(tmp_path):
    scene = render_scene(single_square_spec(frames=5))
    export_sequence(tmp_path, "seqA", scene)
    ds = SequenceDataset(tmp_path)
    pairs = list(ds)
    assert len(pairs) == 4
    for t, p in enumerate(pairs):
        assert np.array_equal(p.frame_t, scene.frames[t])
        assert np.array_equal(p.mask_gt, scene.masks[t])
        assert np.array_equal(p.flow_gt[:, scene.valids[t] == 1], scene.flows[t][:, scene.valids[t] == 1])
        assert np.array_equal(p.flow_valid, scene.valids[t])
    assert all(p.flow_gt is None for p in load_davis_layout(tmp_path))
    assert all(p.mask_gt is None and p.flow_gt is not None for p in load_flow_dataset(tmp_path))


def test_loader_order_and_missing_annotations(tmp_path):
    scene = render_scene(single_square_spec(frames=3))
    for name in ("b", "a", "c"):
        export_sequence(tmp_path, name, scene)
    assert [p.name.split("/")[0] for p in load_davis_layout(tmp_path)] == ["a", "a", "b", "b", "c", "c"]
    (tmp_path / "Annotations" / "b" / "00001.png").unlink()
    with pytest.raises(MissingAnnotationError):
        list(load_davis_layout(tmp_path))
    assert len(list(load_davis_layout(tmp_path, skip_missing=True))) == 5
