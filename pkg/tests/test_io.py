import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from preddiff import pdt1
from preddiff.images import (
    ImageReadError,
    ShapeMismatchError,
    load_dataset,
    load_image,
    load_relevance,
    save_image,
    save_relevance,
)
from preddiff.render import HeatmapStyle, heatmap_rgb, render_heatmap, render_volume
from preddiff.synthetic import SyntheticSpec, localization_score, make_synthetic_task, planted_mask
from preddiff.tensor import ImageTensor, RelevanceMap

# PDT1 --------------------------------------------------------------------------


def test_pdt1_layout_matches_documented_bytes():
    blob = pdt1.dumps(np.array([[1.0, 2.0, 3.0]]))
    assert blob[:4] == b"PDT1"
    assert struct.unpack("<I", blob[4:8]) == (2,)
    assert struct.unpack("<2I", blob[8:16]) == (1, 3)
    assert blob[16] == 1
    assert np.frombuffer(blob[17:], "<f4").tolist() == [1.0, 2.0, 3.0]


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=4, max_side=5),
                  elements=st.floats(width=32, allow_nan=False)))
def test_pdt1_float32_round_trip_is_bitwise(arr):
    back = pdt1.loads(pdt1.dumps(arr))
    assert back.dtype == np.float32 and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


@pytest.mark.parametrize("dtype", [np.float64, np.int64])
def test_pdt1_extension_tags_round_trip(dtype):
    arr = (np.random.default_rng(0).standard_normal((3, 4)) * 1e6).astype(dtype)
    assert pdt1.loads(pdt1.dumps(arr, dtype)).tobytes() == arr.tobytes()


@pytest.mark.parametrize("blob,message", [
    (b"PDT2" + bytes(9), "magic"),
    (b"PDT1" + struct.pack("<I", 1), "truncated"),
    (b"PDT1" + struct.pack("<II", 1, 4) + b"\x09", "tag"),
    (b"PDT1" + struct.pack("<II", 1, 4) + b"\x01" + bytes(8), "payload"),
])
def test_pdt1_rejects_malformed(blob, message):
    with pytest.raises(pdt1.FormatError, match=message):
        pdt1.loads(blob)


def test_pdt1_file_rejects_trailing_bytes(tmp_path):
    path = tmp_path / "x.pdt1"
    path.write_bytes(pdt1.dumps(np.zeros(2)) + b"\x00")
    with pytest.raises(pdt1.FormatError, match="trailing"):
        pdt1.read(path)


# images ------------------------------------------------------------------------


def test_pgm_scaling(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 255, 0]))
    t = load_image(path)
    assert t.data.tolist() == [[0.0, 1.0], [1.0, 0.0]]


def test_png_colour_is_channel_last(tmp_path):
    rgb = np.zeros((3, 4, 3), dtype=np.uint8)
    rgb[0, 0] = (255, 0, 51)
    Image.fromarray(rgb, "RGB").save(tmp_path / "c.png")
    t = load_image(tmp_path / "c.png")
    assert t.shape == (3, 4, 3) and t.spatial_ndim == 2
    assert t.data[0, 0].tolist() == [1.0, 0.0, 0.2]


def test_pdt1_image_round_trip(tmp_path):
    data = np.random.default_rng(1).random((5, 6)).astype(np.float32)
    save_image(tmp_path / "x.pdt1", ImageTensor(data))
    back = load_image(tmp_path / "x.pdt1")
    assert back.data.astype(np.float32).tobytes() == data.tobytes()


def test_mixed_shape_directory_names_offender(tmp_path):
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "a.png")
    Image.fromarray(np.zeros((5, 4), np.uint8)).save(tmp_path / "b.png")
    with pytest.raises(ShapeMismatchError, match="b.png") as info:
        load_dataset(tmp_path)
    assert info.value.path.name == "b.png"


def test_dataset_from_directory_is_sorted(tmp_path):
    for name, v in [("b.png", 200), ("a.png", 100)]:
        Image.fromarray(np.full((2, 2), v, np.uint8)).save(tmp_path / name)
    data = load_dataset(tmp_path)
    assert data.images[:, 0, 0].tolist() == [100 / 255, 200 / 255]


def test_unreadable_image(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not an image")
    with pytest.raises(ImageReadError):
        load_image(tmp_path / "bad.png")
    with pytest.raises(ImageReadError, match="unknown image format"):
        load_image(tmp_path / "file.xyz")


def test_relevance_archive_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    rmap = RelevanceMap(rng.standard_normal((4, 5)), rng.integers(0, 4, (4, 5)), "activation_difference",
                        {"selector": "unit", "index": 3, "layer": "relu1"}, {"seed": 7})
    save_relevance(tmp_path / "r.rel", rmap)
    back = load_relevance(tmp_path / "r.rel")
    assert back.sums.tobytes() == rmap.sums.tobytes()
    assert back.counts.tobytes() == rmap.counts.tobytes()
    assert (back.kind, back.target, back.meta) == (rmap.kind, rmap.target, rmap.meta)
    save_relevance(tmp_path / "s.rel", back)
    assert (tmp_path / "s.rel").read_bytes() == (tmp_path / "r.rel").read_bytes()


# rendering ---------------------------------------------------------------------


def _map(values):
    values = np.asarray(values, dtype=np.float64)
    return RelevanceMap(values, np.ones(values.shape, np.int64), "weight_of_evidence")


def test_zero_map_leaves_base_unchanged():
    base = ImageTensor(np.random.default_rng(3).random((4, 4)))
    rgb = heatmap_rgb(_map(np.zeros((4, 4))), base)
    gray = np.rint(base.data * 255)
    assert np.array_equal(rgb, np.repeat(gray[..., None], 3, -1).astype(np.uint8))


def test_single_positive_maximum_is_pure_red():
    values = np.zeros((3, 3))
    values[1, 1] = 2.5
    rgb = heatmap_rgb(_map(values), ImageTensor(np.full((3, 3), 0.5)))
    assert rgb[1, 1].tolist() == [255, 0, 0]


def test_negative_maximum_is_pure_blue():
    values = np.zeros((3, 3))
    values[0, 2] = -1.0
    assert heatmap_rgb(_map(values)).tolist()[0][2] == [0, 0, 255]


def test_threshold_suppresses_small_values():
    values = np.zeros((2, 2))
    values[0, 0] = 1.0
    values[1, 1] = 0.1
    rgb = heatmap_rgb(_map(values), ImageTensor(np.full((2, 2), 0.4)), HeatmapStyle(threshold_fraction=0.15))
    assert rgb[1, 1].tolist() == [102, 102, 102]
    kept = heatmap_rgb(_map(values), ImageTensor(np.full((2, 2), 0.4)), HeatmapStyle(threshold_fraction=0.0))
    assert kept[1, 1].tolist() != [102, 102, 102]


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (4, 5), elements=st.floats(-1e6, 1e6)))
def test_rendering_is_total_and_deterministic(values):
    a = heatmap_rgb(_map(values))
    b = heatmap_rgb(_map(values))
    assert a.dtype == np.uint8 and a.shape == (4, 5, 3)
    assert np.array_equal(a, b)


def test_render_writes_png_and_sidecar(tmp_path):
    render_heatmap(_map(np.eye(3)), None, HeatmapStyle(), tmp_path / "h.png")
    assert np.asarray(Image.open(tmp_path / "h.png")).shape == (3, 3, 3)
    assert json.loads((tmp_path / "h.png.json").read_text())["style"]["threshold_fraction"] == 0.15


def test_volume_renders_every_slice_and_a_grid(tmp_path):
    rmap = _map(np.random.default_rng(4).standard_normal((3, 4, 5)))
    rmap.meta["spatial_ndim"] = 3
    written = render_volume(rmap, None, HeatmapStyle(), tmp_path)
    assert [p.name for p in written] == ["slice_0_000.png", "slice_0_001.png", "slice_0_002.png", "grid.png"]


def test_colour_map_is_reduced_over_channels():
    values = np.zeros((2, 2, 3))
    values[0, 0] = (3.0, 0.0, 0.0)
    rmap = _map(values)
    rmap.meta["spatial_ndim"] = 2
    assert heatmap_rgb(rmap)[0, 0].tolist() == [255, 0, 0]


# synthetic tasks ---------------------------------------------------------------


def test_same_seed_gives_identical_tasks():
    a = make_synthetic_task(SyntheticSpec(num_images=50, seed=3))
    b = make_synthetic_task(SyntheticSpec(num_images=50, seed=3))
    assert np.array_equal(a[0].images, b[0].images) and np.array_equal(a[1], b[1])
    assert np.array_equal(a[2].evidence_mask, b[2].evidence_mask)


def test_labels_are_a_function_of_masked_pixels():
    data, labels, task = make_synthetic_task(SyntheticSpec(num_images=300, seed=1))
    assert task.evidence_mask.sum() == 20
    expected = data.images[:, task.evidence_mask].mean(axis=1) > 0.5
    assert np.array_equal(labels, expected.astype(int))


def test_degenerate_mask_is_rejected():
    with pytest.raises(ValueError, match="mask"):
        planted_mask((3, 3), 9, np.random.default_rng(0))


def test_localization_score_examples():
    mask = np.zeros((4, 4), dtype=bool)
    mask[1:3, 1:3] = True
    inside = np.where(mask, 2.0, 0.0)
    assert localization_score(inside, mask) == 1.0
    assert localization_score(np.ones((4, 4)), mask) == pytest.approx(0.25)
    assert localization_score(np.zeros((4, 4)), mask) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(-1e3, 1e3).filter(lambda a: abs(a) > 1e-3))
def test_localization_score_brute_force_and_scale_invariance(seed, alpha):
    rng = np.random.default_rng(seed)
    values = rng.standard_normal((5, 6))
    mask = rng.random((5, 6)) < 0.3
    inside = sum(abs(values[i, j]) for i in range(5) for j in range(6) if mask[i, j])
    total = sum(abs(v) for v in values.ravel())
    assert localization_score(values, mask) == pytest.approx(inside / total, rel=1e-12)
    assert localization_score(alpha * values, mask) == pytest.approx(localization_score(values, mask), rel=1e-9)
