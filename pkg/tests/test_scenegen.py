import dataclasses
import json

import numpy as np
import pytest

from objlayers.compositor import composite, layer_visibility, panoptic_project
from objlayers.dataset import generate_dataset, load_dataset
from objlayers.errors import GenerationError, ValidationError
from objlayers.scenegen import (
    MIN_VISIBILITY,
    PlacementConfig,
    SceneSpec,
    generate_scene,
    random_spec,
    rasterize,
    render_scene,
    texture_variants,
)


def _scene(seed=42, n=3):
    return generate_scene(random_spec(seed, n))


def test_same_seed_is_bit_identical():
    a, b = _scene(), _scene()
    np.testing.assert_array_equal(a.composite, b.composite)
    np.testing.assert_array_equal(a.panoptic, b.panoptic)
    for la, lb in zip(a.stack, b.stack):
        np.testing.assert_array_equal(la.color, lb.color)
        np.testing.assert_array_equal(la.alpha, lb.alpha)


def test_different_seeds_differ():
    assert not np.array_equal(_scene(1).composite, _scene(2).composite)


def test_zero_objects_is_background_plus_empties():
    scene = _scene(n=0)
    assert len(scene.stack) == 5
    assert np.all(scene.stack[0].alpha == 1)
    assert all(layer.is_empty() for layer in scene.stack.layers[1:])
    assert np.all(scene.panoptic == 0)
    np.testing.assert_allclose(scene.composite, scene.stack[0].color, atol=1e-6)


def test_single_object_is_fully_visible():
    scene = _scene(n=1)
    assert layer_visibility(scene.stack, 1).fraction == 1.0
    assert not scene.stack[1].is_empty()


def test_every_object_meets_minimum_visibility():
    for seed in range(30):
        scene = _scene(seed, 3)
        for i in range(1, 4):
            assert layer_visibility(scene.stack, i).fraction >= MIN_VISIBILITY


def test_composite_and_panoptic_are_consistent():
    scene = _scene()
    np.testing.assert_allclose(scene.composite, composite(scene.stack))
    np.testing.assert_array_equal(scene.panoptic, panoptic_project(scene.stack))
    stack, comp, pan = scene
    assert comp is scene.composite and pan is scene.panoptic and stack is scene.stack


def test_shadows_only_darken_background():
    spec = random_spec(7, 2)
    lit = render_scene(dataclasses.replace(spec, shadow=dataclasses.replace(spec.shadow, strength=0.0)))
    shaded = render_scene(spec)
    assert np.all(shaded.stack[0].color <= lit.stack[0].color + 1e-12)
    assert np.any(shaded.stack[0].color < lit.stack[0].color)
    for i in (1, 2):
        np.testing.assert_array_equal(shaded.stack[i].color, lit.stack[i].color)


def test_too_many_objects_rejected():
    with pytest.raises(ValidationError):
        random_spec(0, 5, n_layers=5)


def test_impossible_placement_raises():
    config = PlacementConfig(scale_range=(14.0, 15.0), overlap_range=(0.0, 0.0))
    with pytest.raises(GenerationError):
        random_spec(0, 3, config=config)


def test_spec_dict_round_trip():
    spec = random_spec(5, 3)
    assert SceneSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_rasterize_kinds_cover_their_center():
    spec = random_spec(3, 3)
    for obj in spec.objects:
        for kind in ("disc", "rectangle", "triangle"):
            mask = rasterize(dataclasses.replace(obj, kind=kind), spec.canvas)
            assert mask[int(obj.center[0]), int(obj.center[1])] == 1.0


def test_texture_variants_share_geometry():
    spec = random_spec(11, 3)
    variants = texture_variants(spec, 4)
    base = generate_scene(spec)
    for v in variants:
        scene = render_scene(v)
        np.testing.assert_array_equal(scene.panoptic, base.panoptic)
        assert not np.array_equal(scene.composite, base.composite)


def test_object_count_histogram_within_range():
    data = generate_dataset(200, (2, 3), seed=0)
    counts = np.bincount([r.scene.spec.n_objects for r in data.records], minlength=4)
    assert counts[0] == counts[1] == 0
    # both counts are drawn uniformly; each should be far from empty
    assert 70 <= counts[2] <= 130 and counts[2] + counts[3] == 200


def test_dataset_independent_of_jobs():
    a = generate_dataset(6, (1, 3), seed=3, jobs=1)
    b = generate_dataset(6, (1, 3), seed=3, jobs=2)
    for ra, rb in zip(a.records, b.records):
        np.testing.assert_array_equal(ra.scene.composite, rb.scene.composite)


def test_holdout_split():
    data = generate_dataset(10, (2, 2), seed=0, holdout=3)
    assert [r.split for r in data.records] == ["train"] * 7 + ["val"] * 3


def test_dataset_round_trip(tmp_path):
    data = generate_dataset(5, (2, 3), seed=1, out_dir=tmp_path)
    loaded = load_dataset(tmp_path)
    for a, b in zip(data.records, loaded.records):
        assert a.scene_id == b.scene_id and a.scene.spec == b.scene.spec
        np.testing.assert_array_equal(a.scene.panoptic, b.scene.panoptic)
        assert np.abs(composite(b.scene.stack) - a.scene.composite).max() <= 1 / 255
