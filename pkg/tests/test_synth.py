"""Synthetic person generator: determinism, masks, splits and persistence."""

import numpy as np
import pytest

from spreid.synth import (
    USED_LABELS,
    CameraStyle,
    SplitError,
    generate,
    load_dataset,
    make_cameras,
    make_identities,
    render,
)


@pytest.fixture(scope="module")
def ds():
    return generate(seed=7, n_ids=20, imgs_per_id=12, n_cams=3)


def test_same_seed_byte_identical(ds):
    again = generate(seed=7, n_ids=20, imgs_per_id=12, n_cams=3)
    assert ds.images.tobytes() == again.images.tobytes()
    assert ds.masks.tobytes() == again.masks.tobytes()
    assert ds.manifest == again.manifest


def test_other_seed_differs(ds):
    assert not np.array_equal(generate(seed=8, n_ids=20, imgs_per_id=12, n_cams=3).images, ds.images)


def test_shapes_and_ranges(ds):
    assert ds.images.shape == (240, 3, 64, 24) and ds.masks.shape == (240, 64, 24)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert set(np.unique(ds.masks)) <= set(USED_LABELS)


def test_manifest_validation(ds):
    """Independent check of the split rules over the manifest records alone."""
    recs = ds.manifest
    assert len(recs) == 20 * 12
    train = {r["identity"] for r in recs if r["split"] == "train"}
    test = {r["identity"] for r in recs if r["split"] != "train"}
    assert train and test and not train & test
    gallery = [(r["identity"], r["camera"]) for r in recs if r["split"] == "gallery"]
    queries = [r for r in recs if r["split"] == "query"]
    assert {q["identity"] for q in queries} == test
    for q in queries:
        assert any(pid == q["identity"] and cam != q["camera"] for pid, cam in gallery)
    # at most one query per (identity, camera)
    keys = [(q["identity"], q["camera"]) for q in queries]
    assert len(keys) == len(set(keys))


def test_clean_render_mask_matches_silhouette():
    rng = np.random.default_rng(0)
    person = make_identities(rng, 1)[0]
    cam = make_cameras(rng, 1, clutter=0.0, occlusion=0.0)[0]
    for _ in range(10):
        img, mask, sil = render(rng, person, cam, (64, 24))
        assert np.array_equal(mask > 0, sil)
        assert sil.any() and not sil.all()


def test_parts_stack_top_to_bottom():
    rng = np.random.default_rng(1)
    person = make_identities(rng, 1)[0]
    cam = make_cameras(rng, 1, 0.0, 0.0)[0]
    _, mask, _ = render(rng, person, cam, (128, 48), jitter=False)
    rows = {lab: np.flatnonzero((mask == lab).any(axis=1)) for lab in USED_LABELS[1:]}
    hair, face, upper, pants, rshoe, lshoe = (rows[lab] for lab in USED_LABELS[1:])
    assert hair.max() < face.min() and face.max() < upper.min()
    assert upper.max() < pants.min() and pants.max() < rshoe.min()
    assert np.array_equal(rshoe, lshoe)


def test_occlusion_marks_background():
    rng = np.random.default_rng(2)
    person = make_identities(rng, 1)[0]
    cam = make_cameras(rng, 1, 0.0, 1.0)[0]
    _, mask, sil = render(rng, person, cam, (64, 24))
    assert (mask > 0).sum() < sil.sum()


def test_identity_colours_fixed_per_seed():
    a = make_identities(np.random.default_rng(5), 6)
    b = make_identities(np.random.default_rng(5), 6)
    assert all(np.array_equal(x.upper, y.upper) for x, y in zip(a, b))


@pytest.mark.parametrize("kwargs", [dict(n_ids=1), dict(n_cams=1), dict(imgs_per_id=1),
                                    dict(train_fraction=1.0)])
def test_impossible_splits(kwargs):
    args = {**dict(seed=0, n_ids=4, imgs_per_id=4, n_cams=2), **kwargs}
    with pytest.raises(SplitError):
        generate(**args)


def test_camera_style_validation():
    with pytest.raises(ValueError):
        CameraStyle(0, "stripes", np.zeros(3), gain=0.0, clutter_density=0.1, occlusion_prob=0.1)
    with pytest.raises(ValueError):
        CameraStyle(0, "stripes", np.zeros(3), gain=1.0, clutter_density=1.5, occlusion_prob=0.1)


def test_save_load_round_trip(tmp_path):
    small = generate(seed=1, n_ids=4, imgs_per_id=4, n_cams=2)
    manifest = small.save(tmp_path)
    back = load_dataset(manifest)
    assert np.array_equal(back.images, small.images.astype(np.float64))
    assert np.array_equal(back.masks, small.masks)
    assert list(back.splits) == list(small.splits)
    q = load_dataset(manifest, "query")
    assert len(q.images) == len(small.subset("query"))
    with pytest.raises(SplitError):
        load_dataset(manifest, "nonexistent")
