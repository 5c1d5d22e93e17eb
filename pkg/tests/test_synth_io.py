import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mwgs import io
from mwgs.errors import InvalidConfig, InvalidShape, InvalidState, MissingEntry
from mwgs.synth import (Appearance, SyntheticSceneSpec, apply_appearance, eval_vm_separation,
                        invert_appearance, load_dataset, synthesize)

from conftest import toy_spec

small = dict(n_blobs=3, n_cameras=3, width=16, height=16)


def test_identity_appearance_is_a_no_op(rng):
    img = rng.uniform(size=(5, 5, 3))
    assert np.array_equal(apply_appearance(img, Appearance.identity()), img)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.5, 1.5), st.floats(0.7, 1.4), st.floats(-0.1, 0.1), st.integers(0, 2**31))
def test_appearance_is_invertible_away_from_clipping(gain, gamma, tint, seed):
    a = Appearance((gain, gain, gain), gamma, (tint, tint, tint))
    img = np.random.default_rng(seed).uniform(0.05, 0.6, size=(4, 4, 3))
    out = apply_appearance(img, a)
    ok = (out > 0) & (out < 1)
    assert np.allclose(invert_appearance(out, a)[ok], img[ok], atol=1e-12)


def test_synthesis_is_deterministic(tmp_path):
    m1 = synthesize(toy_spec(**small), tmp_path / "a")
    m2 = synthesize(toy_spec(**small), tmp_path / "b")
    assert m1 == m2
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    assert synthesize(toy_spec(seed=1, **small), tmp_path / "c")["files"] != m1["files"]


def test_layout_splits_and_references(tmp_path):
    synthesize(toy_spec(n_test=2, **small), tmp_path)
    ds = load_dataset(tmp_path)
    assert len(ds.split_ids("train")) == 3 and len(ds.split_ids("test")) == 2
    assert ds.image_hw == (16, 16)
    for i in ds.split_ids("test"):
        ref = ds.references[i]
        assert ds.splits[ref] == "train"
        appearance = {r["id"]: r["appearance"] for r in ds.records}
        assert appearance[ref] == appearance[i]
    assert ds.points.shape == (3, 3)


def test_occluder_masks_are_exact(tmp_path):
    synthesize(toy_spec(occluder_prob=1.0, occluder_color=[1.0, 0.0, 1.0], **small), tmp_path)
    ds = load_dataset(tmp_path)
    for i in ds.ids:
        mask = ds.mask(i) > 0.5
        assert mask.any() and set(np.unique(ds.mask(i))) <= {0.0, 1.0}
        assert np.all(ds.images[i][mask] == [1.0, 0.0, 1.0])
    assert all(r["occluded"] for r in ds.records)


def test_spec_validation():
    with pytest.raises(InvalidConfig):
        SyntheticSceneSpec(occluder_prob=1.5).validate()
    with pytest.raises(InvalidConfig):
        SyntheticSceneSpec.from_dict({"n_blob": 3})
    with pytest.raises(MissingEntry):
        load_dataset("/nonexistent/dir")


def test_vm_separation_examples():
    mask = np.zeros((4, 4))
    mask[:2] = 1
    vm = np.where(mask > 0, 0.2, 0.9)
    res = eval_vm_separation([vm], [mask])
    assert res["occluded_mean"] == pytest.approx(0.2) and res["static_mean"] == pytest.approx(0.9)
    assert res["separation"] == pytest.approx(0.7)
    assert eval_vm_separation([np.full((4, 4), 0.5)], [mask])["separation"] == 0.0
    with pytest.raises(MissingEntry):
        eval_vm_separation([vm], [])
    with pytest.raises(InvalidState):
        eval_vm_separation([vm], [np.zeros((4, 4))])
    with pytest.raises(InvalidState):
        eval_vm_separation([vm], [np.zeros((2, 2))])


def test_ppm_roundtrip(tmp_path, rng):
    img = np.rint(rng.uniform(size=(7, 9, 3)) * 255) / 255
    io.write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(io.read_ppm(tmp_path / "a.ppm"), img)
    gray = np.rint(rng.uniform(size=(3, 5)) * 255) / 255
    io.write_ppm(tmp_path / "g.ppm", gray)
    assert np.array_equal(io.read_ppm(tmp_path / "g.ppm"), gray)
    with pytest.raises(InvalidShape):
        io.write_ppm(tmp_path / "x.ppm", np.zeros((2, 2, 4)))


def test_png_roundtrip(tmp_path, rng):
    img = np.rint(rng.uniform(size=(6, 4, 3)) * 255) / 255
    io.write_image(tmp_path / "a.png", img)
    assert np.array_equal(io.read_image(tmp_path / "a.png"), img)


def test_raw_and_params_roundtrip(tmp_path, rng):
    arr = rng.normal(size=(3, 4, 2))
    io.write_raw(tmp_path / "d.raw", arr)
    assert np.array_equal(io.read_raw(tmp_path / "d.raw"), arr)
    params = {"a": rng.normal(size=(2, 3)), "s": np.array(1.25), "e": np.zeros((0, 3))}
    io.save_params(tmp_path / "ck", params, {"step": 7})
    back, meta = io.load_params(tmp_path / "ck")
    assert meta == {"step": 7}
    assert all(back[k].shape == params[k].shape and np.array_equal(back[k], params[k]) for k in params)
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert [e["name"] for e in manifest["entries"]] == ["a", "e", "s"]
    with pytest.raises(MissingEntry):
        io.load_params(tmp_path / "nope")
