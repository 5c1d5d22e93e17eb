import json

import numpy as np
import pytest

from mwgs import io
from mwgs.cli import main
from mwgs.config import RunConfig

SMALL = ["--set", "k=4", "--set", "n_v=8", "--set", "n_r=8", "--set", "n_g=4", "--set", "L_pe=1"]


@pytest.fixture(scope="module")
def trained(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    code = main(["train", "--dataset", str(tiny_dataset.root), "--output", str(out), "--steps", "3",
                 *SMALL])
    assert code == 0
    return tiny_dataset, out / "checkpoint"


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr()


def test_help_lists_every_config_key(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    assert all(key in text for key in RunConfig().to_dict())


def test_synth_prints_image_count_and_is_repeatable(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_blobs": 2, "n_cameras": 3, "n_test": 1, "width": 16, "height": 16}))
    code, out = run(capsys, "synth", str(spec), str(tmp_path / "a"))
    first = json.loads(out.out)
    assert code == 0 and first["images"] == 4
    _, out = run(capsys, "synth", str(spec), str(tmp_path / "b"))
    assert json.loads(out.out)["manifest_sha256"] == first["manifest_sha256"]


def test_input_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"k": 3,\n "M": ,}')
    code, out = run(capsys, "train", "--config", str(bad), "--dataset", str(tmp_path))
    assert code == 2 and "line 2" in out.err
    code, out = run(capsys, "train", "--dataset", str(tmp_path / "missing"))
    assert code == 2
    code, out = run(capsys, "train", "--dataset", str(tmp_path), "--set", "n_r=30")
    assert code == 2 and "n_r" in out.err
    code, out = run(capsys, "render", "--out", str(tmp_path / "x.ppm"))
    assert code == 2 and "checkpoint" in out.err


def test_selftest_exit_codes(capsys, monkeypatch):
    code, out = run(capsys, "selftest", "dwt", "loss")
    assert code == 0 and out.out.count("PASS") == 2
    monkeypatch.setenv("MWGS_SELFTEST_CORRUPT", "dwt")
    code, out = run(capsys, "selftest", "dwt")
    assert code == 1 and "FAIL" in out.out
    code, _ = run(capsys, "selftest", "nonsense")
    assert code == 2


def test_render_tune_and_eval(trained, tmp_path, capsys):
    ds, ck = trained
    base = ["--checkpoint", str(ck), "--dataset", str(ds.root)]
    assert run(capsys, "render", *base, "--out", str(tmp_path / "r.ppm"))[0] == 0
    assert run(capsys, "tune", *base, "--out", str(tmp_path / "t.ppm"))[0] == 0
    assert np.array_equal(io.read_ppm(tmp_path / "r.ppm"), io.read_ppm(tmp_path / "t.ppm"))
    code, out = run(capsys, "eval", *base, "--split", "test")
    assert code == 0 and set(json.loads(out.out)["images"]) == set(ds.split_ids("test"))


def test_transfer_modes(trained, tmp_path, capsys):
    ds, ck = trained
    base = ["--checkpoint", str(ck), "--dataset", str(ds.root)]
    ids = ds.split_ids("train")
    code, _ = run(capsys, "transfer", *base, "--view", ids[0], "--reference", ids[1],
                  "--out", str(tmp_path / "x.ppm"))
    assert code == 0
    external = tmp_path / "ext.ppm"
    io.write_ppm(external, ds.images[ids[1]])
    code, out = run(capsys, "transfer", *base, "--reference", str(external), "--out", str(tmp_path / "y.ppm"))
    assert code == 2 and "conv encoder" in out.err


def test_diagnostics(trained, tmp_path, capsys):
    ds, ck = trained
    base = ["--checkpoint", str(ck), "--dataset", str(ds.root)]
    code, out = run(capsys, "dump-attention", *base, "--out", str(tmp_path / "att.ppm"))
    assert code == 0 and json.loads(out.out)["total_samples"] > 0
    code, _ = run(capsys, "dump-bundle", *base, "--out", str(tmp_path / "bundle"))
    assert code == 0 and io.read_raw(tmp_path / "bundle" / "fmap.raw").shape == (8, 16, 16)
    code, out = run(capsys, "bench", *base, "--frames", "2", "--warmup", "0")
    report = json.loads(out.out)
    assert code == 0 and report["frames"] == 2 and set(report["stage_ms_mean"]) == {"encode", "sample", "hrfn", "raster"}


def test_threads_from_environment(trained, tmp_path, capsys, monkeypatch):
    ds, ck = trained
    base = ["--checkpoint", str(ck), "--dataset", str(ds.root)]
    run(capsys, "render", *base, "--threads", "1", "--out", str(tmp_path / "a.ppm"))
    monkeypatch.setenv("MWGS_THREADS", "4")
    run(capsys, "render", *base, "--out", str(tmp_path / "b.ppm"))
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
    monkeypatch.setenv("MWGS_THREADS", "many")
    assert run(capsys, "render", *base, "--out", str(tmp_path / "c.ppm"))[0] == 2
