import json
import math

import numpy as np
import pytest

from u3spat import io as fio
from u3spat.cli import main

TINY = """
[meta]
preset = desk

[geometry]
num_elements_dense = 8
num_elements_sparse = 4

[acquisition]
num_slices = 9
sampling_rate_hz = 10000000.0

[image]
side = 16

[network]
depth = 2
width = 16

[training]
iterations = 3
embed_iterations = 3

[evaluation]
center_slice = 5
"""


@pytest.fixture
def tiny(tmp_path):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY)
    out = tmp_path / "out"
    return ["--config", str(cfg), "--out", str(out)], out


def test_unknown_subcommand_and_flag_exit_2(capsys):
    for argv in (["frobnicate"], ["schedule", "--bogus"], ["reconstruct", "--method", "magic"]):
        with pytest.raises(SystemExit) as info:
            main(argv)
        assert info.value.code == 2


def test_unknown_config_key_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[training]\nlearning_rate = 1\n")
    assert main(["config", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_config_dump(tmp_path, capsys):
    assert main(["config", "--dump", "--preset", "paper", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "num_elements_sparse = 21" in text and "delta = 0.8" in text


def test_schedule_table_step(tmp_path, capsys):
    assert main(["schedule", "--preset", "paper", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("rotation step 2.571 deg")
    thetas = [float(r.split()[3]) for r in lines[2:]]
    assert np.allclose(np.diff(thetas), 2.571, atol=1e-3)
    man = json.loads((tmp_path / "manifest_schedule.json").read_text())
    assert set(man["outputs"]) == {"schedule.txt"}
    assert man["preset"] == "paper" and man["seed"] == 0


def test_output_dir_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("U3S_OUT_DIR", str(tmp_path / "env"))
    assert main(["phantom"]) == 0
    assert (tmp_path / "env" / "phantom.ini").exists()
    assert (tmp_path / "env" / "manifest_phantom.json").exists()


def test_missing_inputs_exit_1(tiny, capsys):
    flags, out = tiny
    assert main(["prior", *flags]) == 1
    assert "acquire" in capsys.readouterr().err


def test_pipeline(tiny, capsys):
    flags, out = tiny
    assert main(["acquire", *flags]) == 0
    assert len(list((out / "sinograms" / "sparse").iterdir())) == 9
    assert main(["prior", "--slice", "5", *flags]) == 0
    prior, prov = fio.load_image(out / "priors" / "prior_m005.u3simg")
    assert prior.min() == 0.0 and prior.max() == 1.0 and prov["center"] == "5"
    for method in ("ds", "ss", "u3s", "u3s-noprior"):
        assert main(["reconstruct", "--method", method, *flags]) == 0
    assert len(list((out / "images" / "u3s").iterdir())) == 5
    assert (out / "networks" / "embedded_m005.u3snet").exists()
    assert main(["unmix", "--method", "u3s", *flags]) == 0
    assert main(["evaluate", *flags]) == 0
    rows = fio.load_metrics(out / "metrics_m005.csv")
    assert {r["method"] for r in rows} == {"ss", "u3s-noprior", "u3s"}
    assert main(["export-png", str(out / "images" / "ds"), *flags]) == 0
    assert len(list((out / "images" / "ds").glob("*.png"))) == 5
    man = json.loads((out / "manifest_reconstruct.json").read_text())
    assert all(k.startswith(("images/", "networks/", "losses/")) for k in man["outputs"])
    # config written by acquire is picked up without --config
    assert main(["reconstruct", "--method", "ss", "--out", str(out)]) == 0


def test_ss_equals_ds_when_counts_match(tmp_path, capsys):
    cfg = tmp_path / "same.ini"
    cfg.write_text(TINY.replace("num_elements_sparse = 4", "num_elements_sparse = 8"))
    flags = ["--config", str(cfg), "--out", str(tmp_path / "o")]
    for argv in (["acquire"], ["reconstruct", "--method", "ds"], ["reconstruct", "--method", "ss"]):
        assert main([*argv, *flags]) == 0
    assert main(["evaluate", "--methods", "ss", *flags]) == 0
    rows = fio.load_metrics(tmp_path / "o" / "metrics_m005.csv")
    assert all(math.isinf(float(r["psnr_db"])) for r in rows)


def test_missing_dense_reference_exit_1(tiny, capsys):
    flags, out = tiny
    assert main(["acquire", "--no-dense", *flags]) == 0
    assert main(["reconstruct", "--method", "ds", *flags]) == 1
    assert "MissingReferenceError" in capsys.readouterr().err


def test_sweep_rows_sorted(tiny, capsys):
    flags, out = tiny
    assert main(["sweep", "--axis", "slice_spacing", "--values", "1.0,0.5,2.0", "--prior-only", *flags]) == 0
    text = (out / "sweep_slice_spacing.csv").read_text().splitlines()
    assert text[0] == "axis,value,prior_psnr_db,psnr_db,ssim"
    assert [float(r.split(",")[1]) for r in text[1:]] == [0.5, 1.0, 2.0]
    assert main(["sweep", "--axis", "depth", "--values", "x", *flags]) == 2


def test_rerun_is_bitwise_identical(tiny, capsys):
    flags, out = tiny
    assert main(["acquire", *flags]) == 0
    assert main(["reconstruct", "--method", "u3s", "--seed", "3", *flags]) == 0
    first = json.loads((out / "manifest_reconstruct.json").read_text())["outputs"]
    assert main(["reconstruct", "--method", "u3s", "--seed", "3", *flags]) == 0
    second = json.loads((out / "manifest_reconstruct.json").read_text())["outputs"]
    assert first == second
