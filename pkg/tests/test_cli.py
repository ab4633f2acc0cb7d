import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from intrinsic_decomp.cli import main
from intrinsic_decomp.dataio import load_image, load_judgements, save_image
from intrinsic_decomp.metrics import dense_report, whdr

TINY = ["--blocks", "1", "--channels", "4", "--guide-layers", "2", "--guide-channels", "4"]


def _files(root):
    out = {}
    for d, _, names in os.walk(root):
        for n in names:
            p = os.path.join(d, n)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth", "--n", "4", "--size", "16", "--regions", "3", "--pairs", "40", "--seed", "1",
                 "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(dataset), "--loss", "iiw", "--steps", "50", "--lr", "3e-3",
                 "--out", str(out)] + TINY) == 0
    return out


class TestSynth:
    def test_layout_and_determinism(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["synth", "--n", "8", "--size", "64", "--seed", "7", "--out", str(a)]) == 0
        first = _files(a)
        assert main(["synth", "--n", "8", "--size", "64", "--seed", "7", "--out", str(a)]) == 0
        assert _files(a) == first
        assert main(["synth", "--n", "8", "--size", "64", "--seed", "7", "--out", str(b)]) == 0
        subdirs = [d for d in os.listdir(a) if os.path.isdir(a / d)]
        assert len(subdirs) == 8
        manifest = json.loads((a / "manifest.json").read_text())
        assert len(manifest["samples"]) == 8
        # only the resolved config differs (it records the output path)
        fa, fb = _files(a), _files(b)
        assert fa.pop("config.txt") != fb.pop("config.txt") and fa == fb
        for d in subdirs:
            load_judgements(a / d / "judgements.json")

    def test_size_rejected(self, tmp_path):
        assert main(["synth", "--n", "1", "--size", "8", "--out", str(tmp_path)]) == 1

    def test_bad_flag_is_validation(self, tmp_path):
        assert main(["synth", "--n", "x", "--out", str(tmp_path)]) == 1
        assert main(["nope"]) == 1


class TestTrain:
    def test_outputs_and_decrease(self, trained):
        for name in ("checkpoint.bin", "loss.csv", "config.txt"):
            assert (trained / name).exists()
        rows = _rows(trained / "loss.csv")
        assert len(rows) == 50 and {"step", "l_di", "l_g", "l_df", "total"} <= set(rows[0])
        totals = [float(r["total"]) for r in rows]
        assert np.mean(totals[-10:]) < np.mean(totals[:10])

    def test_joint_scaling(self, dataset, tmp_path):
        assert main(["train", "--data", str(dataset), "--loss", "joint", "--steps", "4", "--out", str(tmp_path)]
                    + TINY) == 0
        for r in _rows(tmp_path / "loss.csv"):
            assert float(r["total"]) == pytest.approx(2 * float(r["iiw"]) + float(r["dense"]), abs=1e-6)

    def test_resume(self, dataset, tmp_path):
        common = ["--data", str(dataset), "--loss", "dense", "--lr", "1e-3", "--seed", "3"] + TINY
        assert main(["train", "--steps", "6", "--out", str(tmp_path / "full")] + common) == 0
        assert main(["train", "--steps", "3", "--out", str(tmp_path / "half")] + common) == 0
        assert main(["train", "--steps", "3", "--out", str(tmp_path / "rest"),
                     "--resume", str(tmp_path / "half" / "checkpoint.bin")] + common) == 0
        full = _rows(tmp_path / "full" / "loss.csv")
        rest = _rows(tmp_path / "rest" / "loss.csv")
        assert rest[0]["step"] == "3"
        for a, b in zip(full[3:], rest):
            assert abs(float(a["total"]) - float(b["total"])) <= 1e-5

    def test_missing_judgements(self, dataset, tmp_path):
        import shutil
        data = tmp_path / "d"
        shutil.copytree(dataset, data)
        m = json.loads((data / "manifest.json").read_text())
        for e in m["samples"]:
            e["files"].pop("judgements")
        (data / "manifest.json").write_text(json.dumps(m))
        assert main(["train", "--data", str(data), "--loss", "iiw", "--steps", "1", "--out", str(tmp_path / "o")]) == 1
        assert main(["train", "--data", str(tmp_path / "absent"), "--loss", "iiw", "--out", str(tmp_path)]) == 1

    def test_config_file(self, dataset, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"# tiny run\ndata = {dataset}\nloss = iiw\nsteps = 2\nout = {tmp_path / 'o'}\n"
                       "blocks = 1\nchannels = 4\nguide-layers = 2\nguide_channels = 4\n")
        assert main(["train", "--config", str(cfg)]) == 0
        resolved = (tmp_path / "o" / "config.txt").read_text()
        assert "steps = 2" in resolved and "channels = 4" in resolved
        # the resolved config is itself a valid config file
        assert main(["train", "--config", str(tmp_path / "o" / "config.txt")]) == 0
        bad = tmp_path / "bad.cfg"
        bad.write_text("stepz = 3\n")
        assert main(["train", "--config", str(bad), "--data", str(dataset), "--loss", "iiw",
                     "--out", str(tmp_path)]) == 1
        bad.write_text("steps = many\n")
        assert main(["train", "--config", str(bad), "--data", str(dataset), "--loss", "iiw",
                     "--out", str(tmp_path)]) == 1


class TestInfer:
    def test_outputs(self, trained, dataset, tmp_path):
        from intrinsic_decomp.synth import SynthConfig, generate_sample

        img_path = dataset / "sample_00000" / "input.png"
        assert main(["infer", "--checkpoint", str(trained / "checkpoint.bin"), "--image", str(img_path),
                     "--out", str(tmp_path)]) == 0
        image = load_image(img_path)
        outs = {n: load_image(tmp_path / f"{n}.png") for n in ("albedo", "shading", "edge", "flat-albedo")}
        for n, arr in outs.items():
            assert arr.shape[1:] == image.shape[1:]
        a, s = outs["albedo"], outs["shading"]
        ok = (a > 0) & (a < 1) & (s > 0) & (s < 1)
        assert ok.any()
        assert np.abs(a * s - image)[ok].max() <= 1e-3

        labels = generate_sample(SynthConfig(image_size=16, region_count=3, judgement_pairs=40, seed=1), 0).meta[
            "regions"]

        def within(x):
            return sum(x[:, labels == r].var(axis=1).sum() for r in np.unique(labels))

        assert within(outs["flat-albedo"]) <= within(a)

    def test_bad_inputs(self, trained, tmp_path):
        junk = tmp_path / "junk.bin"
        junk.write_bytes(b"garbage")
        img = tmp_path / "i.png"
        save_image(np.ones((3, 8, 8)) * 0.5, img)
        assert main(["infer", "--checkpoint", str(junk), "--image", str(img), "--out", str(tmp_path)]) == 1
        assert main(["infer", "--checkpoint", str(trained / "checkpoint.bin"), "--image", str(tmp_path / "no.png"),
                     "--out", str(tmp_path)]) == 1
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["infer", "--checkpoint", str(trained / "checkpoint.bin"), "--image", str(img),
                     "--out", str(blocker / "sub")]) == 2


class TestFlatten:
    def test_global_smoothing(self, tmp_path, rng):
        src = tmp_path / "noise.png"
        noise = rng.random((3, 48, 48))
        save_image(noise, src, 16)
        assert main(["flatten", "--image", str(src), "--sigma-r", "1e6", "--out", str(tmp_path / "o.png")]) == 0
        out = load_image(tmp_path / "o.png")
        assert out.var() < 0.1 * load_image(src).var()

    def test_huge_guidance(self, tmp_path, rng):
        src, guide = tmp_path / "x.png", tmp_path / "g.png"
        save_image(rng.random((3, 32, 32)), src, 16)
        save_image(np.ones((1, 32, 32)), guide)
        assert main(["flatten", "--image", str(src), "--guidance", str(guide), "--guidance-scale", "100",
                     "--out", str(tmp_path / "o.png")]) == 0
        assert np.abs(load_image(tmp_path / "o.png") - load_image(src)).max() < 1e-3

    def test_constant(self, tmp_path):
        src = tmp_path / "c.png"
        save_image(np.full((3, 20, 20), 0.4), src, 16)
        assert main(["flatten", "--image", str(src), "--out", str(tmp_path / "o.png")]) == 0
        np.testing.assert_array_equal(load_image(tmp_path / "o.png"), load_image(src))

    def test_bad_params(self, tmp_path):
        src = tmp_path / "c.png"
        save_image(np.full((3, 8, 8), 0.4), src)
        assert main(["flatten", "--image", str(src), "--sigma-r", "0", "--out", str(tmp_path / "o.png")]) == 1


class TestEval:
    def test_perfect_and_equivalent(self, dataset, tmp_path):
        d = dataset / "sample_00001"
        report_path = tmp_path / "r.json"
        assert main(["eval", "--albedo", str(d / "albedo.png"), "--shading", str(d / "shading.png"),
                     "--gt-albedo", str(d / "albedo.png"), "--gt-shading", str(d / "shading.png"),
                     "--judgements", str(d / "judgements.json"), "--out", str(report_path)]) == 0
        doc = json.loads(report_path.read_text())
        from intrinsic_decomp.metrics import MetricsReport
        assert set(doc) == set(MetricsReport.keys())
        assert doc["whdr"] == 0
        for k in ("mse_albedo", "mse_shading", "lmse_albedo", "lmse_shading"):
            assert doc[k] == 0
        assert doc["dssim_average"] == pytest.approx(0, abs=1e-9)

    def test_matches_library(self, dataset, tmp_path):
        d0, d1 = dataset / "sample_00000", dataset / "sample_00002"
        assert main(["eval", "--albedo", str(d0 / "input.png"), "--shading", str(d0 / "shading.png"),
                     "--gt-albedo", str(d0 / "albedo.png"), "--gt-shading", str(d1 / "shading.png"),
                     "--judgements", str(d0 / "judgements.json"), "--scale-invariant",
                     "--out", str(tmp_path / "r.json")]) == 0
        doc = json.loads((tmp_path / "r.json").read_text())
        lib = dense_report(load_image(d0 / "input.png"), load_image(d0 / "shading.png"), load_image(d0 / "albedo.png"),
                           load_image(d1 / "shading.png"), None, True)
        lib.whdr = whdr(load_image(d0 / "input.png"), load_judgements(d0 / "judgements.json"))
        assert doc == json.loads(lib.to_json())

    def test_validation(self, dataset, tmp_path):
        d = dataset / "sample_00000"
        assert main(["eval", "--albedo", str(d / "albedo.png")]) == 1
        assert main(["eval", "--albedo", str(d / "albedo.png"), "--gt-albedo", str(d / "albedo.png")]) == 1
        small = tmp_path / "s.png"
        save_image(np.ones((3, 4, 4)), small)
        assert main(["eval", "--albedo", str(small), "--shading", str(d / "shading.png"),
                     "--gt-albedo", str(d / "albedo.png"), "--gt-shading", str(d / "shading.png")]) == 1


class TestGradcheck:
    def test_pass_and_report(self, capsys):
        assert main(["gradcheck", "--seed", "0"]) == 0
        lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith(("PASS", "FAIL"))]
        names = [ln.split()[1] for ln in lines]
        assert len(names) == len(set(names)) > 20
        assert all(ln.startswith("PASS") for ln in lines)

    def test_corrupted_adjoint_fails(self, capsys):
        assert main(["gradcheck", "--corrupt-adjoint"]) == 1
        assert "FAIL" in capsys.readouterr().out


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "intrinsic_decomp.cli", "synth", "--n", "1", "--size", "16",
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    bad = subprocess.run([sys.executable, "-m", "intrinsic_decomp.cli", "synth", "--size", "4", "--out",
                          str(tmp_path)], capture_output=True, text=True)
    assert bad.returncode == 1 and "error" in bad.stderr
