import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from countadapt.cli import main
from countadapt.core import write_dmap
from countadapt.synth import DomainSpec

TINY_CONFIG = {
    "input_size": [32, 32],
    "front_channels": [[4, 4], [8, 8]],
    "backend_channels": 8,
    "disc_channels": [4, 4, 4, 4, 1],
    "stage1_steps": 7,
    "stage2_steps": 4,
    "pretrain_optimizer": "adam",
    "pretrain_lr": 0.001,
}


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    spec = root / "spec.json"
    src = DomainSpec(name="s", count_dist=("poisson", 8), blob_radius_range=(1.5, 2.5), image_size=(64, 64))
    tgt = DomainSpec(name="t", count_dist=("poisson", 3), blob_radius_range=(3, 5), image_size=(64, 64))
    spec.write_text(json.dumps({"source": src.to_dict(), "target": tgt.to_dict()}))
    assert main(["gen-data", "--spec", str(spec), "--out", str(root / "d"), "--n", "3", "--n-eval", "2", "--seed", "4"]) == 0
    (root / "cfg.json").write_text(json.dumps(TINY_CONFIG))
    return root


class TestGenData:
    def test_preset_layout(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gen-data", "--preset", "shift", "--out", tmp_path / "d", "--n", 50, "--seed", 0)
        assert code == 0
        pngs = list((tmp_path / "d").rglob("*.png"))
        anns = list((tmp_path / "d").rglob("annotations.json"))
        assert len(pngs) == 100 and len(anns) == 2
        assert not any(p.suffix == ".json" for p in (tmp_path / "d" / "target" / "images").iterdir())
        assert json.loads(out)["target_images"].endswith("images")

    def test_same_seed_same_tree(self, tmp_path, capsys):
        for name in "ab":
            run(capsys, "gen-data", "--preset", "shift", "--out", tmp_path / name, "--n", 3, "--seed", 7)
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
        run(capsys, "gen-data", "--preset", "shift", "--out", tmp_path / "c", "--n", 3, "--seed", 8)
        assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")

    def test_zero_images(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-data", "--preset", "shift", "--out", tmp_path / "d", "--n", 0)
        assert code == 2 and "--n" in err

    def test_non_empty_needs_force(self, tmp_path, capsys):
        (tmp_path / "d").mkdir()
        (tmp_path / "d" / "x").write_text("keep")
        code, _, err = run(capsys, "gen-data", "--preset", "shift", "--out", tmp_path / "d", "--n", 1)
        assert code == 2 and "not empty" in err
        assert run(capsys, "gen-data", "--preset", "shift", "--out", tmp_path / "d", "--n", 1, "--force")[0] == 0
        assert not (tmp_path / "d" / "x").exists()

    def test_needs_source_choice(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as info:
            main(["gen-data", "--out", str(tmp_path), "--n", "1"])
        assert info.value.code == 2


class TestTraining:
    def test_pretrain_adapt_resume_eval(self, small_data, tmp_path, capsys):
        d, cfg = small_data / "d", small_data / "cfg.json"
        code, out, _ = run(capsys, "pretrain", "--config", cfg, "--data", d / "source", "--out", tmp_path / "pre.ckpt")
        assert code == 0 and (tmp_path / "pre.ckpt").exists()
        assert json.loads(out)["steps"] == 7
        assert len((tmp_path / "pre.ckpt.log.jsonl").read_text().splitlines()) == 7

        # the labelled target folder is refused, its image folder accepted
        code, _, err = run(capsys, "adapt", "--config", cfg, "--ckpt", tmp_path / "pre.ckpt", "--source", d / "source",
                           "--target", d / "target", "--out", tmp_path / "x.ckpt")
        assert code == 2 and "--allow-annotated" in err
        args = ["adapt", "--config", cfg, "--ckpt", tmp_path / "pre.ckpt", "--source", d / "source", "--target", d / "target" / "images"]
        assert run(capsys, *args, "--out", tmp_path / "full.ckpt")[0] == 0
        assert run(capsys, *args, "--out", tmp_path / "half.ckpt", "--until", 2)[0] == 0
        code, out, _ = run(capsys, "adapt", "--config", cfg, "--ckpt", tmp_path / "half.ckpt", "--source", d / "source",
                           "--target", d / "target" / "images", "--out", tmp_path / "half.ckpt")
        assert code == 0 and json.loads(out)["resumed_from"] == 2
        assert (tmp_path / "half.ckpt").read_bytes() == (tmp_path / "full.ckpt").read_bytes()
        assert (tmp_path / "half.ckpt.log.jsonl").read_bytes() == (tmp_path / "full.ckpt.log.jsonl").read_bytes()
        assert run(capsys, "adapt", "--config", cfg, "--ckpt", tmp_path / "pre.ckpt", "--source", d / "source",
                   "--target", d / "target", "--out", tmp_path / "y.ckpt", "--allow-annotated")[0] == 0

        code, out, err = run(capsys, "eval", "--ckpt", tmp_path / "full.ckpt", "--data", d / "target-eval", "--gmae-levels", "0,1,2,3")
        report = json.loads(out)
        assert code == 0 and set(report) == {"dataset", "n_images", "mae", "mse", "gmae"}
        assert report["n_images"] == 2 and list(report["gmae"]) == ["0", "1", "2", "3"]
        assert report["gmae"]["0"] == report["mae"]
        assert "MAE" in err

        code, out, _ = run(capsys, "predict", "--ckpt", tmp_path / "full.ckpt", "--image",
                           next((d / "target-eval" / "images").iterdir()), "--out", tmp_path / "p.dmap")
        assert code == 0 and json.loads(out)["shape"] == [16, 16]
        assert run(capsys, "render", "--dmap", tmp_path / "p.dmap", "--out", tmp_path / "p.png")[0] == 0

    def test_malformed_config(self, small_data, tmp_path, capsys):
        (tmp_path / "bad.json").write_text(json.dumps({**TINY_CONFIG, "scales": [0.8, 0.4]}))
        code, _, err = run(capsys, "pretrain", "--config", tmp_path / "bad.json", "--data", small_data / "d" / "source", "--out", tmp_path / "c")
        assert code == 2 and "scales:" in err
        (tmp_path / "bad.json").write_text("{\"seed\": }")
        code, _, err = run(capsys, "pretrain", "--config", tmp_path / "bad.json", "--data", small_data / "d" / "source", "--out", tmp_path / "c")
        assert code == 2 and "bad.json:1:" in err
        (tmp_path / "bad.json").write_text(json.dumps({"stage_one_steps": 3}))
        code, _, err = run(capsys, "pretrain", "--config", tmp_path / "bad.json", "--data", small_data / "d" / "source", "--out", tmp_path / "c")
        assert code == 2 and "stage_one_steps" in err

    def test_missing_checkpoint_file(self, small_data, tmp_path, capsys):
        d = small_data / "d"
        code, _, _ = run(capsys, "adapt", "--ckpt", tmp_path / "none.ckpt", "--source", d / "source",
                         "--target", d / "target" / "images", "--out", tmp_path / "o.ckpt")
        assert code == 2


class TestEval:
    def test_oracle_all_zero(self, small_data, capsys):
        code, out, _ = run(capsys, "eval", "--oracle", "--data", small_data / "d" / "target", "--gmae-levels", "0,1,2,3")
        report = json.loads(out)
        assert code == 0
        assert report["mae"] == report["mse"] == 0 and all(v == 0 for v in report["gmae"].values())

    def test_bad_levels(self, small_data, capsys):
        assert run(capsys, "eval", "--oracle", "--data", small_data / "d" / "target", "--gmae-levels", "a,b")[0] == 2

    def test_needs_exactly_one_model(self, small_data, capsys):
        assert run(capsys, "eval", "--data", small_data / "d" / "target")[0] == 2


class TestRender:
    def test_min_black_max_white(self, tmp_path, capsys):
        grid = np.array([[0.5, 1.0], [2.0, 1.25]])
        write_dmap(tmp_path / "g.dmap", grid)
        assert run(capsys, "render", "--dmap", tmp_path / "g.dmap", "--out", tmp_path / "a.png")[0] == 0
        px = np.asarray(Image.open(tmp_path / "a.png"))
        # (v - 0.5) / 1.5 * 255, rounded half to even
        np.testing.assert_array_equal(px, [[0, 85], [255, 128]])
        run(capsys, "render", "--dmap", tmp_path / "g.dmap", "--out", tmp_path / "b.png")
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_flat_map(self, tmp_path, capsys):
        write_dmap(tmp_path / "g.dmap", np.full((3, 3), 2.0))
        run(capsys, "render", "--dmap", tmp_path / "g.dmap", "--out", tmp_path / "a.png")
        assert not np.asarray(Image.open(tmp_path / "a.png")).any()


class TestGradcheck:
    def test_filter(self, capsys):
        code, out, err = run(capsys, "gradcheck", "--op", "conv2d_dilated")
        doc = json.loads(out)
        assert code == 0 and doc["ok"] and list(doc["ops"]) == ["conv2d_dilated"]
        assert doc["ops"]["conv2d_dilated"]["max_rel_error"] < 1e-4
        assert "conv2d_dilated" in err

    def test_unknown(self, capsys):
        assert run(capsys, "gradcheck", "--op", "softmax")[0] == 2

    def test_list(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--list")
        assert code == 0 and "counting_net" in json.loads(out)


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "countadapt", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen-data", "pretrain", "adapt", "eval", "render", "gradcheck"):
        assert cmd in res.stdout
