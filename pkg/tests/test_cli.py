import csv
import subprocess
import sys

import numpy as np
import pytest

from poseflow import io
from poseflow.cli import EVAL_COLUMNS, GRID_COLUMNS, main

TINY = ["--flow.width", "8", "--synth.width", "4", "--synth.num_res_blocks", "1", "--train.disc_width", "4",
        "--train.batch_size", "2", "--train.steps", "2", "--samples", "1"]


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    assert main(["toydata", "--out", str(out), "--n", "2", "--seed", "1"]) == 0
    return out


@pytest.fixture(scope="module")
def chain(data, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    d = str(data)
    assert main(["flow-train", "--data", d, "--run", str(root / "flow")] + TINY) == 0
    flow = str(root / "flow" / "checkpoints" / "flow.pfck")
    assert main(["garment-train", "--data", d, "--run", str(root / "garment"), "--flow", flow] + TINY) == 0
    garment = str(root / "garment" / "checkpoints" / "garment.pfck")
    assert main(["synth-train", "--data", d, "--run", str(root / "synth"), "--flow", flow, "--garment", garment] + TINY) == 0
    synth = str(root / "synth" / "checkpoints" / "synthesis.pfck")
    assert main(["infer", "--data", d, "--run", str(root / "infer"), "--flow", flow, "--garment", garment, "--synthesis", synth]) == 0
    return root, flow, garment, synth


class TestToydata:
    def test_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert main(["toydata", "--out", str(tmp_path / name), "--n", "4", "--seed", "1"]) == 0
        a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
        assert a == b
        assert "pairs.txt" in a and "flows/0003.pflow" in a

    def test_layout(self, data):
        lines = (data / "pairs.txt").read_text().splitlines()
        assert lines[0] == "images/0000_src.png\timages/0000_tgt.png"
        assert len(io.load_pair_list(data / "pairs.txt")) == 2

    def test_bad_size(self, tmp_path):
        assert main(["toydata", "--out", str(tmp_path), "--size", "48"]) == 1


class TestExitCodes:
    def test_missing_checkpoint(self, data, tmp_path):
        assert main(["garment-train", "--data", str(data), "--run", str(tmp_path / "r")] + TINY) == 2
        assert main(["garment-train", "--data", str(data), "--run", str(tmp_path / "r"), "--flow", str(tmp_path / "nope.pfck")]) == 2
        assert main(["infer", "--data", str(data), "--run", str(tmp_path / "r"), "--flow", str(tmp_path / "x")]) == 2

    @pytest.mark.parametrize("extra", [["--train.bogus", "1"], ["--train.lr_gen", "-1"], ["--train.seed"], ["stray"], ["--loss.beta", "0,0,0,0,0,1"]])
    def test_config_errors(self, data, tmp_path, extra):
        assert main(["flow-train", "--data", str(data), "--run", str(tmp_path / "r")] + extra) == 3

    def test_bad_config_file(self, data, tmp_path):
        (tmp_path / "c.yaml").write_text("train: [1, 2\n")
        assert main(["flow-train", "--data", str(data), "--run", str(tmp_path / "r"), "--config", str(tmp_path / "c.yaml")]) == 3

    def test_corrupt_checkpoint_fails(self, data, tmp_path):
        (tmp_path / "bad.pfck").write_bytes(b"garbage")
        assert main(["garment-train", "--data", str(data), "--run", str(tmp_path / "r"), "--flow", str(tmp_path / "bad.pfck")]) == 1


class TestPipeline:
    def test_run_directories_self_describing(self, chain):
        root = chain[0]
        for name, ckpt in (("flow", "flow"), ("garment", "garment"), ("synth", "synthesis")):
            run = root / name
            assert (run / "config.snapshot").is_file()
            assert (run / "checkpoints" / f"{ckpt}.pfck").is_file()
            rows = list(csv.reader(open(run / "logs" / "metrics.csv")))
            assert rows[0] == ["step", "term", "level", "value"] and len(rows) > 1
        assert (root / "flow" / "samples" / "0000_warped.png").is_file()
        assert (root / "synth" / "samples" / "0000_grid.png").is_file()
        assert (root / "synth" / "checkpoints" / "disc.pfck").is_file()

    def test_snapshot_reproduces_history(self, chain, data, tmp_path):
        root = chain[0]
        snap = root / "flow" / "config.snapshot"
        assert main(["flow-train", "--data", str(data), "--run", str(tmp_path / "again"), "--config", str(snap), "--samples", "0"]) == 0
        assert (tmp_path / "again" / "logs" / "metrics.csv").read_bytes() == (root / "flow" / "logs" / "metrics.csv").read_bytes()
        assert (tmp_path / "again" / "checkpoints" / "flow.pfck").read_bytes() == (root / "flow" / "checkpoints" / "flow.pfck").read_bytes()

    def test_infer_outputs(self, chain):
        out = chain[0] / "infer"
        img = io.load_image(out / "samples" / "0000.png")
        assert img.data.shape == (64, 64, 3)
        g = io.load_image(out / "samples" / "0000_grid.png")
        assert g.data.shape[0] == 64 and g.data.shape[1] == len(GRID_COLUMNS) * 64 + (len(GRID_COLUMNS) - 1) * 2
        assert len(io.load_pyramid(out / "samples" / "0001.pflow").levels) == 6
        assert sorted(p.name for p in (out / "gates").glob("0000_*.png")) == [f"0000_l{l}.png" for l in range(6)]

    def test_eval_pairs_mode(self, chain, data):
        out = chain[0] / "infer" / "samples"
        assert main(["eval", "--pred", str(out), "--gt", str(data)]) == 0
        rows = list(csv.DictReader(open(out / "eval.csv")))
        assert tuple(rows[0]) == EVAL_COLUMNS and len(rows) == 2
        for r in rows:
            assert -1 <= float(r["ssim"]) <= 1 and r["ms_ssim"] == "" and float(r["epe"]) >= 0

    def test_eval_identical_dirs(self, data, tmp_path):
        images = data / "images"
        assert main(["eval", "--pred", str(images), "--gt", str(images), "--out", str(tmp_path / "e.csv")]) == 0
        rows = list(csv.DictReader(open(tmp_path / "e.csv")))
        assert len(rows) == 4
        assert all(float(r["ssim"]) == 1.0 and float(r["masked_ssim"]) == 1.0 for r in rows)

    def test_eval_large_images_fill_ms_ssim(self, tmp_path):
        rng = np.random.default_rng(0)
        a = np.clip(rng.normal(0, 0.4, (192, 192, 3)), -1, 1)
        io.save_png(tmp_path / "gt" / "x.png", a)
        io.save_png(tmp_path / "pred" / "x.png", np.clip(a + 0.1, -1, 1))
        assert main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt")]) == 0
        row = next(csv.DictReader(open(tmp_path / "pred" / "eval.csv")))
        assert 0 < float(row["ms_ssim"]) <= 1 and row["masked_ssim"] == ""


class TestGradcheckCommand:
    def test_quick_suite_passes(self, capsys):
        assert main(["gradcheck", "--quick"]) == 0
        out = capsys.readouterr().out
        lines = out.splitlines()
        assert len(lines) > 5 and all(l.endswith(" ok") for l in lines[:-1])
        assert lines[-1].startswith("max error / tolerance")


def test_console_entry_point_help():
    r = subprocess.run([sys.executable, "-m", "poseflow.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("toydata", "flow-train", "garment-train", "synth-train", "infer", "eval", "gradcheck"):
        assert cmd in r.stdout
    assert "train.lr_gen" in r.stdout


@pytest.mark.slow
def test_infer_identity_pose_reproduces_source_after_overfit():
    from poseflow.config import toy_config
    from poseflow.cli import run_inference
    from poseflow.experiments import figure_mask
    from poseflow.flownet import init_flow_params
    from poseflow.toydata import Deformation, generate_toy_sample
    from poseflow.training import train_garment, train_synthesis

    samples = [generate_toy_sample(s, deformation=Deformation.identity()) for s in range(4)]
    cfg = toy_config(**{"train.steps": 200, "train.batch_size": 4, "train.lr_gen": 1e-3,
                        "train.lambdas": [1.0, 0.1, 0.002, 0.0]})
    flow_net = init_flow_params(0, cfg.flow_net())  # zero heads: exact zero flow, correct for identity pose
    garment_net, _ = train_garment(samples, flow_net, cfg)
    synth_net, _, _ = train_synthesis(samples, flow_net, garment_net, cfg)
    pair = samples[0].pair
    out = run_inference(flow_net, garment_net, synth_net, pair)["output"]
    l1 = np.abs(out - pair.source_image.data).mean(2)[figure_mask(pair)].mean()
    assert l1 < 0.1
