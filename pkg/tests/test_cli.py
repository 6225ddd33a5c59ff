import json
import threading

import pytest
from click.testing import CliRunner

from agingtree.cli import main


@pytest.fixture
def runner():
    return CliRunner()


def run(runner, args, **kwargs):
    result = runner.invoke(main, args, catch_exceptions=False, **kwargs)
    return result


class TestEdit:
    def test_deterministic_output_bytes(self, runner, toy_image, tmp_path):
        args = [
            "edit", str(toy_image), "--age", "60", "--condition", "hair loss",
            "--preset", "replace_v", "--steps", "6", "--seed", "0",
        ]
        out_a, out_b = tmp_path / "a.png", tmp_path / "b.png"
        assert run(runner, args + ["--out", str(out_a)]).exit_code == 0
        assert run(runner, args + ["--out", str(out_b)]).exit_code == 0
        assert out_a.read_bytes() == out_b.read_bytes()

    def test_age_out_of_range_fails(self, runner, toy_image, tmp_path):
        result = runner.invoke(
            main,
            ["edit", str(toy_image), "--age", "19", "--out", str(tmp_path / "x.png")],
        )
        assert result.exit_code != 0
        assert "age_target" in result.output
        assert not (tmp_path / "x.png").exists()

    def test_presets_produce_different_bytes(self, runner, toy_image, tmp_path):
        outputs = {}
        for preset in ("replace_v", "full"):
            out = tmp_path / f"{preset}.png"
            args = [
                "edit", str(toy_image), "--age", "60", "--condition", "alcoholism",
                "--preset", preset, "--steps", "6", "--seed", "0", "--out", str(out),
            ]
            assert run(runner, args).exit_code == 0
            outputs[preset] = out.read_bytes()
        assert outputs["replace_v"] != outputs["full"]

    def test_sidecar_provenance_round_trips(self, runner, toy_image, tmp_path):
        out = tmp_path / "edit.png"
        args = [
            "edit", str(toy_image), "--age", "55", "--condition", "gain weight",
            "--preset", "project_v", "--steps", "5", "--seed", "3", "--out", str(out),
        ]
        assert run(runner, args).exit_code == 0
        sidecar = json.loads((tmp_path / "edit.png.json").read_text())
        rerun_out = tmp_path / "rerun.png"
        rerun_args = [
            "edit", sidecar["input"],
            "--age", str(sidecar["age_target"]),
            "--condition", sidecar["condition"],
            "--preset", sidecar["preset"],
            "--steps", str(sidecar["steps"]),
            "--seed", str(sidecar["seed"]),
            "--g", str(sidecar["key_gain"]),
            "--subject", sidecar["subject"],
            "--out", str(rerun_out),
        ]
        assert run(runner, rerun_args).exit_code == 0
        assert out.read_bytes() == rerun_out.read_bytes()

    def test_metrics_stub_present(self, runner, toy_image, tmp_path):
        out = tmp_path / "edit.png"
        args = ["edit", str(toy_image), "--age", "60", "--preset", "replace_v",
                "--steps", "4", "--out", str(out)]
        assert run(runner, args).exit_code == 0
        sidecar = json.loads((tmp_path / "edit.png.json").read_text())
        assert sidecar["metrics"] == {"clip_t": None, "age_pred": None, "id_sim": None}

    def test_config_file_merged_under_flags(self, runner, toy_image, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("steps = 4\nseed = 9\npreset = replace_v\n")
        out = tmp_path / "cfg.png"
        args = ["edit", str(toy_image), "--age", "60", "--config", str(cfg), "--out", str(out)]
        assert run(runner, args).exit_code == 0
        sidecar = json.loads((tmp_path / "cfg.png.json").read_text())
        assert sidecar["steps"] == 4 and sidecar["seed"] == 9 and sidecar["preset"] == "replace_v"


class TestAblate:
    def test_ladder_run(self, runner, toy_image, tmp_path):
        out_dir = tmp_path / "ablation"
        args = ["ablate", str(toy_image), "--out", str(out_dir), "--steps", "6", "--seed", "0"]
        result = run(runner, args)
        assert result.exit_code == 0
        images = {p.name: p.read_bytes() for p in sorted(out_dir.glob("*.png"))}
        assert len(images) == 5
        payloads = list(images.values())
        for i, a in enumerate(payloads):
            for b in payloads[i + 1 :]:
                assert a != b
        report = (out_dir / "report.txt").read_text()
        lines = report.splitlines()
        assert lines[2].startswith("RF-Solver-Edit (baseline)")
        assert lines[3].startswith("+ Att. Mixing (Value only)")
        assert lines[4].startswith("+ Text Embedding Masking")
        assert lines[5].startswith("+ Att. Mixing (Value & Key)")
        assert lines[6].startswith("+ Simulated Aging Regularization")
        assert (out_dir / "report.csv").exists()
        assert (out_dir / "records.jsonl").exists()

    def test_ablate_sidecars_allow_rerun(self, runner, toy_image, tmp_path):
        out_dir = tmp_path / "ablation"
        args = ["ablate", str(toy_image), "--out", str(out_dir), "--steps", "5", "--seed", "2"]
        assert run(runner, args).exit_code == 0
        sidecar = json.loads((out_dir / "replace_v.json").read_text())
        rerun = tmp_path / "redo.png"
        edit_args = [
            "edit", str(toy_image), "--age", str(sidecar["age_target"]),
            "--condition", sidecar["condition"], "--preset", sidecar["preset"],
            "--steps", str(sidecar["steps"]), "--seed", str(sidecar["seed"]),
            "--out", str(rerun),
        ]
        assert run(runner, edit_args).exit_code == 0
        assert rerun.read_bytes() == (out_dir / "replace_v.png").read_bytes()


class TestTreeCommands:
    def test_init_then_show(self, runner, toy_image, tmp_path):
        tree_dir = tmp_path / "tree"
        assert run(runner, ["tree", "init", str(tree_dir), "--image", str(toy_image),
                            "--age", "30", "--steps", "4", "--preset", "replace_v"]).exit_code == 0
        result = run(runner, ["tree", "show", str(tree_dir)])
        assert result.exit_code == 0
        assert "(root)" in result.output
        assert result.output.count("node-") == 1

    def test_init_refuses_overwrite(self, runner, toy_image, tmp_path):
        tree_dir = tmp_path / "tree"
        assert run(runner, ["tree", "init", str(tree_dir), "--image", str(toy_image), "--age", "30"]).exit_code == 0
        result = runner.invoke(main, ["tree", "init", str(tree_dir), "--image", str(toy_image), "--age", "30"])
        assert result.exit_code != 0

    def test_branch_grows_tree(self, runner, toy_image, tmp_path):
        tree_dir = tmp_path / "tree"
        run(runner, ["tree", "init", str(tree_dir), "--image", str(toy_image),
                     "--age", "30", "--steps", "4", "--preset", "replace_v"])
        result = run(runner, ["tree", "branch", str(tree_dir), "--condition", "hair loss", "--age", "60"])
        assert result.exit_code == 0
        show = run(runner, ["tree", "show", str(tree_dir)])
        assert show.output.count("node-") == 2
        assert "hair loss" in show.output

    def test_branch_invalid_age_fails(self, runner, toy_image, tmp_path):
        tree_dir = tmp_path / "tree"
        run(runner, ["tree", "init", str(tree_dir), "--image", str(toy_image), "--age", "30"])
        result = runner.invoke(main, ["tree", "branch", str(tree_dir), "--condition", "x", "--age", "19"])
        assert result.exit_code != 0

    def test_remote_branch_against_live_server(self, runner, toy_image, tmp_path):
        import uvicorn

        from agingtree.service import build_app
        from agingtree.toybackend import ToyBackend, ToyModelSpec

        tree_dir = tmp_path / "tree"
        run(runner, ["tree", "init", str(tree_dir), "--image", str(toy_image),
                     "--age", "30", "--steps", "4", "--preset", "replace_v"])
        app = build_app(tree_dir, backend=ToyBackend(ToyModelSpec()))
        config = uvicorn.Config(app, host="127.0.0.1", port=8765, log_level="error")
        server = uvicorn.Server(config)
        thread = threading.Thread(target=server.run, daemon=True)
        thread.start()
        import time

        deadline = time.monotonic() + 10
        while not server.started and time.monotonic() < deadline:
            time.sleep(0.05)
        try:
            result = run(runner, ["tree", "branch", "--server", "http://127.0.0.1:8765",
                                  "--condition", "gain weight", "--age", "70"])
            assert result.exit_code == 0
            assert "done" in result.output
        finally:
            server.should_exit = True
            thread.join(timeout=10)


class TestConditionsCommand:
    def test_lists_seven(self, runner):
        result = run(runner, ["conditions"])
        assert result.exit_code == 0
        assert len(result.output.strip().splitlines()) == 7
