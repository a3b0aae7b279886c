import json
import subprocess
from pathlib import Path

import numpy as np
import pytest

from tritex import (
    ChannelLayout,
    DivergenceError,
    MaterialManifest,
    MaterialStack,
    read_trace,
    save_material,
)
import tritex.cli as cli
from tritex.cli import main

SAMPLE_MANIFEST = Path(__file__).resolve().parent.parent / "assets" / "sample_material" / "manifest.json"


def _write_exemplar(directory: Path, channels: int = 2, size: int = 16, seed: int = 0) -> Path:
    rng = np.random.default_rng(seed)
    stack = MaterialStack(rng.random((size, size, channels)), ChannelLayout.flat(channels))
    manifest = MaterialManifest.for_layout(stack.layout, directory)
    save_material(stack, manifest)
    path = directory / "manifest.json"
    manifest.save(path)
    return path


@pytest.fixture()
def exemplar_manifest(tmp_path):
    return _write_exemplar(tmp_path / "exemplar")


class TestParsing:
    def test_version(self, capsys):
        assert main(["--version"]) == 0
        assert "tritex" in capsys.readouterr().out

    def test_help(self, capsys):
        assert main(["--help"]) == 0
        assert "synthesize" in capsys.readouterr().out

    def test_no_command_prints_help(self, capsys):
        assert main([]) == 1
        assert "usage" in capsys.readouterr().out

    def test_unknown_command(self):
        assert main(["transmogrify"]) == 1

    def test_console_script_installed(self):
        proc = subprocess.run(["tritex", "--version"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert proc.stdout.startswith("tritex ")


class TestSynthesize:
    def test_zero_steps_on_bundled_sample(self, tmp_path, capsys):
        out = tmp_path / "out"
        rc = main(
            ["synthesize", "--exemplar", str(SAMPLE_MANIFEST), "--out", str(out), "--steps", "0"]
        )
        assert rc == 0
        for name in ("albedo", "normal", "roughness", "metalness", "ao"):
            assert (out / f"{name}.png").exists()
        assert (out / "material.json").exists()
        assert (out / "run_manifest.json").exists()
        assert (out / "trace.csv").exists()
        assert "synthesized 64x64 stack" in capsys.readouterr().out

    def test_short_run_writes_trace_rows(self, exemplar_manifest, tmp_path):
        out = tmp_path / "out"
        rc = main(
            ["synthesize", "--exemplar", str(exemplar_manifest), "--out", str(out), "--steps", "5"]
        )
        assert rc == 0
        trace = read_trace(out / "trace.csv")
        assert [r.step for r in trace] == [0, 1, 2, 3, 4]
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["command"] == "synthesize"
        assert manifest["options"]["steps"] == 5
        assert set(manifest["versions"]) >= {"tritex", "python", "numpy", "torch"}

    def test_missing_exemplar_names_the_path(self, tmp_path, capsys):
        missing = tmp_path / "nowhere" / "manifest.json"
        rc = main(["synthesize", "--exemplar", str(missing), "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "nowhere" in capsys.readouterr().err

    def test_bad_size(self, exemplar_manifest, tmp_path, capsys):
        rc = main(
            ["synthesize", "--exemplar", str(exemplar_manifest), "--out", str(tmp_path / "o"), "--size", "12xx"]
        )
        assert rc == 1
        assert "size" in capsys.readouterr().err

    def test_config_file_precedence(self, exemplar_manifest, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"steps": 9, "lr": 0.05}))
        out = tmp_path / "out"
        rc = main(
            [
                "synthesize",
                "--exemplar", str(exemplar_manifest),
                "--out", str(out),
                "--config", str(config),
                "--steps", "2",
            ]
        )
        assert rc == 0
        options = json.loads((out / "run_manifest.json").read_text())["options"]
        assert options["steps"] == 2  # flag beats the config file
        assert options["lr"] == 0.05  # config file beats the default
        assert len(read_trace(out / "trace.csv")) == 2

    def test_unknown_config_key(self, exemplar_manifest, tmp_path, capsys):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"stepz": 9}))
        rc = main(
            ["synthesize", "--exemplar", str(exemplar_manifest), "--out", str(tmp_path / "o"), "--config", str(config)]
        )
        assert rc == 1
        assert "stepz" in capsys.readouterr().err

    def test_missing_config_file(self, exemplar_manifest, tmp_path):
        rc = main(
            [
                "synthesize",
                "--exemplar", str(exemplar_manifest),
                "--out", str(tmp_path / "o"),
                "--config", str(tmp_path / "absent.json"),
            ]
        )
        assert rc == 1

    def test_divergence_maps_to_exit_2(self, exemplar_manifest, tmp_path, monkeypatch, capsys):
        def poisoned(*args, **kwargs):
            raise DivergenceError("non-finite loss at step 3")

        monkeypatch.setattr(cli, "synthesize", poisoned)
        rc = main(["synthesize", "--exemplar", str(exemplar_manifest), "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "runtime failure" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    exemplar = _write_exemplar(root / "exemplar")
    out = root / "run"
    rc = main(
        [
            "train",
            "--exemplar", str(exemplar),
            "--out", str(out),
            "--steps", "2",
            "--batch", "1",
            "--scales", "2",
            "--width-step", "4",
            "--crop", "16",
        ]
    )
    assert rc == 0
    return out


class TestTrainAndGenerate:
    def test_train_outputs(self, trained_dir):
        assert (trained_dir / "model.npz").exists()
        assert (trained_dir / "run_manifest.json").exists()
        assert len(read_trace(trained_dir / "trace.csv")) == 2

    def test_generate_from_model(self, trained_dir, tmp_path):
        out = tmp_path / "gen"
        rc = main(
            ["generate", "--model", str(trained_dir / "model.npz"), "--out", str(out), "--size", "16x16"]
        )
        assert rc == 0
        assert (out / "ch0.png").exists()
        assert (out / "ch1.png").exists()
        assert (out / "material.json").exists()

    def test_generate_is_reproducible(self, trained_dir, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            rc = main(
                [
                    "generate",
                    "--model", str(trained_dir / "model.npz"),
                    "--out", str(out),
                    "--size", "16",
                    "--seed", "7",
                ]
            )
            assert rc == 0
            outs.append(out)
        for channel in ("ch0.png", "ch1.png"):
            assert (outs[0] / channel).read_bytes() == (outs[1] / channel).read_bytes()

    def test_generate_indivisible_size(self, trained_dir, tmp_path, capsys):
        rc = main(
            ["generate", "--model", str(trained_dir / "model.npz"), "--out", str(tmp_path / "o"), "--size", "15x16"]
        )
        assert rc == 1
        assert "admissible sides" in capsys.readouterr().err

    def test_missing_model(self, tmp_path, capsys):
        rc = main(["generate", "--model", str(tmp_path / "absent.npz"), "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "absent.npz" in capsys.readouterr().err


class TestEval:
    def test_default_checks_pass(self, tmp_path, capsys):
        out = tmp_path / "eval"
        rc = main(["eval", "--out", str(out), "--channels", "2"])
        assert rc == 0
        stdout = capsys.readouterr().out
        assert "unbiasedness: PASS" in stdout
        assert "gradcheck loss_3channel: PASS" in stdout
        report = json.loads((out / "eval_report.json").read_text())
        assert report["checks"]["unbiasedness"]["passed"] is True
        assert report["checks"]["gradcheck"]["loss_nchannel_stochastic"]["passed"] is True

    def test_impossible_threshold_gates_exit_code(self, tmp_path):
        out = tmp_path / "eval"
        rc = main(["eval", "--out", str(out), "--channels", "2", "--grad-threshold", "0"])
        assert rc == 1
        report = json.loads((out / "eval_report.json").read_text())
        assert report["checks"]["gradcheck"]["loss_3channel"]["passed"] is False

    def test_alignment_against_self(self, exemplar_manifest, tmp_path, capsys):
        out = tmp_path / "eval"
        rc = main(
            [
                "eval",
                "--out", str(out),
                "--checks", "alignment",
                "--exemplar", str(exemplar_manifest),
                "--candidate", str(exemplar_manifest),
            ]
        )
        assert rc == 0
        assert "report only" in capsys.readouterr().out
        assert (out / "alignment.json").exists()
        assert (out / "alignment.csv").exists()
        report = json.loads((out / "eval_report.json").read_text())
        assert report["checks"]["alignment"]["alignment_error"] == 0.0

    def test_alignment_needs_both_manifests(self, exemplar_manifest, tmp_path):
        rc = main(
            ["eval", "--out", str(tmp_path / "o"), "--checks", "alignment", "--exemplar", str(exemplar_manifest)]
        )
        assert rc == 1

    def test_unknown_check_rejected(self, tmp_path, capsys):
        rc = main(["eval", "--out", str(tmp_path / "o"), "--checks", "vibes"])
        assert rc == 1
        assert "vibes" in capsys.readouterr().err
