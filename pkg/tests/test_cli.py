"""Command-line behavior: exit codes, output contracts, option resolution."""

import io
import re

import numpy as np
import pytest
from PIL import Image

from sddi import cli
from sddi.checkpoint import load_checkpoint
from sddi.data import (
    DrugRecord,
    GrayImage,
    read_interactions,
    save_image,
    write_interactions,
    write_manifest,
)
from sddi.eval import EvalReport

SIZE = 12
ARCH_FLAGS = [
    "--image-size", "12",
    "--conv-filters", "4",
    "--kernel", "3",
    "--pool", "2",
    "--fc-sizes", "8,4",
]
LOG_PATTERN = re.compile(
    r"^epoch=\d+ loss=\d+\.\d{6} val_f1=\d+\.\d{6} "
    r"val_recall=\d+\.\d{6} val_precision=\d+\.\d{6}$"
)
PREDICT_PATTERN = re.compile(r"^distance=\d+\.\d{6} threshold=\d+\.\d{6} interact=(true|false)$")


def build_dataset(tmp_path, duplicates_as_positives=False, n_bases=4, seed=0):
    """Eight drugs (four base images, each with a partner) plus CSV files.

    The partner image is an exact duplicate when ``duplicates_as_positives``
    else a small perturbation; base-to-base pairs are the negatives.
    """
    rng = np.random.default_rng(seed)
    images_dir = tmp_path / "images"
    records, images = [], {}
    for i in range(n_bases):
        base = rng.random((SIZE, SIZE), dtype=np.float32)
        if duplicates_as_positives:
            partner = base.copy()
        else:
            partner = np.clip(base + rng.normal(0, 0.08, base.shape), 0, 1).astype(np.float32)
        for suffix, pixels in (("a", base), ("b", partner)):
            drug = f"d{i}{suffix}"
            path = images_dir / f"{drug}.png"
            save_image(GrayImage(pixels), path)
            records.append(DrugRecord(drug, drug, str(path)))
            images[drug] = pixels
    rows = [(f"d{i}a", f"d{i}b", 1) for i in range(n_bases)]
    rows += [(f"d{i}a", f"d{j}a", 0) for i in range(n_bases) for j in range(i + 1, n_bases)]
    manifest = tmp_path / "manifest.csv"
    interactions = tmp_path / "interactions.csv"
    write_manifest(records, manifest)
    write_interactions(rows, interactions)
    return {
        "manifest": str(manifest),
        "interactions": str(interactions),
        "images": str(images_dir),
        "checkpoint": str(tmp_path / "model.ckpt"),
        "report": str(tmp_path / "report.txt"),
    }


def run_train(paths, extra=(), epochs="2"):
    return cli.main(
        [
            "train",
            "--manifest", paths["manifest"],
            "--interactions", paths["interactions"],
            "--checkpoint", paths["checkpoint"],
            "--epochs", epochs,
            "--lr", "1e-3",
            *ARCH_FLAGS,
            *extra,
        ]
    )


class TestBuildPairs:
    def test_canonicalizes_and_reports_counts(self, tmp_path, capsys):
        paths = build_dataset(tmp_path)
        raw = tmp_path / "raw.csv"
        # Reciprocal duplicate and a self-pair on top of a valid row.
        write_interactions([("d0a", "d0b", 1), ("d0b", "d0a", 1), ("d1a", "d1a", 1)], raw)
        out = tmp_path / "canonical.csv"
        code = cli.main(
            ["build-pairs", "--manifest", paths["manifest"],
             "--interactions", str(raw), "--out", str(out)]
        )
        assert code == 0
        assert capsys.readouterr().out.strip() == "pairs=1 positives=1 negatives=0"
        assert read_interactions(out) == [("d0a", "d0b", 1)]

    def test_conflicting_labels_fail(self, tmp_path, capsys):
        paths = build_dataset(tmp_path)
        raw = tmp_path / "raw.csv"
        write_interactions([("d0a", "d0b", 1), ("d0b", "d0a", 0)], raw)
        code = cli.main(
            ["build-pairs", "--manifest", paths["manifest"],
             "--interactions", str(raw), "--out", str(tmp_path / "c.csv")]
        )
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith("error:")
        assert err.count("\n") == 1


class TestTrain:
    def test_writes_checkpoint_and_epoch_lines(self, tmp_path, capsys):
        paths = build_dataset(tmp_path)
        assert run_train(paths) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 2
        for line in lines:
            assert LOG_PATTERN.match(line), line
        config = load_checkpoint(paths["checkpoint"]).config
        assert config["epochs"] == "2"
        assert config["metric"] == "euclidean"
        assert "threshold" in config

    def test_missing_checkpoint_flag(self, tmp_path, capsys):
        paths = build_dataset(tmp_path)
        code = cli.main(
            ["train", "--manifest", paths["manifest"],
             "--interactions", paths["interactions"], *ARCH_FLAGS]
        )
        assert code == 1
        assert "--checkpoint" in capsys.readouterr().err

    def test_incompatible_tower_rejected(self, tmp_path, capsys):
        paths = build_dataset(tmp_path)
        # Default 500-px tower cannot digest 12-px inputs.
        code = cli.main(
            ["train", "--manifest", paths["manifest"],
             "--interactions", paths["interactions"],
             "--checkpoint", paths["checkpoint"], "--image-size", "12"]
        )
        assert code == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_unknown_metric_rejected(self, tmp_path, capsys):
        paths = build_dataset(tmp_path)
        assert run_train(paths, extra=["--metric", "cosine"]) == 1
        assert "unknown metric" in capsys.readouterr().err

    def test_deterministic_across_runs(self, tmp_path):
        paths = build_dataset(tmp_path)
        run_train(paths)
        first = open(paths["checkpoint"], "rb").read()
        run_train(paths)
        assert open(paths["checkpoint"], "rb").read() == first


class TestConfigFile:
    def test_file_values_used_and_flags_win(self, tmp_path, capsys):
        paths = build_dataset(tmp_path)
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            "# comment line\n"
            "epochs = 1\n"
            "seed = 3\n"
            "lr = 1e-3\n"
            "image_size = 12\n"
            "conv_filters = 4\n"
            "kernel = 3\n"
            "pool = 2\n"
            "fc_sizes = 8,4\n",
            encoding="utf-8",
        )
        code = cli.main(
            ["train", "--config", str(cfg),
             "--manifest", paths["manifest"],
             "--interactions", paths["interactions"],
             "--checkpoint", paths["checkpoint"],
             "--epochs", "2"]
        )
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 2  # the flag overrode the file's epochs = 1
        config = load_checkpoint(paths["checkpoint"]).config
        assert config["seed"] == "3"

    def test_unknown_key_rejected(self, tmp_path, capsys):
        paths = build_dataset(tmp_path)
        cfg = tmp_path / "run.cfg"
        cfg.write_text("bogus = 1\n", encoding="utf-8")
        assert run_train(paths, extra=["--config", str(cfg)]) == 1
        assert "unknown config key: bogus" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        paths = build_dataset(tmp_path)
        assert run_train(paths, extra=["--config", str(tmp_path / "nope.cfg")]) == 2
        assert "no such config file" in capsys.readouterr().err

    def test_bad_boolean_value(self, tmp_path, capsys):
        paths = build_dataset(tmp_path)
        cfg = tmp_path / "run.cfg"
        cfg.write_text("use_stn = yes\n", encoding="utf-8")
        assert run_train(paths, extra=["--config", str(cfg)]) == 1
        assert "use_stn" in capsys.readouterr().err


class TestEval:
    def test_report_printed_and_written(self, tmp_path, capsys):
        paths = build_dataset(tmp_path)
        run_train(paths)
        capsys.readouterr()
        code = cli.main(
            ["eval", "--manifest", paths["manifest"],
             "--interactions", paths["interactions"],
             "--checkpoint", paths["checkpoint"],
             "--report", paths["report"]]
        )
        assert code == 0
        out = capsys.readouterr().out
        report = EvalReport.from_text(out)
        assert report.tp + report.fp + report.tn + report.fn > 0
        assert open(paths["report"], encoding="utf-8").read() == out

    def test_threshold_override_honored_verbatim(self, tmp_path, capsys):
        paths = build_dataset(tmp_path)
        run_train(paths)
        capsys.readouterr()
        code = cli.main(
            ["eval", "--manifest", paths["manifest"],
             "--interactions", paths["interactions"],
             "--checkpoint", paths["checkpoint"],
             "--threshold", "0.65"]
        )
        assert code == 0
        assert "threshold=0.650000" in capsys.readouterr().out

    def test_image_size_mismatch_is_incompatible(self, tmp_path, capsys):
        paths = build_dataset(tmp_path)
        run_train(paths)
        capsys.readouterr()
        code = cli.main(
            ["eval", "--manifest", paths["manifest"],
             "--interactions", paths["interactions"],
             "--checkpoint", paths["checkpoint"],
             "--image-size", "20"]
        )
        assert code == 1
        assert "incompatible" in capsys.readouterr().err

    def test_rotate_eval_reuses_stored_threshold(self, tmp_path, capsys):
        paths = build_dataset(tmp_path)
        run_train(paths)
        capsys.readouterr()
        outputs = []
        for extra in ([], ["--rotate-eval"]):
            assert cli.main(
                ["eval", "--manifest", paths["manifest"],
                 "--interactions", paths["interactions"],
                 "--checkpoint", paths["checkpoint"], *extra]
            ) == 0
            outputs.append(EvalReport.from_text(capsys.readouterr().out))
        # Rotation changes the inputs but not the decision threshold.
        assert outputs[0].threshold == outputs[1].threshold

    def test_missing_checkpoint_file(self, tmp_path, capsys):
        paths = build_dataset(tmp_path)
        code = cli.main(
            ["eval", "--manifest", paths["manifest"],
             "--interactions", paths["interactions"],
             "--checkpoint", str(tmp_path / "missing.ckpt")]
        )
        assert code == 2
        assert "missing.ckpt" in capsys.readouterr().err


class TestPredict:
    def test_self_pair_never_interacts(self, tmp_path, capsys):
        paths = build_dataset(tmp_path)
        run_train(paths)
        capsys.readouterr()
        image = str(tmp_path / "images" / "d0a.png")
        code = cli.main(
            ["predict", "--checkpoint", paths["checkpoint"],
             "--threshold", "0.25", image, image]
        )
        assert code == 0
        out = capsys.readouterr().out.strip()
        assert out == "distance=0.000000 threshold=0.250000 interact=false"

    def test_stored_threshold_used(self, tmp_path, capsys):
        paths = build_dataset(tmp_path)
        run_train(paths)
        capsys.readouterr()
        a = str(tmp_path / "images" / "d0a.png")
        b = str(tmp_path / "images" / "d1a.png")
        code = cli.main(["predict", "--checkpoint", paths["checkpoint"], a, b])
        assert code == 0
        out = capsys.readouterr().out.strip()
        assert PREDICT_PATTERN.match(out), out
        stored = float(load_checkpoint(paths["checkpoint"]).config["threshold"])
        assert f"threshold={stored:.6f}" in out

    def test_missing_image_exits_2(self, tmp_path, capsys):
        paths = build_dataset(tmp_path)
        run_train(paths)
        capsys.readouterr()
        missing = str(tmp_path / "nope.png")
        real = str(tmp_path / "images" / "d0a.png")
        code = cli.main(["predict", "--checkpoint", paths["checkpoint"], missing, real])
        assert code == 2
        err = capsys.readouterr().err
        assert err.startswith("error:")
        assert "nope.png" in err

    def test_wrong_size_image_rejected(self, tmp_path, capsys):
        paths = build_dataset(tmp_path)
        run_train(paths)
        capsys.readouterr()
        odd = tmp_path / "odd.png"
        save_image(GrayImage(np.zeros((7, 7), np.float32)), odd)
        code = cli.main(["predict", "--checkpoint", paths["checkpoint"], str(odd), str(odd)])
        assert code == 1
        assert "expected 12x12" in capsys.readouterr().err


def png_bytes(seed, size=SIZE):
    rng = np.random.default_rng(seed)
    arr = (rng.random((size, size)) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()


class ServingSession:
    """Returns a distinct valid PNG for every requested CID."""

    def __init__(self):
        self.calls = []

    def get(self, url, params=None, timeout=None):
        self.calls.append(url)
        cid = int(url.rstrip("/PNG").rsplit("/", 1)[-1])

        class R:
            status_code = 200
            content = png_bytes(cid)

        return R()


class TestFetch:
    def test_downloads_and_writes_manifest(self, tmp_path, capsys, monkeypatch):
        session = ServingSession()
        monkeypatch.setattr(cli, "_session_factory", lambda: session)
        images = tmp_path / "images"
        manifest = tmp_path / "manifest.csv"
        code = cli.main(
            ["fetch", "--cids", "11,22,33", "--images", str(images),
             "--manifest", str(manifest), "--image-size", "12"]
        )
        assert code == 0
        assert capsys.readouterr().out.strip() == f"fetched=3 images={images}"
        assert sorted(p.name for p in images.glob("*.png")) == ["11.png", "22.png", "33.png"]
        from sddi.data import read_manifest

        records = read_manifest(manifest)
        assert [r.drug_id for r in records] == ["11", "22", "33"]
        assert len(session.calls) == 3

    def test_idempotent_skip(self, tmp_path, capsys, monkeypatch):
        session = ServingSession()
        monkeypatch.setattr(cli, "_session_factory", lambda: session)
        images = tmp_path / "images"
        for _ in range(2):
            assert cli.main(["fetch", "--cids", "11", "--images", str(images)]) == 0
        assert len(session.calls) == 1  # second run touched nothing

    def test_no_cids_rejected(self, tmp_path, capsys):
        assert cli.main(["fetch", "--images", str(tmp_path)]) == 1
        assert "--cids" in capsys.readouterr().err


class TestBaseline:
    def test_ssim_duplicates_recall_one(self, tmp_path, capsys):
        paths = build_dataset(tmp_path, duplicates_as_positives=True)
        code = cli.main(
            ["baseline", "--kind", "ssim",
             "--manifest", paths["manifest"],
             "--interactions", paths["interactions"],
             "--image-size", "12",
             "--report", paths["report"]]
        )
        assert code == 0
        report = EvalReport.from_text(capsys.readouterr().out)
        assert report.recall == 1.0

    def test_autoencoder_cosine_duplicates_recall_one(self, tmp_path, capsys):
        paths = build_dataset(tmp_path, duplicates_as_positives=True)
        code = cli.main(
            ["baseline", "--kind", "autoencoder", "--criterion", "cosine",
             "--manifest", paths["manifest"],
             "--interactions", paths["interactions"],
             "--image-size", "12"]
        )
        assert code == 0
        out = capsys.readouterr().out
        epoch_lines = [l for l in out.splitlines() if l.startswith("epoch=")]
        assert len(epoch_lines) == 10  # fixed budget
        report = EvalReport.from_text("\n".join(l for l in out.splitlines() if "=" in l and not l.startswith("epoch=")))
        assert report.recall == 1.0

    def test_unknown_kind_rejected(self, tmp_path, capsys):
        paths = build_dataset(tmp_path)
        code = cli.main(
            ["baseline", "--kind", "psnr",
             "--manifest", paths["manifest"],
             "--interactions", paths["interactions"]]
        )
        assert code == 1
        assert "unknown baseline kind" in capsys.readouterr().err


class TestPipelineSmoke:
    def test_fetch_build_train_eval_chain(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setattr(cli, "_session_factory", lambda: ServingSession())
        images = tmp_path / "images"
        manifest = tmp_path / "manifest.csv"
        cids = [str(c) for c in range(101, 109)]
        assert cli.main(
            ["fetch", "--cids", ",".join(cids), "--images", str(images),
             "--manifest", str(manifest), "--image-size", "12"]
        ) == 0

        raw = tmp_path / "raw.csv"
        rng = np.random.default_rng(0)
        rows = []
        for i in range(len(cids)):
            for j in range(i + 1, len(cids)):
                rows.append((cids[i], cids[j], int(rng.integers(0, 2))))
        write_interactions(rows, raw)
        canonical = tmp_path / "pairs.csv"
        assert cli.main(
            ["build-pairs", "--manifest", str(manifest),
             "--interactions", str(raw), "--out", str(canonical)]
        ) == 0

        checkpoint = tmp_path / "model.ckpt"
        assert cli.main(
            ["train", "--manifest", str(manifest), "--interactions", str(canonical),
             "--checkpoint", str(checkpoint), "--epochs", "1", *ARCH_FLAGS]
        ) == 0

        report_path = tmp_path / "report.txt"
        capsys.readouterr()
        assert cli.main(
            ["eval", "--manifest", str(manifest), "--interactions", str(canonical),
             "--checkpoint", str(checkpoint), "--report", str(report_path)]
        ) == 0
        report = EvalReport.from_text(capsys.readouterr().out)
        assert 0.0 <= report.accuracy <= 1.0
        assert report_path.exists()
