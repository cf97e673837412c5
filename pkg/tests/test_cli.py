import csv
import json

import numpy as np
import pytest

from amff import cli
from amff.dataio import read_feature_records, write_feature_records
from amff.encoder import Image, write_image
from amff.tensor import make_rng


def _run(argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def data_file(tmp_path, tiny_dataset):
    path = tmp_path / "data.amff"
    write_feature_records(tiny_dataset, path)
    return path


def _fast_train_flags():
    return ["--epochs", "3", "--patience", "5", "--batch-size", "16"]


class TestSynth:
    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.amff", tmp_path / "b.amff"
        assert _run(["synth", "--out", a, "--n", 16, "--dim", 8, "--noise", 0.1, "--seed", 3]) == 0
        assert _run(["synth", "--out", b, "--n", 16, "--dim", 8, "--noise", 0.1, "--seed", 3]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_output_loads(self, tmp_path):
        out = tmp_path / "d.amff"
        assert _run(["synth", "--out", out, "--n", 12, "--dim", 8, "--seed", 1]) == 0
        ds = read_feature_records(out)
        assert len(ds) == 12 and ds.dim == 8

    def test_invalid_sizes_exit_nonzero(self, tmp_path, capsys):
        rc = _run(["synth", "--out", tmp_path / "x.amff", "--n", 2, "--dim", 8])
        assert rc == 1
        assert "ERROR E_DATA" in capsys.readouterr().err


class TestExtract:
    def test_images_to_features(self, tmp_path):
        rng = make_rng(0)
        img_dir = tmp_path / "imgs"
        img_dir.mkdir()
        rows = []
        for i in range(4):
            name = f"img{i}.ppm"
            write_image(img_dir / name, Image(rng.uniform(0, 1, size=(36, 36, 3))))
            rows.append(
                {"id": f"s{i}", "generator": "g", "prompt": f"scene number {i}",
                 "image": name, "q_v": str(1.0 + i), "q_a": "", "q_c": str(0.1 * i)}
            )
        manifest = tmp_path / "manifest.csv"
        with open(manifest, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        out = tmp_path / "features.amff"
        assert _run(["extract", "--images", img_dir, "--manifest", manifest, "--out", out, "--dim", 16]) == 0
        ds = read_feature_records(out)
        assert len(ds) == 4 and ds.dim == 16
        s = ds.samples[1]
        assert s.labels.q_v == 2.0 and s.labels.q_a is None
        for name in ("f_05", "f_10", "f_15", "f_text"):
            assert np.linalg.norm(getattr(s.features, name)) == pytest.approx(1.0, abs=1e-5)


class TestTrainEval:
    def test_pipeline_outputs(self, tmp_path, data_file):
        out = tmp_path / "run"
        assert _run(["train", "--data", data_file, "--out", out, "--seed", 1,
                     "--split", "random:0.8", *_fast_train_flags()]) == 0
        ckpt = out / "checkpoints" / "model.ckpt"
        assert ckpt.exists()
        assert (out / "reports" / "train_report.json").exists()
        assert _run(["eval", "--data", data_file, "--ckpt", ckpt, "--out", out,
                     "--seed", 1, "--split", "random:0.8"]) == 0
        lines = (out / "reports" / "eval.jsonl").read_text().strip().splitlines()
        tasks = {json.loads(l)["task"] for l in lines}
        assert tasks == {"consistency", "quality", "authenticity"}
        for task in tasks:
            assert (out / "scatter" / f"{task}.txt").exists()

    def test_csv_data_file_accepted(self, tmp_path, tiny_dataset):
        from amff.dataio import write_feature_records_csv

        csv_path = tmp_path / "data.csv"
        write_feature_records_csv(tiny_dataset, csv_path)
        out = tmp_path / "run_csv"
        assert _run(["train", "--data", csv_path, "--out", out, "--seed", 1,
                     *_fast_train_flags()]) == 0
        assert (out / "checkpoints" / "model.ckpt").exists()

    def test_eval_dim_mismatch_exits_nonzero(self, tmp_path, data_file, capsys):
        out = tmp_path / "run"
        assert _run(["train", "--data", data_file, "--out", out, "--seed", 1,
                     *_fast_train_flags()]) == 0
        other = tmp_path / "other.amff"
        assert _run(["synth", "--out", other, "--n", 16, "--dim", 8, "--seed", 2]) == 0
        rc = _run(["eval", "--data", other, "--ckpt", out / "checkpoints" / "model.ckpt",
                   "--out", tmp_path / "run2"])
        assert rc == 1
        err = capsys.readouterr().err
        assert "ERROR E_SHAPE" in err and "dimension mismatch" in err

    def test_trials_protocol(self, tmp_path, data_file):
        out = tmp_path / "trials"
        assert _run(["eval", "--data", data_file, "--out", out, "--seed", 0,
                     "--trials", 2, "--split", "random:0.8", *_fast_train_flags()]) == 0
        trial_lines = (out / "reports" / "trials.jsonl").read_text().strip().splitlines()
        seeds = {json.loads(l)["seed"] for l in trial_lines}
        assert seeds == {0, 1}
        assert (out / "reports" / "eval.jsonl").exists()

    def test_trials_with_ckpt_rejected(self, tmp_path, data_file, capsys):
        rc = _run(["eval", "--data", data_file, "--ckpt", tmp_path / "nope.ckpt",
                   "--out", tmp_path / "x", "--trials", 3])
        assert rc == 1
        assert "ERROR E_CONFIG" in capsys.readouterr().err

    def test_bad_split_flag(self, tmp_path, data_file, capsys):
        rc = _run(["train", "--data", data_file, "--out", tmp_path / "r", "--split", "bogus"])
        assert rc == 1
        assert "ERROR E_CONFIG" in capsys.readouterr().err

    def test_worker_cap_env_validated(self, tmp_path, data_file, capsys, monkeypatch):
        monkeypatch.setenv("AMFF_THREADS", "zero")
        rc = _run(["eval", "--data", data_file, "--out", tmp_path / "t", "--trials", 2,
                   *_fast_train_flags()])
        assert rc == 1
        assert "AMFF_THREADS" in capsys.readouterr().err

    def test_worker_cap_parallel_matches_serial(self, tmp_path, data_file, monkeypatch):
        serial_out = tmp_path / "serial"
        assert _run(["eval", "--data", data_file, "--out", serial_out, "--seed", 0,
                     "--trials", 2, *_fast_train_flags()]) == 0
        monkeypatch.setenv("AMFF_THREADS", "2")
        par_out = tmp_path / "parallel"
        assert _run(["eval", "--data", data_file, "--out", par_out, "--seed", 0,
                     "--trials", 2, *_fast_train_flags()]) == 0
        assert (serial_out / "reports" / "eval.jsonl").read_bytes() == (
            par_out / "reports" / "eval.jsonl"
        ).read_bytes()


class TestPredict:
    def test_emits_score_triples(self, tmp_path, data_file):
        out = tmp_path / "run"
        assert _run(["train", "--data", data_file, "--out", out, "--seed", 1,
                     *_fast_train_flags()]) == 0
        pred_file = tmp_path / "preds.jsonl"
        assert _run(["predict", "--data", data_file,
                     "--ckpt", out / "checkpoints" / "model.ckpt", "--out", pred_file]) == 0
        lines = pred_file.read_text().strip().splitlines()
        assert len(lines) == 48
        row = json.loads(lines[0])
        assert set(row) == {"id", "s_c", "s_v", "s_a"}
        assert -1.0 <= row["s_c"] <= 1.0


class TestGradcheckCommand:
    def test_passes_and_writes_report(self, tmp_path, capsys):
        assert _run(["gradcheck", "--seed", 0, "--out", tmp_path / "g"]) == 0
        report = (tmp_path / "g" / "reports" / "gradcheck.txt").read_text()
        assert "worst" in report
        assert "loss.fidelity" in capsys.readouterr().out


class TestAblate:
    def test_emits_both_tables(self, tmp_path, data_file):
        out = tmp_path / "ablate"
        assert _run(["ablate", "--data", data_file, "--out", out, "--seed", 0,
                     "--epochs", "2", "--patience", "5", "--batch-size", "16"]) == 0
        text = (out / "reports" / "ablate.txt").read_text()
        assert "# architecture ablations" in text
        assert "# similarity metrics" in text
        rows = [json.loads(l) for l in (out / "reports" / "ablate.jsonl").read_text().splitlines()]
        variants = {(r["section"], r["variant"]) for r in rows}
        assert ("architecture", "full") in variants
        assert ("architecture", "no_msi") in variants
        assert ("architecture", "no_aff") in variants
        assert ("similarity", "euclidean") in variants
        assert ("similarity", "manhattan") in variants

    def test_paired_splits_identical(self, tmp_path, data_file):
        # rerunning ablate with the same seed reproduces identical bytes
        out1, out2 = tmp_path / "a1", tmp_path / "a2"
        for out in (out1, out2):
            assert _run(["ablate", "--data", data_file, "--out", out, "--seed", 3,
                         "--epochs", "2", "--patience", "5", "--batch-size", "16"]) == 0
        assert (out1 / "reports" / "ablate.jsonl").read_bytes() == (
            out2 / "reports" / "ablate.jsonl"
        ).read_bytes()
