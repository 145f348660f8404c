import csv
import json
import os

import numpy as np
import pytest

from ldmap.cli import build_parser, load_dataset_dir, main, render_pgm
from ldmap.grids import VolumeGrid, load_volume, save_volume


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh)
    return str(path)


def dataset_config():
    return {
        "dims": [16, 16],
        "seed": 7,
        "lesions": {"count": 60, "radius_range": [2.0, 4.0]},
        "substrates": [{
            "blobs": [{"name": "A", "center": [5.0, 5.0], "scale": [2.0, 2.0]}],
            "formula": "A",
        }],
        "deficit": {"kind": "binary", "binary_threshold": 0.01},
    }


def tree_bytes(root):
    out = {}
    for base, _, names in os.walk(root):
        for name in names:
            p = os.path.join(base, name)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    cfg = write_json(root / "spec.json", dataset_config())
    out = str(root / "data")
    assert main(["simulate", "--config", cfg, "--out", out]) == 0
    return out


@pytest.fixture(scope="module")
def model_dir(dataset_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("model")
    cfg = write_json(root / "dlm.json", {
        "latent_dim": 4, "base_channels": 2, "levels": 2, "batch_size": 16,
        "max_epochs": 2, "early_stop_patience": 2, "n_substrate_samples": 8,
    })
    out = str(root / "run")
    assert main(["train", "--data", dataset_dir, "--config", cfg,
                 "--seed", "1", "--out", out]) == 0
    return out


class TestSimulate:
    def test_reruns_are_bitwise_identical(self, tmp_path):
        cfg = write_json(tmp_path / "spec.json", dataset_config())
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        assert main(["simulate", "--config", cfg, "--out", a]) == 0
        assert main(["simulate", "--config", cfg, "--out", b]) == 0
        ta, tb = tree_bytes(a), tree_bytes(b)
        assert ta.keys() == tb.keys()
        assert all(ta[k] == tb[k] for k in ta)

    def test_labels_rows_match_lesion_count(self, dataset_dir):
        with open(os.path.join(dataset_dir, "labels.csv")) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 60
        assert {r["split"] for r in rows} == {"train", "val", "calib"}

    def test_missing_spec_fails_on_stderr(self, tmp_path, capsys):
        rc = main(["simulate", "--config", str(tmp_path / "nope.json"),
                   "--out", str(tmp_path / "x")])
        assert rc == 2
        assert "error" in capsys.readouterr().err

    def test_roundtrip_dataset(self, dataset_dir):
        ds = load_dataset_dir(dataset_dir)
        assert ds.n == 60
        assert ds.dims == (16, 16)
        assert sorted(np.concatenate(list(ds.splits.values())).tolist()) == \
            list(range(60))

    def test_seed_flag_changes_data(self, tmp_path, dataset_dir):
        cfg = write_json(tmp_path / "spec.json", dataset_config())
        out = str(tmp_path / "reseeded")
        assert main(["simulate", "--config", cfg, "--seed", "8",
                     "--out", out]) == 0
        a = tree_bytes(dataset_dir)
        b = tree_bytes(out)
        assert a["labels.csv"] != b["labels.csv"] or \
            any(a[k] != b[k] for k in a if k.startswith("lesion"))


class TestTrain:
    def test_artifacts(self, model_dir):
        assert os.path.exists(os.path.join(model_dir, "checkpoint.pt"))
        with open(os.path.join(model_dir, "training_log.csv")) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "train_loss", "label_loglik",
                           "lesion_loglik", "kl", "val_label_loglik"]
        assert len(rows) == 3  # header + 2 epochs

    def test_labels_only_drops_lesion_column(self, dataset_dir, tmp_path):
        cfg = write_json(tmp_path / "dlm.json", {
            "latent_dim": 4, "base_channels": 2, "levels": 2,
            "batch_size": 16, "max_epochs": 1, "early_stop_patience": 1,
        })
        out = str(tmp_path / "run")
        assert main(["train", "--data", dataset_dir, "--config", cfg,
                     "--ablation", "labels_only", "--out", out]) == 0
        with open(os.path.join(out, "training_log.csv")) as fh:
            header = next(csv.reader(fh))
        assert "lesion_loglik" not in header
        assert "kl" in header

    def test_missing_dataset_dir(self, tmp_path, capsys):
        rc = main(["train", "--data", str(tmp_path / "none"),
                   "--out", str(tmp_path / "x")])
        assert rc == 2
        assert "not found" in capsys.readouterr().err


class TestEvaluate:
    def test_identical_masks_dice_one(self, dataset_dir, tmp_path):
        truth = os.path.join(dataset_dir, "ground_truth.vol")
        out = str(tmp_path / "eval")
        assert main(["evaluate", "--truth", truth, "--pred", truth,
                     "--out", out]) == 0
        with open(os.path.join(out, "report.json")) as fh:
            report = json.load(fh)
        assert report["dice"] == 1.0
        assert report["hausdorff"] == 0.0
        mask = load_volume(os.path.join(out, "substrate_mask.vol"))
        assert mask.data.any()

    def test_calibrated_model_evaluation(self, dataset_dir, model_dir, tmp_path):
        truth = os.path.join(dataset_dir, "ground_truth.vol")
        out = str(tmp_path / "eval")
        rc = main(["evaluate", "--truth", truth,
                   "--model", os.path.join(model_dir, "checkpoint.pt"),
                   "--data", dataset_dir, "--out", out])
        assert rc == 0
        with open(os.path.join(out, "report.json")) as fh:
            report = json.load(fh)
        assert 0.0 <= report["dice"] <= 1.0
        assert 0.01 <= report["threshold"] <= 0.99
        assert os.path.exists(os.path.join(out, "substrate_mean.vol"))

    def test_needs_a_source(self, dataset_dir, tmp_path, capsys):
        truth = os.path.join(dataset_dir, "ground_truth.vol")
        rc = main(["evaluate", "--truth", truth, "--out", str(tmp_path / "e")])
        assert rc == 2
        capsys.readouterr()


class TestBenchmark:
    def test_single_cell_csv(self, tmp_path):
        spec = {
            "scenario": "cli", "dims": [12, 12],
            "lesions": {"radius_range": [2.0, 4.0]},
            "substrates": [{
                "blobs": [{"name": "A", "center": [5.0, 5.0],
                           "scale": [2.0, 2.0]}],
                "formula": "A"}],
            "deficit": {"kind": "binary", "binary_threshold": 0.01},
            "methods": ["vlsm_fisher"], "sample_sizes": [40], "seeds": [0],
            "n_perm": 30,
        }
        cfg = write_json(tmp_path / "exp.json", spec)
        out = str(tmp_path / "results.csv")
        assert main(["benchmark", "--config", cfg, "--out", out]) == 0
        with open(out) as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 2
        assert rows[1][0] == "cli" and rows[1][1] == "vlsm_fisher"


class TestSpatialBias:
    def test_scan_csv(self, tmp_path):
        cfg = write_json(tmp_path / "scan.json", {
            "dims": [12, 12],
            "lesions": {"count": 60, "radius_range": [2.0, 4.0]},
            "stride": 4, "max_targets": 2,
            "methods": ["vlsm_fisher"], "n_perm": 30,
        })
        out = str(tmp_path / "bias.csv")
        assert main(["spatial-bias", "--config", cfg, "--seed", "5",
                     "--out", out]) == 0
        with open(out) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["target", "method", "displacement", "mask_voxels",
                           "wall_secs"]
        assert len(rows) == 3


class TestFig1:
    def test_four_panels(self, tmp_path):
        out = str(tmp_path / "fig1")
        assert main(["fig1", "--seed", "0", "--out", out]) == 0
        with open(os.path.join(out, "summary.csv")) as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 5
        for lm in ("simple", "complex"):
            for sm in ("simple", "complex"):
                for stem in ("stat", "sig", "gt"):
                    assert os.path.exists(
                        os.path.join(out, f"{stem}_{lm}_{sm}.vol"))


class TestRender:
    def test_binary_mask_values(self, tmp_path):
        data = np.zeros((4, 5), dtype=np.uint8)
        data[1:3, 1:4] = 1
        vol = tmp_path / "m.vol"
        save_volume(VolumeGrid.binary(data), vol)
        out = tmp_path / "m.pgm"
        assert main(["render", "--input", str(vol), "--out", str(out)]) == 0
        text = out.read_text().split("\n")
        assert text[0] == "P2"
        assert text[1] == "5 4"
        values = {int(v) for line in text[3:] if line for v in line.split()}
        assert values == {0, 255}

    def test_all_zero_volume(self, tmp_path):
        vol = tmp_path / "z.vol"
        save_volume(VolumeGrid.binary(np.zeros((3, 3), dtype=np.uint8)), vol)
        out = tmp_path / "z.pgm"
        assert main(["render", "--input", str(vol), "--out", str(out)]) == 0
        values = {int(v) for line in out.read_text().split("\n")[3:]
                  if line for v in line.split()}
        assert values == {0}

    def test_3d_needs_slice_and_bounds(self, tmp_path, capsys):
        vol = tmp_path / "v.vol"
        save_volume(VolumeGrid.binary(np.ones((4, 4, 4), dtype=np.uint8)), vol)
        rc = main(["render", "--input", str(vol), "--out", str(tmp_path / "o")])
        assert rc == 2
        rc = main(["render", "--input", str(vol), "--slice-axis", "0",
                   "--slice-index", "9", "--out", str(tmp_path / "o")])
        assert rc == 2
        capsys.readouterr()
        rc = main(["render", "--input", str(vol), "--slice-axis", "0",
                   "--slice-index", "2", "--out", str(tmp_path / "o.pgm")])
        assert rc == 0

    def test_overlay_outline(self):
        base = VolumeGrid.real(np.zeros((5, 5), dtype=np.float32))
        over = np.zeros((5, 5), dtype=np.uint8)
        over[1:4, 1:4] = 1
        text = render_pgm(base, overlay=VolumeGrid.binary(over))
        rows = [[int(v) for v in line.split()]
                for line in text.split("\n")[3:] if line]
        img = np.array(rows)
        assert img[1, 1] == 255 and img[2, 2] == 0  # ring, hollow center
        assert img[0, 0] == 0


class TestParser:
    def test_help_lists_every_flag(self):
        parser = build_parser()
        subs = parser._subparsers._group_actions[0].choices
        assert set(subs) == {"simulate", "train", "evaluate", "benchmark",
                             "spatial-bias", "fig1", "render"}
        for name, sp in subs.items():
            text = sp.format_help()
            for action in sp._actions:
                if action.option_strings:
                    assert action.option_strings[0] in text
