import csv
import json
import shutil

import pytest

from vtreg.cli import main
from vtreg.dataio import load_manifest, read_theta_table

TINY = [
    "--set", "train.image_size=32",
    "--set", "train.batch_size=4",
    "--set", "regnet.patch_size=16",
    "--set", "regnet.vit_depth=1",
    "--set", "regnet.embed_dim=32",
    "--set", "regnet.num_heads=4",
    "--set", "regnet.mlp_widths=[32,16,8]",
    "--set", "generator.base_channels=4",
    "--set", "generator.max_channels=8",
    "--set", "discriminator.base_channels=4",
    "--set", "discriminator.max_channels=8",
]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--n", "32", "--seed", "7", "--size", "32", "--out", str(out)]) == 0
    return out


def test_synth_contract(synth_dir):
    m = load_manifest(synth_dir / "manifest.csv")
    assert len(m) == 32
    assert len(read_theta_table(synth_dir / "theta_true.csv")) == 32
    assert len(list((synth_dir / "thermal").glob("*.png"))) == 32


def test_evaluate_identical_pairs(tmp_path, synth_dir):
    rows = list(csv.DictReader(open(synth_dir / "manifest.csv")))[:3]
    with open(tmp_path / "same.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=rows[0].keys())
        w.writeheader()
        for r in rows:
            shutil.copy(synth_dir / r["visible_path"], tmp_path / f"{r['pair_id']}_copy.png")
            r = dict(r, visible_path=str(synth_dir / r["visible_path"]), thermal_path=str(tmp_path / f"{r['pair_id']}_copy.png"))
            w.writerow(r)
    assert main(["evaluate", "--manifest", str(tmp_path / "same.csv"), "--out", str(tmp_path / "ev"), "--size", "32"]) == 0
    table = list(csv.DictReader(open(tmp_path / "ev" / "eval_pairs.csv")))
    assert [float(r["ssim_edges"]) for r in table] == pytest.approx([1.0] * 3)
    assert json.loads((tmp_path / "ev" / "eval_summary.json").read_text())["n_pairs"] == 3


def test_train_register_evaluate_pipeline(tmp_path, synth_dir):
    run = tmp_path / "run"
    assert main(["train", "--manifest", str(synth_dir / "manifest.csv"), "--out", str(run), "--steps", "2",
                 "--seed", "3", *TINY]) == 0
    assert (run / "config.snapshot").is_file() and (run / "log.jsonl").is_file()
    reg = tmp_path / "reg"
    assert main(["register", "--manifest", str(synth_dir / "manifest.csv"), "--checkpoint", str(run), "--out", str(reg)]) == 0
    assert len(read_theta_table(reg / "theta_sidecar.csv")) == 32
    ev = tmp_path / "ev"
    assert main(["evaluate", "--manifest", str(reg / "registered_manifest.csv"), "--out", str(ev), "--size", "32",
                 "--truth", str(synth_dir / "theta_true.csv"), "--sidecar", str(reg / "theta_sidecar.csv")]) == 0
    summary = json.loads((ev / "corner_error.json").read_text())
    assert summary["n_pairs"] == 32 and summary["baseline_error"] > 0


def test_diffmap_and_vessels(tmp_path, synth_dir):
    assert main(["diffmap", "--manifest", str(synth_dir / "manifest.csv"), "--out", str(tmp_path / "d"), "--size", "32"]) == 0
    assert len(list((tmp_path / "d").glob("*.png"))) == 32
    t0, t1 = synth_dir / "thermal" / "pair_0000.png", synth_dir / "thermal" / "pair_0001.png"
    assert main(["vessels", str(t0), str(t1), "--out", str(tmp_path / "v")]) == 0
    assert (tmp_path / "v" / "pair_0000_vessels.png").is_file()
    assert "psnr" in json.loads((tmp_path / "v" / "identity_similarity.json").read_text())


def test_exit_codes(tmp_path, synth_dir):
    manifest = str(synth_dir / "manifest.csv")
    assert main(["train", "--manifest", manifest, "--out", str(tmp_path / "r"), "--set", "train.bogus=1"]) == 1
    assert main(["train", "--manifest", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "r"), *TINY]) == 2
    assert main(["train", "--manifest", manifest, "--out", str(tmp_path / "r"), "--steps", "1", *TINY,
                 "--set", "train.explode_threshold=1e-9"]) == 3
