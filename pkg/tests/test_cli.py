"""End-to-end tests for the command-line interface.

Runs the real subcommands in-process via cli.main() on a small synthetic
scene: ingest -> segment -> train -> infer -> eval -> render, plus the
error paths and their exit codes (0 ok, 1 usage, 2 data, 3 numeric).
The pipeline fixture is built once per module and reused.
"""

import json
import os

import numpy as np
import pytest

from spxmamba import cli, synth
from spxmamba.cli import palette_decode, render_to_png
from spxmamba.raster import ClassScheme


def _run(capsys, *argv):
    """Invoke the CLI and return (exit_code, parsed last JSON line)."""
    rc = cli.main(list(argv))
    out = capsys.readouterr().out.strip().splitlines()
    try:
        payload = json.loads(out[-1]) if out else {}
    except json.JSONDecodeError:  # --help prints plain usage text
        payload = {}
    return rc, payload


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Scene + ingest + segment + one 2-epoch training run."""
    root = tmp_path_factory.mktemp("cli_pipeline")
    bands, labels = synth.make_scene(128, 128, n_classes=3, c_bands=4,
                                     block=32, noise=0.25, seed=3)
    np.save(root / "bands.npy", bands)
    np.save(root / "labels.npy", labels)
    (root / "scheme.json").write_text(
        json.dumps(synth.small_scheme(3).to_dict()))
    (root / "cfg.json").write_text(json.dumps({
        "batch_size": 8, "lr": 3e-4, "epochs": 2, "d_hidden": 8,
        "n_blocks": 2, "n_sp_target": 8, "n_max": 16, "seed": 0}))

    assert cli.main(["ingest",
                     "--bands", str(root / "bands.npy"),
                     "--labels", str(root / "labels.npy"),
                     "--scheme", str(root / "scheme.json"),
                     "--patch-size", "32", "--ratios", "0.5,0.25,0.25",
                     "--seed", "0", "--out", str(root / "data")]) == 0
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    patch_id = manifest["entries"][0]["patch_id"]
    patch_path = root / "data" / "patches" / f"{patch_id}.patch"

    assert cli.main(["segment", "--patch", str(patch_path), "--nsp", "8",
                     "--out", str(root / "sp.bin")]) == 0
    assert cli.main(["train", "--manifest", str(root / "data/manifest.json"),
                     "--config", str(root / "cfg.json"),
                     "--out", str(root / "run")]) == 0
    return root, patch_path


# -- exit codes ------------------------------------------------------------

def test_help_exits_zero(capsys):
    rc, _ = _run(capsys, "--help")
    assert rc == 0


def test_subcommand_help_exits_zero(capsys):
    for name in ("ingest", "segment", "train", "ablate",
                 "infer", "eval", "bench", "render"):
        rc = cli.main([name, "--help"])
        capsys.readouterr()
        assert rc == 0, name


def test_unknown_flag_is_usage_error(capsys):
    rc, payload = _run(capsys, "bench", "--bogus")
    assert rc == 1
    assert payload["status"] == "error"
    assert payload["kind"] == "usage"


def test_missing_required_args_is_usage_error(capsys):
    rc, payload = _run(capsys, "train")
    assert rc == 1
    assert payload["kind"] == "usage"


def test_missing_manifest_is_data_error(tmp_path, pipeline, capsys):
    root, _ = pipeline
    missing = str(tmp_path / "nope.json")
    rc, payload = _run(capsys, "eval",
                       "--ckpt", str(root / "run" / "final.ckpt"),
                       "--manifest", missing)
    assert rc == 2
    assert payload["kind"] == "data"
    assert missing in payload["message"]


def test_bench_rejects_too_few_repeats(capsys):
    rc, payload = _run(capsys, "bench", "--repeats", "2")
    assert rc == 1
    assert payload["kind"] == "usage"


def test_bad_ratios_is_usage_error(tmp_path, pipeline, capsys):
    root, _ = pipeline
    rc, payload = _run(capsys, "ingest",
                       "--bands", str(root / "bands.npy"),
                       "--labels", str(root / "labels.npy"),
                       "--ratios", "0.5,0.5",
                       "--out", str(tmp_path / "d"))
    assert rc == 1
    assert "ratios" in payload["message"]


# -- the full pipeline -----------------------------------------------------

def test_ingest_wrote_patches_and_manifest(pipeline):
    root, _ = pipeline
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    assert len(manifest["entries"]) == 16
    splits = [e["split"] for e in manifest["entries"]]
    assert splits.count("train") == 8
    assert splits.count("val") == 4
    assert splits.count("test") == 4
    for e in manifest["entries"]:
        assert not os.path.isabs(e["path"])
        assert (root / "data" / e["path"]).exists()


def test_train_wrote_checkpoints_and_log(pipeline):
    root, _ = pipeline
    assert (root / "run" / "final.ckpt").exists()
    assert (root / "run" / "best.ckpt").exists()
    rows = [json.loads(line) for line in
            (root / "run" / "train_log.jsonl").read_text().splitlines()]
    assert len(rows) == 2
    assert all(np.isfinite(r["train_loss"]) for r in rows)


def test_infer_writes_all_heads(pipeline, tmp_path, capsys):
    root, patch_path = pipeline
    maps = tmp_path / "maps"
    rc, payload = _run(capsys, "infer",
                       "--ckpt", str(root / "run" / "final.ckpt"),
                       "--patch", str(patch_path),
                       "--sp", str(root / "sp.bin"),
                       "--scheme", str(root / "scheme.json"),
                       "--out-maps", str(maps))
    assert rc == 0
    assert payload["heads"] == ["local", "global", "final"]
    for head in ("local", "global", "final"):
        logits = np.load(maps / f"logits_{head}.npy")
        pred = np.load(maps / f"pred_{head}.npy")
        assert logits.shape == (3, 32, 32)
        assert pred.shape == (32, 32)
        np.testing.assert_array_equal(pred, np.argmax(logits, axis=0))
        assert (maps / f"pred_{head}.png").exists()
    # the final head must agree with local except where voting overrode it
    scheme = ClassScheme.from_dict(
        json.loads((root / "scheme.json").read_text()))
    decoded = palette_decode(str(maps / "pred_final.png"), scheme)
    np.testing.assert_array_equal(decoded, np.load(maps / "pred_final.npy"))


def test_eval_report_schema(pipeline, tmp_path, capsys):
    root, _ = pipeline
    out = tmp_path / "report.json"
    rc, payload = _run(capsys, "eval",
                       "--ckpt", str(root / "run" / "final.ckpt"),
                       "--manifest", str(root / "data" / "manifest.json"),
                       "--split", "test", "--out", str(out))
    assert rc == 0
    report = json.loads(out.read_text())
    for key in ("oa", "aa", "kappa", "miou", "per_class_accuracy",
                "per_class_iou", "confusion_matrix", "conventions"):
        assert key in report, key
    assert report["class_names"] == ["meadow", "forest", "water"]
    assert report["n_classes"] == 3
    assert 0.0 <= report["oa"] <= 1.0
    assert payload["oa"] == report["oa"]
    # n_pixels = 4 test patches of 32x32 fully labeled
    assert report["n_pixels"] == 4 * 32 * 32


def test_eval_head_choice_changes_report(pipeline, tmp_path, capsys):
    root, _ = pipeline
    reports = {}
    for head in ("local", "final"):
        out = tmp_path / f"rep_{head}.json"
        rc, _ = _run(capsys, "eval",
                     "--ckpt", str(root / "run" / "final.ckpt"),
                     "--manifest", str(root / "data" / "manifest.json"),
                     "--split", "test", "--head", head, "--out", str(out))
        assert rc == 0
        reports[head] = json.loads(out.read_text())
    # same format either way; the confusion matrices are head-specific
    assert reports["local"]["conventions"] == reports["final"]["conventions"]


def test_bench_json_and_csv(tmp_path, capsys):
    out_json = tmp_path / "bench.json"
    out_csv = tmp_path / "bench.csv"
    rc, payload = _run(capsys, "bench", "--sizes", "8,16", "--nsp", "16",
                       "--repeats", "3", "--d-model", "8", "--n-blocks", "1",
                       "--out", str(out_json), "--csv", str(out_csv))
    assert rc == 0
    doc = json.loads(out_json.read_text())
    assert len(doc["rows"]) == 2
    lines = out_csv.read_text().strip().splitlines()
    assert len(lines) == 3
    assert lines[0].startswith("h,w,n_sp,reduction_factor")
    assert len(payload["speedups"]) == 2


# -- determinism across runs ----------------------------------------------

def test_rerun_is_byte_identical(pipeline, tmp_path, capsys):
    root, _ = pipeline
    manifest = str(root / "data" / "manifest.json")
    cfg = str(root / "cfg.json")
    reports = []
    for tag in ("a", "b"):
        run_dir = tmp_path / f"run_{tag}"
        assert cli.main(["train", "--manifest", manifest, "--config", cfg,
                         "--out", str(run_dir)]) == 0
        out = tmp_path / f"report_{tag}.json"
        assert cli.main(["eval", "--ckpt", str(run_dir / "final.ckpt"),
                         "--manifest", manifest, "--split", "test",
                         "--out", str(out)]) == 0
        capsys.readouterr()
        reports.append(out)
        if tag == "b":
            first = (tmp_path / "run_a" / "final.ckpt").read_bytes()
            second = (run_dir / "final.ckpt").read_bytes()
            assert first == second
    assert reports[0].read_bytes() == reports[1].read_bytes()


# -- config precedence -----------------------------------------------------

def test_flag_beats_config_file_beats_default(pipeline, tmp_path, capsys):
    root, _ = pipeline
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({
        "epochs": 5, "lr": 0.01, "d_hidden": 8, "n_blocks": 2,
        "n_sp_target": 8, "n_max": 16, "batch_size": 8}))
    run_dir = tmp_path / "run"
    rc, _ = _run(capsys, "train",
                 "--manifest", str(root / "data" / "manifest.json"),
                 "--config", str(cfg_file), "--epochs", "2",
                 "--out", str(run_dir))
    assert rc == 0
    from spxmamba import model
    _, meta = model.build_from_checkpoint(str(run_dir / "final.ckpt"))
    stored = meta["config"]
    assert stored["epochs"] == 2       # CLI flag wins over the file
    assert stored["lr"] == 0.01        # file wins over the default
    assert stored["alpha"] == 0.7      # untouched default survives
    rows = (run_dir / "train_log.jsonl").read_text().splitlines()
    assert len(rows) == 2


# -- rendering --------------------------------------------------------------

def test_render_round_trip_random_rasters(tmp_path):
    scheme = ClassScheme.default()
    rng = np.random.default_rng(11)
    for trial in range(5):
        raster = rng.integers(0, scheme.num_classes,
                              size=(17, 23)).astype(np.uint8)
        path = str(tmp_path / f"t{trial}.png")
        render_to_png(raster, scheme, path)
        np.testing.assert_array_equal(palette_decode(path, scheme), raster)


def test_render_default_palette_colors(tmp_path):
    # checkerboard of the barren and urban classes, default 13-class palette
    ids = np.indices((8, 8)).sum(axis=0) % 2
    raster = np.where(ids == 0, 9, 10).astype(np.uint8)
    path = str(tmp_path / "board.png")
    render_to_png(raster, ClassScheme.default(), path)
    from PIL import Image
    rgb = np.asarray(Image.open(path).convert("RGB"))
    np.testing.assert_array_equal(rgb[0, 0], (166, 171, 174))
    np.testing.assert_array_equal(rgb[0, 1], (221, 32, 38))


def test_render_rejects_out_of_range_ids(tmp_path, pipeline, capsys):
    root, _ = pipeline
    bad = np.full((4, 4), 13, dtype=np.uint8)  # default scheme has ids 0..12
    np.save(tmp_path / "bad.npy", bad)
    rc, payload = _run(capsys, "render", "--raster", str(tmp_path / "bad.npy"),
                       "--out", str(tmp_path / "bad.png"))
    assert rc == 2
    assert payload["kind"] == "data"


def test_render_cli_matches_library(pipeline, tmp_path, capsys):
    root, _ = pipeline
    raster = np.tile(np.arange(3, dtype=np.uint8), (6, 4))[:, :8]
    np.save(tmp_path / "r.npy", raster)
    rc, _ = _run(capsys, "render", "--raster", str(tmp_path / "r.npy"),
                 "--scheme", str(root / "scheme.json"),
                 "--out", str(tmp_path / "r.png"))
    assert rc == 0
    scheme = ClassScheme.from_dict(
        json.loads((root / "scheme.json").read_text()))
    np.testing.assert_array_equal(
        palette_decode(str(tmp_path / "r.png"), scheme), raster)
