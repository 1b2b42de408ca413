import json
import re

import numpy as np
import pytest
from PIL import Image

from stenoseg.cli import (
    CONFIG_KEYS,
    EXIT_PARTIAL,
    EXIT_USAGE,
    bubble_chart,
    bubble_radius,
    main,
    parse_config,
    render_config,
    resolve,
)
from stenoseg.data import Manifest, load_sample
from stenoseg.errors import ConfigError
from stenoseg.metrics import confusion
from stenoseg.models import Variant


def ingest_synthetic(tmp_path, n=6, size=32, seed=0):
    raw, cache = tmp_path / "raw", tmp_path / "cache"
    assert main(["synth", "--out", str(raw), "--count", str(n), "--size", str(size), "--seed", str(seed)]) == 0
    assert main(["ingest", str(raw / "annotations.json"), str(raw), "--out", str(cache), "--size", str(size)]) == 0
    return raw, cache / "manifest.json"


def write_config(path, manifest, **extra):
    lines = [f"data.manifest = {manifest}", "model.variant = umamba_bot", "optim.steps = 3",
             "optim.batch_size = 2", "train.folds = 0"]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    raw, manifest = ingest_synthetic(tmp)
    cfg = write_config(tmp / "run.cfg", manifest)
    assert main(["train", "--config", str(cfg), "--out", str(tmp / "out")]) == 0
    return tmp, raw, manifest, tmp / "out" / "fold-0" / "best.ckpt"


# -------------------------------------------------------------------- config
def test_config_defaults_and_round_trip():
    cfg = parse_config("")
    assert cfg["optim.lr"] == 1e-3 and cfg["loss.gamma"] == 0.5 and cfg["train.folds"] == 5
    text = render_config(parse_config("model.stage_channels = 8,16,32\ndata.augment = yes  # flips\n"))
    again = parse_config(text)
    assert again["model.stage_channels"] == (8, 16, 32) and again["data.augment"] is True
    assert render_config(again) == text


def test_unknown_key_is_named():
    with pytest.raises(ConfigError) as info:
        parse_config("optimzer.lr = 0.1")
    assert info.value.key == "optimzer.lr"


def test_resolve_names_bad_values():
    for text, key in [("optim.lr = fast", "optim.lr"), ("model.variant = resnet", "model.variant"),
                      ("train.folds = 1", "train.folds")]:
        with pytest.raises(ConfigError) as info:
            resolve(parse_config(text))
        assert info.value.key == key
    spec, loss, optim = resolve(parse_config("model.variant = swin_unetr\nmodel.window_size = 2"))
    assert spec.variant == Variant.SWIN_UNETR and spec.window_size == 2
    assert set(CONFIG_KEYS) >= {"seed", "optim.lr", "loss.gamma", "train.fold"}


def test_unknown_key_exit_code_and_no_output(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("optimzer.lr = 0.1\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "out")]) == EXIT_USAGE
    assert "optimzer.lr" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_bad_usage_exits_one():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == EXIT_USAGE


# -------------------------------------------------------------------- ingest
def test_ingest_collects_failures(tmp_path, capsys):
    raw = tmp_path / "raw"
    main(["synth", "--out", str(raw), "--count", "4", "--size", "16"])
    (raw / "img0003.pgm").write_bytes(b"P5 garbage")
    code = main(["ingest", str(raw / "annotations.json"), str(raw), "--out", str(tmp_path / "c"), "--size", "16"])
    assert code == EXIT_PARTIAL
    m = Manifest.load(tmp_path / "c" / "manifest.json")
    assert len(m.entries) == 3 and [f["id"] for f in m.failures] == ["img0003"]
    assert "img0003" in capsys.readouterr().err


def test_ingest_three_images_deterministic(tmp_path):
    raw = tmp_path / "raw"
    main(["synth", "--out", str(raw), "--count", "3", "--size", "16"])
    for name in ("a", "b"):
        assert main(["ingest", str(raw / "annotations.json"), str(raw), "--out", str(tmp_path / name),
                     "--size", "16"]) == 0
    a = Manifest.load(tmp_path / "a" / "manifest.json")
    b = Manifest.load(tmp_path / "b" / "manifest.json")
    assert len(a.entries) == 3
    assert [(e["image_sha256"], e["mask_sha256"]) for e in a.entries] == \
           [(e["image_sha256"], e["mask_sha256"]) for e in b.entries]


def test_cache_env_default(tmp_path, monkeypatch):
    raw = tmp_path / "raw"
    main(["synth", "--out", str(raw), "--count", "2", "--size", "16"])
    monkeypatch.setenv("STENOSEG_CACHE", str(tmp_path / "envcache"))
    assert main(["ingest", str(raw / "annotations.json"), str(raw), "--size", "16"]) == 0
    assert (tmp_path / "envcache" / "manifest.json").exists()


# --------------------------------------------------------------------- train
def test_train_writes_fold_artifacts(trained_run):
    tmp, _, _, ckpt = trained_run
    out = tmp / "out"
    assert ckpt.exists() and (out / "fold-0" / "last.ckpt").exists()
    assert (out / "config.txt").read_text() == (out / "fold-0" / "config.txt").read_text()
    assert "model.variant = umamba_bot" in (out / "config.txt").read_text()
    assert (out / "fold-0" / "metrics.csv").read_text().startswith("epoch,fold,loss,precision,recall,f1\n")


def test_five_folds_over_1200_ids(tmp_path):
    _, manifest = ingest_synthetic(tmp_path, n=1200, size=16)
    cfg = write_config(tmp_path / "k.cfg", manifest, **{"train.folds": 5, "optim.steps": 1,
                                                        "optim.batch_size": 1})
    cfg.write_text(cfg.read_text().replace("train.folds = 0\n", ""))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
    folds = sorted(p.name for p in (tmp_path / "out").glob("fold-*"))
    assert folds == [f"fold-{k}" for k in range(5)]
    assert all((tmp_path / "out" / f / "best.ckpt").exists() for f in folds)


# ---------------------------------------------------------------------- eval
def test_eval_is_byte_identical(trained_run):
    tmp, _, manifest, ckpt = trained_run
    for name in ("e1", "e2"):
        assert main(["eval", str(ckpt), "--manifest", str(manifest), "--split", "train",
                     "--out", str(tmp / name)]) == 0
    for f in ("metrics.csv", "per_image.jsonl", "config.txt"):
        assert (tmp / "e1" / f).read_bytes() == (tmp / "e2" / f).read_bytes()
    header = (tmp / "e1" / "metrics.csv").read_text().splitlines()[0]
    assert header == "model,params,precision,recall,f1"


def test_eval_empty_split(trained_run, tmp_path, capsys):
    _, _, _, ckpt = trained_run
    other = tmp_path / "other"
    _, m2 = ingest_synthetic(other, n=2, size=32, seed=9)
    # ids in the checkpoint's split are absent from this manifest once renamed
    doc = json.loads(m2.read_text())
    for e in doc["entries"]:
        e["id"] = "x" + e["id"]
    m2.write_text(json.dumps(doc))
    code = main(["eval", str(ckpt), "--manifest", str(m2), "--split", "val", "--out", str(tmp_path / "e")])
    assert code == EXIT_USAGE
    assert "no samples" in capsys.readouterr().err
    assert not (tmp_path / "e").exists()


def test_eval_rejects_mismatched_checkpoint(trained_run, tmp_path):
    _, _, manifest, ckpt = trained_run
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXXX" + ckpt.read_bytes()[5:])
    assert main(["eval", str(bad), "--manifest", str(manifest), "--out", str(tmp_path / "e")]) == EXIT_USAGE


# ------------------------------------------------------------------- predict
def test_predict_matches_eval_counts(trained_run, tmp_path):
    tmp, raw, manifest, ckpt = trained_run
    main(["eval", str(ckpt), "--manifest", str(manifest), "--split", "all", "--out", str(tmp_path / "ev")])
    per_image = {json.loads(line)["id"]: json.loads(line)
                 for line in (tmp_path / "ev" / "per_image.jsonl").read_text().splitlines()}
    m = Manifest.load(manifest)
    for entry in m.entries:
        out = tmp_path / f"{entry['id']}.png"
        assert main(["predict", str(ckpt), str(raw / f"{entry['id']}.pgm"), "--out", str(out),
                     "--prob", str(tmp_path / "p.tnsr")]) == 0
        pred = np.asarray(Image.open(out))
        assert set(np.unique(pred)) <= {0, 255}
        gt = load_sample(entry, manifest.parent).mask
        c = confusion(pred > 0, gt)
        want = per_image[entry["id"]]
        assert (c.tp, c.fp, c.fn, c.tn) == (want["tp"], want["fp"], want["fn"], want["tn"])


def test_predict_keeps_input_size(trained_run, tmp_path):
    _, _, _, ckpt = trained_run
    src = tmp_path / "odd.png"
    Image.fromarray(np.zeros((45, 70), dtype=np.uint8)).save(src)
    out = tmp_path / "odd_mask.png"
    assert main(["predict", str(ckpt), str(src), "--out", str(out), "--threshold", "1.5"]) == 0
    mask = np.asarray(Image.open(out))
    assert mask.shape == (45, 70)
    assert not mask.any()  # nothing can clear a threshold above 1


# -------------------------------------------------------------------- report
TABLE = [("Swin UNetR", 25_000_000, 0.4912, 0.2829, 0.359), ("LightM-UNet", 5_000_000, 0.4893, 0.3326, 0.396),
         ("Swin-UMamba D", 27_000_000, 0.6869, 0.6378, 0.6614), ("Swin-UMamba", 60_000_000, 0.6887, 0.6488, 0.6682),
         ("U-Mamba ENC", 104_000_000, 0.7113, 0.6618, 0.6857), ("U-Mamba BOT", 500_000_000, 0.6992, 0.6769, 0.6879)]


def write_rows(path, rows):
    path.write_text("model,params,precision,recall,f1\n" + "".join(f"{m},{n},{p},{r},{f}\n" for m, n, p, r, f in rows))
    return path


def circles(svg):
    return re.findall(r'<circle[^>]*r="([0-9.]+)"[^>]*data-model="([^"]+)"', svg)


def test_report_orders_table(tmp_path):
    # split over two files in scrambled order
    a = write_rows(tmp_path / "a.csv", [TABLE[5], TABLE[0], TABLE[3]])
    b = write_rows(tmp_path / "b.csv", [TABLE[2], TABLE[4], TABLE[1]])
    assert main(["report", str(a), str(b), "--out", str(tmp_path / "r")]) == 0
    models = [line.split(",")[0] for line in (tmp_path / "r" / "report.csv").read_text().splitlines()[1:]]
    assert models == [row[0] for row in TABLE]
    svg = (tmp_path / "r" / "chart.svg").read_text()
    assert [m for _, m in circles(svg)] == models
    radii = {m: float(r) for r, m in circles(svg)}
    assert radii["U-Mamba BOT"] / radii["LightM-UNet"] == pytest.approx(10.0, rel=1e-4)


def test_single_row_bubble(tmp_path):
    a = write_rows(tmp_path / "a.csv", [TABLE[1]])
    assert main(["report", str(a), "--out", str(tmp_path / "r")]) == 0
    found = circles((tmp_path / "r" / "chart.svg").read_text())
    assert len(found) == 1 and float(found[0][0]) == bubble_radius(5_000_000, 5_000_000) == 40.0


def test_radius_formula():
    assert bubble_radius(500_000_000, 500_000_000) / bubble_radius(5_000_000, 500_000_000) == pytest.approx(10.0)
    rows = [{"model": "a", "params": 4, "f1": 0.5}, {"model": "b", "params": 1, "f1": None}]
    assert [float(r) for r, _ in circles(bubble_chart(rows))] == [40.0, 20.0]


def test_report_schema_error_names_column(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("model,parameters,precision,recall,f1\nx,1,0.5,0.5,0.5\n")
    assert main(["report", str(bad), "--out", str(tmp_path / "r")]) == EXIT_USAGE
    assert "params" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()
