"""CSV/JSON writers and the figure renderers next to them."""

import json

import numpy as np
import pytest

from fieldmark.reporting import (
    plot_attacks,
    plot_id_matrix,
    plot_sweep,
    plot_training_log,
    read_csv,
    render_report,
    write_csv,
    write_json,
)

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def sweep_rows():
    return [
        {"num_watermarks": 2, "bit_acc": 0.99, "psnr": 31.2, "ssim": 0.95},
        {"num_watermarks": 4, "bit_acc": 0.97, "psnr": 30.8, "ssim": 0.94},
        {"num_watermarks": 8, "bit_acc": 0.93, "psnr": 30.1, "ssim": 0.93},
    ]


def attack_rows():
    return [
        {"attack": "none", "bit_acc": 0.99, "n": 8},
        {"attack": "jpeg50", "bit_acc": 0.91, "n": 8},
        {"attack": "crop50", "bit_acc": 0.88, "n": 8},
    ]


def log_rows():
    rows = []
    for i in range(6):
        row = {"iteration": i, "L_secret": "", "L_percept": "", "L_RGB": 0.5 / (i + 1),
               "L_TV": "", "L_SSIM": "", "bit_acc": "", "psnr": 12.0 + i}
        if i >= 3:
            row.update({"L_secret": 0.4 / i, "bit_acc": 0.6 + 0.05 * i,
                        "L_SSIM": 0.1})
        rows.append(row)
    return rows


def assert_png(path):
    assert path.exists()
    assert path.read_bytes()[:8] == PNG_MAGIC


def test_csv_round_trip(tmp_path):
    path = tmp_path / "out.csv"
    write_csv(path, attack_rows())
    back = read_csv(path)
    assert [r["attack"] for r in back] == ["none", "jpeg50", "crop50"]
    assert back[0]["bit_acc"] == "0.99"  # strings on the way back in
    assert not list(tmp_path.glob("*.tmp"))


def test_csv_rejects_empty_and_honors_field_order(tmp_path):
    with pytest.raises(ValueError, match="empty report"):
        write_csv(tmp_path / "x.csv", [])
    path = tmp_path / "ordered.csv"
    write_csv(path, [{"a": 1, "b": 2}], fieldnames=["b", "a"])
    assert path.read_text().splitlines()[0] == "b,a"


def test_write_json(tmp_path):
    path = tmp_path / "summary.json"
    write_json(path, {"b": 2, "a": [1, 2]})
    text = path.read_text()
    assert json.loads(text) == {"a": [1, 2], "b": 2}
    assert text.index('"a"') < text.index('"b"')  # sorted for stable diffs


def test_plot_sweep_full(tmp_path):
    paths = plot_sweep(sweep_rows(), tmp_path)
    assert [p.name for p in paths] == ["sweep_accuracy.png", "sweep_quality.png"]
    for p in paths:
        assert_png(p)


def test_plot_sweep_without_quality(tmp_path):
    rows = [{k: v for k, v in r.items() if k != "psnr"} for r in sweep_rows()]
    paths = plot_sweep(rows, tmp_path)
    assert [p.name for p in paths] == ["sweep_accuracy.png"]


def test_plot_attacks(tmp_path):
    (path,) = plot_attacks(attack_rows(), tmp_path)
    assert path.name == "attack_accuracy.png"
    assert_png(path)


def test_plot_training_log_handles_sparse_columns(tmp_path):
    (path,) = plot_training_log(log_rows(), tmp_path)
    assert path.name == "training_curves.png"
    assert_png(path)


def test_plot_id_matrix(tmp_path):
    (path,) = plot_id_matrix(np.array([[0.99, 0.55], [0.52, 0.98]]), tmp_path)
    assert path.name == "id_matrix.png"
    assert_png(path)


def test_render_report_dispatch(tmp_path):
    sweep_csv = tmp_path / "sweep.csv"
    write_csv(sweep_csv, sweep_rows())
    names = {p.name for p in render_report(sweep_csv, tmp_path / "s")}
    assert names == {"sweep_accuracy.png", "sweep_quality.png"}

    attack_csv = tmp_path / "attacks.csv"
    write_csv(attack_csv, attack_rows())
    names = {p.name for p in render_report(attack_csv, tmp_path / "a")}
    assert names == {"attack_accuracy.png"}

    log_csv = tmp_path / "training_log.csv"
    write_csv(log_csv, log_rows())
    names = {p.name for p in render_report(log_csv, tmp_path / "l")}
    assert names == {"training_curves.png"}


def test_render_report_rejects_foreign_csv(tmp_path):
    path = tmp_path / "odd.csv"
    write_csv(path, [{"foo": 1, "bar": 2}])
    with pytest.raises(ValueError, match="does not look like"):
        render_report(path, tmp_path / "out")
    empty = tmp_path / "empty.csv"
    empty.write_text("attack,bit_acc\n")
    with pytest.raises(ValueError, match="no data rows"):
        render_report(empty, tmp_path / "out")
