import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra import numpy as hnp

from ptsam import traineng as te
from ptsam.datagen import DatasetSplit, GenSpec, generate, split
from ptsam.evalrep import (
    ABLATION_HEADER,
    CellResult,
    MatrixConfig,
    ablation_sweep,
    cell_stats,
    confusion_counts,
    derived_views,
    dice_score,
    error_map,
    evaluate,
    predict_mask,
    render_table,
    run_matrix,
    sweep_adapter,
    write_triptych,
)
from ptsam.evalrep.metrics import FN, FP, TN, TP
from ptsam.numcore import DimensionError
from ptsam.peft import AdapterConfig, Mode
from ptsam.samarch import build_model, checkpoint, forward_segment, preset
from ptsam.datagen import read_pgm

# ---------------------------------------------------------------- Dice and error maps


def test_dice_examples():
    a = np.array([[1, 1], [0, 0]])
    assert dice_score(a, a) == 1.0
    assert dice_score(a, 1 - a) == 0.0
    assert dice_score(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    assert dice_score(np.array([[1, 1, 0, 0]]), np.array([[1, 0, 0, 0]])) == pytest.approx(2 / 3)
    with pytest.raises(DimensionError):
        dice_score(np.zeros((2, 2)), np.zeros((2, 3)))


def test_dice_matches_pixel_counting_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = rng.uniform(size=(16, 16)) < rng.uniform()
        g = rng.uniform(size=(16, 16)) < rng.uniform()
        tp = sum(1 for i in range(16) for j in range(16) if p[i, j] and g[i, j])
        total = sum(int(x) for x in p.flat) + sum(int(x) for x in g.flat)
        expect = 1.0 if total == 0 else 2 * tp / total
        assert dice_score(p, g) == pytest.approx(expect, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(bool, (6, 7)), hnp.arrays(bool, (6, 7)))
def test_error_map_identities(p, g):
    emap = error_map(p, g)
    c = confusion_counts(emap)
    assert sum(c.values()) == p.size
    assert c["TP"] + c["FP"] == p.sum() and c["TP"] + c["FN"] == g.sum()
    denom = 2 * c["TP"] + c["FP"] + c["FN"]
    assert dice_score(p, g) == pytest.approx(1.0 if denom == 0 else 2 * c["TP"] / denom)
    assert 0.0 <= dice_score(p, g) <= 1.0
    assert dice_score(p, g) == dice_score(g, p)


def test_error_map_codes():
    emap = error_map(np.array([[0, 1, 1, 0]]), np.array([[0, 1, 0, 1]]))
    assert emap.tolist() == [[TN, TP, FP, FN]]


def test_triptych_layout(tmp_path):
    img = np.linspace(0, 1, 16, dtype=np.float32).reshape(1, 4, 4)
    gt = np.eye(4, dtype=np.uint8)
    write_triptych(tmp_path / "t.pgm", img, gt, np.zeros((4, 4), np.uint8))
    arr = read_pgm(tmp_path / "t.pgm")
    assert arr.shape == (4, 4 * 3 + 4)
    np.testing.assert_array_equal(arr[:, 6:10], gt * 255)
    assert set(np.unique(arr[:, 12:])) == {0, 85}


def test_predict_mask_threshold_matches_sigmoid():
    m = build_model(preset("desk"), seed=0)
    img = np.random.default_rng(1).uniform(size=(1, 64, 64)).astype(np.float32)
    z = forward_segment(m, img).data.astype(np.float64)
    for t in (0.3, 0.5, 0.8):
        np.testing.assert_array_equal(predict_mask(m, img, t), (1 / (1 + np.exp(-z)) > t).astype(np.uint8))


def test_evaluate_reports_per_image_scores(base_model):
    samples = generate(GenSpec(count=3), seed=0)
    res = evaluate(base_model(), samples)
    assert res.ids == [s.id for s in samples] and len(res.per_image) == 3
    assert res.mean == pytest.approx(np.mean(res.per_image))


# ---------------------------------------------------------------- experiment matrix

TINY_TRAIN = te.TrainConfig(epochs=1, steps_per_epoch=2, augment=False)
TINY_CORPUS = GenSpec(count=25, shift=("haze",))


def _cfg(base_ckpt, methods=("PT_MD",), sizes=(4,), seeds=(0,)):
    return MatrixConfig(methods=[AdapterConfig(mode=m) for m in methods], train_sizes=sizes, seeds=seeds,
                        corpus=TINY_CORPUS, train=TINY_TRAIN, base_checkpoint=base_ckpt)


def _rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def test_one_cell_matrix_outputs(tmp_path, base_ckpt):
    res = run_matrix(_cfg(base_ckpt), tmp_path)
    assert len(res) == 1 and res[0].error is None
    rows = _rows(tmp_path / "summary.csv")
    assert rows == [{"dataset": "synthetic", "shift": "haze", "method": "PT_MD", "train_n": "4", "seed": "0",
                     "dice": f"{res[0].dice:.6f}"}]
    table = (tmp_path / "table.txt").read_text()
    assert "PT_MD" in table and "n=4" in table
    assert (tmp_path / "derived.csv").read_text().startswith("view,label,train_n,value")


def test_cell_equals_independent_train_and_eval(tmp_path, base_ckpt):
    res = run_matrix(_cfg(base_ckpt, seeds=(1,)), tmp_path)[0]
    corpus = generate(TINY_CORPUS, seed=0)
    data = split(corpus, 4, seed=1)
    m = build_model(preset("desk"), seed=0)
    checkpoint.load(m.reg, base_ckpt)
    cfg = te.TrainConfig(epochs=1, steps_per_epoch=2, augment=False, seed=1)
    from ptsam.peft import apply_adapter

    apply_adapter(m, AdapterConfig(mode="PT_MD"), seed=1)
    te.train(m, AdapterConfig(mode="PT_MD"), DatasetSplit(data.train, [], 0), cfg, eval_final=False)
    assert res.dice == evaluate(m, data.test).mean


def test_ie_gain_view_present(tmp_path, base_ckpt):
    run_matrix(_cfg(base_ckpt, methods=("PT_MD", "PT_MD_IE")), tmp_path)
    rows = _rows(tmp_path / "derived.csv")
    assert [(r["view"], r["label"], r["train_n"]) for r in rows] == [("ie_gain", "PT_MD_IE-PT_MD", "4")]
    assert "IE tuning gain" in (tmp_path / "table.txt").read_text()


def test_matrix_resume_reuses_cells(tmp_path, base_ckpt, monkeypatch):
    cfg = _cfg(base_ckpt, seeds=(0, 1))
    first = run_matrix(cfg, tmp_path)
    summary = (tmp_path / "summary.csv").read_bytes()

    from ptsam.evalrep import experiments

    def boom(job):
        raise AssertionError("cell recomputed")

    monkeypatch.setattr(experiments, "run_cell", boom)
    again = run_matrix(cfg, tmp_path)
    assert [r.dice for r in again] == [r.dice for r in first]
    assert (tmp_path / "summary.csv").read_bytes() == summary


def test_failed_cell_is_reported_not_raised(tmp_path, base_ckpt, monkeypatch):
    from ptsam.evalrep import experiments

    def broken(*a, **k):
        raise te.TrainingAbort("loss is nan", 3, 0.01, [0.5])

    monkeypatch.setattr(experiments.te, "train", broken)
    res = run_matrix(_cfg(base_ckpt), tmp_path)
    assert res[0].dice is None and "TrainingAbort" in res[0].error
    assert "failed" in (tmp_path / "table.txt").read_text()
    assert _rows(tmp_path / "summary.csv")[0]["dice"] == "nan"


def test_stats_and_views_from_synthetic_cells():
    cells = [CellResult("PT_MD", n, s, d) for n, s, d in [(16, 0, 0.5), (16, 1, 0.7), (64, 0, 0.9)]]
    cells += [CellResult("PT_MD_IE", 16, 0, 0.8), CellResult("PT_MD_IE", 16, 1, None, error="x")]
    stats = cell_stats(cells)
    assert stats[("PT_MD", 16)] == pytest.approx((0.6, 0.1, 2))
    assert stats[("PT_MD_IE", 16)] == pytest.approx((0.8, 0.0, 1))
    views = derived_views(cells)
    assert ("ie_gain", "PT_MD_IE-PT_MD", 16, pytest.approx(0.2)) in views
    assert ("degradation_64_to_16", "PT_MD", 16, pytest.approx(0.3)) in views
    table = render_table(cells, "synthetic", "haze")
    assert "60.0 +- 10.0" in table and "+20.0" in table


def test_cell_result_json_roundtrip():
    c = CellResult("LORA_MD", 32, 2, 0.812, [0.8, 0.824], None, 1.5, "LORA_MD")
    assert CellResult.from_json(c.to_json()) == c


# ---------------------------------------------------------------- ablation


def test_sweep_adapters():
    assert sweep_adapter("n_md", 0) == AdapterConfig(mode=Mode.PT_MD, n_md=0)
    assert sweep_adapter("n_ie", 0) == AdapterConfig(mode=Mode.PT_MD, n_md=8)
    assert sweep_adapter("n_ie", 4) == AdapterConfig(mode=Mode.PT_MD_IE, n_md=8, n_ie=4)
    with pytest.raises(ValueError):
        sweep_adapter("rank", 2)


def test_ablation_schema_and_determinism(tmp_path, base_ckpt):
    kw = dict(values=(0, 2), seeds=(0,), train_n=4, corpus=TINY_CORPUS, train=TINY_TRAIN, base_checkpoint=base_ckpt)
    text = ablation_sweep("n_md", tmp_path / "a", **kw)
    again = ablation_sweep("n_md", tmp_path / "b", **kw)
    assert text == again == (tmp_path / "a" / "ablation_n_md.csv").read_text()
    rows = list(csv.reader(io.StringIO(text)))
    assert tuple(rows[0]) == ABLATION_HEADER
    assert [(r[0], r[2], r[3]) for r in rows[1:]] == [("seed", "0", "0"), ("aggregate", "0", "all"),
                                                     ("seed", "2", "0"), ("aggregate", "2", "all")]
    # n_md = 0 has nothing to train: the base model's own score
    assert rows[1][4] == rows[2][4]
