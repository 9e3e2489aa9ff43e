"""Acceptance suite: one test per criterion, each printing a verdict line.

Run with ``pytest tests/test_acceptance.py -v -s`` (or just ``-v``; lines are
printed with capture disabled). Criterion 10 is a directional check: an
inverted result prints FLAG and does not fail the test.
"""

import math
import time

import numpy as np
import pytest

from ptsam import numcore as nc
from ptsam import traineng as te
from ptsam.cli import main
from ptsam.datagen import DatasetSplit, GenSpec, generate, split
from ptsam.evalrep import MatrixConfig, dice_score, run_matrix
from ptsam.numcore import Tensor, gradcheck
from ptsam.peft import AdapterConfig, apply_adapter, trainable_names
from ptsam.samarch import build_model, encoder_block, forward_segment, preset

from opcases import OP_CASES, build_case

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    def emit(n: int, verdict: str, detail: str):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2} {verdict}: {detail}")

    return emit


def _verdict(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


def test_01_parameter_counts(report, capsys):
    t0 = time.perf_counter()
    assert main(["count", "--preset", "vitb-shape"]) == 0
    out = capsys.readouterr().out
    got = {ln.split()[0]: int(ln.split()[-1]) for ln in out.splitlines()[1:]}
    want = {"PT_MD": 2048, "PT_MD_IE": 75776, "LORA_MD": 23552, "LORA_MD_IE": 171008}
    dt = time.perf_counter() - t0
    ok = all(got[k] == v for k, v in want.items()) and dt < 10
    extra = f"FULL_MD {got['FULL_MD']}, FULL_MD_LORA_IE {got['FULL_MD_LORA_IE']} (reported only)"
    report(1, _verdict(ok), f"{ {k: got[k] for k in want} } in {dt:.1f}s; {extra}")
    assert ok


def test_02_freezing_bit_exact(report, base_model):
    data = DatasetSplit(generate(GenSpec(count=4, shift=("haze",)), seed=0), [], 0)
    cfg = te.TrainConfig(epochs=5, steps_per_epoch=20)  # 100 steps
    t0 = time.perf_counter()
    bad = []
    for mode in ("PT_MD", "PT_MD_IE", "LORA_MD", "LORA_MD_IE"):
        m = base_model()
        adapter = AdapterConfig(mode=mode)
        apply_adapter(m, adapter, seed=cfg.seed)
        before = {n: m.reg[n].data.copy() for n in m.reg.names()}
        te.train(m, adapter, data, cfg, eval_final=False)
        trainable = set(trainable_names(m))
        for n, arr in before.items():
            same = m.reg[n].data.tobytes() == arr.tobytes()
            if (n in trainable) == same:
                bad.append(f"{mode}:{n}")
    dt = time.perf_counter() - t0
    ok = not bad and dt < 300
    report(2, _verdict(ok), f"4 modes x 100 steps in {dt:.0f}s; violations {bad[:5]}")
    assert ok


def test_03_gradient_correctness(report):
    t0 = time.perf_counter()
    worst, failures = 0.0, []
    for name in sorted(OP_CASES):
        for k in range(3):
            f, xs = build_case(name, k)
            rep = gradcheck(f, xs, h=1e-3, tol=1e-4)
            worst = max(worst, rep.max_rel_error)
            if not rep.passed:
                failures.append(f"{name}[{k}]")

    cfg = preset("desk", image_size=32, enc_layers=2, global_block_indices=(1,))
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(1, 32, 32))
    target = (rng.uniform(size=(32, 32)) > 0.6).astype(np.float64)
    with nc.dtype_scope(np.float64):
        m = build_model(cfg, seed=0)
        for e in m.reg:
            e.tensor.data = e.tensor.data.astype(np.float64)
        apply_adapter(m, AdapterConfig(mode="PT_MD_IE", n_md=4, n_ie=4), seed=0)
        for e in m.reg:
            e.tensor.data = e.tensor.data.astype(np.float64)
    names = ["adapter.p_md", "adapter.p_ie.0", "adapter.p_ie.1"]

    def loss(*prompts):
        saved = [m.reg[n] for n in names]
        try:
            for n, p in zip(names, prompts):
                m.reg.entry(n).tensor = p
            return te.combined_loss(forward_segment(m, img), target, te.TrainConfig())
        finally:
            for n, t in zip(names, saved):
                m.reg.entry(n).tensor = t

    rep = gradcheck(loss, [m.reg[n] for n in names], h=1e-3, tol=1e-4)
    dt = time.perf_counter() - t0
    ok = not failures and rep.passed and dt < 600
    report(3, _verdict(ok), f"{len(OP_CASES)} ops x 3 shapes, worst rel {worst:.2e}; "
                            f"end-to-end p_md/p_ie rel {rep.max_rel_error:.2e} per input "
                            f"{[f'{e:.1e}' for e in rep.per_input]}; {dt:.0f}s; failed {failures}")
    assert ok


def test_04_lora_zero_init_identity(report):
    img = np.random.default_rng(3).uniform(size=(1, 64, 64)).astype(np.float32)
    ref = forward_segment(build_model(preset("desk"), seed=0), img).data.tobytes()
    same = {}
    for mode in ("LORA_MD", "LORA_MD_IE", "FULL_MD_LORA_IE"):
        m = apply_adapter(build_model(preset("desk"), seed=0), AdapterConfig(mode=mode), seed=7)
        same[mode] = forward_segment(m, img).data.tobytes() == ref
    ok = all(same.values())
    report(4, _verdict(ok), f"bitwise equal: {same}")
    assert ok


def test_05_window_global_equivalence(report):
    cfg = preset("desk", window_size=8)
    m = build_model(cfg, seed=0)
    x = Tensor(np.random.default_rng(0).standard_normal((8, 8, cfg.enc_dim)).astype(np.float32))
    err = max(
        float(np.abs(encoder_block(cfg, m.reg, i, x, force_global=False).data
                     - encoder_block(cfg, m.reg, i, x, force_global=True).data).max())
        for i in range(cfg.enc_layers)
    )
    ok = err <= 1e-5
    report(5, _verdict(ok), f"max abs difference {err:.2e} over {cfg.enc_layers} blocks")
    assert ok


@pytest.mark.slow
def test_06_overfit(report, base_model):
    data = DatasetSplit(generate(GenSpec(count=4, shift=("haze",)), seed=0), [], 0)
    cfg = te.TrainConfig(epochs=25, steps_per_epoch=20, lr0=0.01, augment=False)
    scores, times = {}, {}
    for mode in ("PT_MD_IE", "PT_MD"):
        t0 = time.perf_counter()
        rec = te.train(base_model(), AdapterConfig(mode=mode), data, cfg)
        scores[mode], times[mode] = rec.final_train_dice, time.perf_counter() - t0
    ok = scores["PT_MD_IE"] >= 0.95 and scores["PT_MD"] >= 0.85 and max(times.values()) < 900
    report(6, _verdict(ok), f"train Dice PT_MD_IE {scores['PT_MD_IE']:.4f} (>= 0.95), "
                            f"PT_MD {scores['PT_MD']:.4f} (>= 0.85); 500 steps each, "
                            f"{times['PT_MD_IE']:.0f}s / {times['PT_MD']:.0f}s")
    assert ok


def test_07_cosine_schedule(report, base_model):
    cfg = te.TrainConfig(epochs=4, steps_per_epoch=5, lr0=0.05, augment=False)
    rec = te.train(base_model(), AdapterConfig(mode="PT_MD"), DatasetSplit(generate(GenSpec(count=2), 0), [], 0),
                   cfg, eval_final=False)
    trace, total = rec.lr_trace(), cfg.total_steps
    points = [0, total // 4, total // 2, total]
    got = {t: trace[t] for t in points}
    want = {t: 0.05 * 0.5 * (1 + math.cos(math.pi * t / total)) for t in points}
    ok = all(math.isclose(got[t], want[t], rel_tol=1e-12, abs_tol=1e-15) for t in points) and all(
        math.isclose(lr, 0.05 * 0.5 * (1 + math.cos(math.pi * t / total)), rel_tol=1e-12, abs_tol=1e-15)
        for t, lr in trace.items())
    report(7, _verdict(ok), f"logged {got} vs closed form {want}")
    assert ok


def test_08_dice_oracle(report):
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(200):
        p = rng.uniform(size=(16, 16)) < rng.uniform()
        g = rng.uniform(size=(16, 16)) < rng.uniform()
        inter = np.sum(p & g, dtype=np.int64)
        total = np.sum(p, dtype=np.int64) + np.sum(g, dtype=np.int64)
        oracle = 1.0 if total == 0 else 2 * int(inter) / int(total)
        mismatches += dice_score(p, g) != oracle
    ok = mismatches == 0
    report(8, _verdict(ok), f"{200 - mismatches}/200 pairs exactly equal to integer counting")
    assert ok


def test_09_train_determinism(report, tmp_path, base_ckpt):
    cfg = tmp_path / "run.ini"
    cfg.write_text(f"[model]\nbase = {base_ckpt}\n[adapter]\nmode = PT_MD_IE\n[train]\nepochs = 3\nsteps_per_epoch = 5\n"
                   "seed = 4\n[data]\ncount = 20\nshift = haze\ntrain_n = 8\n")
    for d in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / d)]) == 0
    files = ["metrics.jsonl", "adapter.manifest", "adapter.nt1", "config.ini", "split.txt"]
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files}
    ok = all(same.values())
    report(9, _verdict(ok), f"byte-identical: {same}")
    assert ok


@pytest.mark.slow
def test_10_ie_tuning_trend(report, tmp_path, base_ckpt):
    cfg = MatrixConfig(
        methods=[AdapterConfig(mode="PT_MD"), AdapterConfig(mode="PT_MD_IE")],
        train_sizes=(16,),
        seeds=(0, 1, 2),
        corpus=GenSpec(shift=("haze",)),
        train=te.TrainConfig(epochs=100),
        base_checkpoint=base_ckpt,
    )
    t0 = time.perf_counter()
    results = run_matrix(cfg, tmp_path)
    dt = time.perf_counter() - t0
    assert all(r.error is None for r in results), [r.error for r in results]
    by = {m: [r.dice for r in results if r.method == m] for m in ("PT_MD", "PT_MD_IE")}
    mean = {m: float(np.mean(v)) for m, v in by.items()}
    seeds = "; ".join(f"{m} seeds {[round(v, 4) for v in vals]}" for m, vals in by.items())
    verdict = "PASS" if mean["PT_MD_IE"] > mean["PT_MD"] else "FLAG"
    report(10, verdict, f"mean test Dice PT_MD_IE {mean['PT_MD_IE']:.4f} vs PT_MD {mean['PT_MD']:.4f} "
                        f"(n=16, 100x20 steps, {dt:.0f}s); {seeds}")
    assert dt < 7200


def test_11_fixed_test_split(report):
    corpus = generate(GenSpec(count=100, size=16), seed=0)
    ids = {n: split(corpus, n, seed=0).test_ids() for n in (16, 32, 64)}
    ok = ids[16] == ids[32] == ids[64] and len(ids[16]) == 20
    report(11, _verdict(ok), f"test ids identical across 16/32/64: {ok} ({len(ids[16])} ids)")
    assert ok
