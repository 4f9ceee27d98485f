"""Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned below."""

import csv
import math
import time

import numpy as np
import pytest

from oracles import brute_force_report, fifty_query_fixture

from ngcg.cli import ABLATION_AXES, ABLATION_COLUMNS, main, run_ablation
from ngcg.config import ExperimentConfig
from ngcg.datagen import generate
from ngcg.geoeval import (EARTH_RADIUS_M, GeoPoint, chance_interval, evaluate, haversine,
                          top1_exact_fraction)
from ngcg.gradsuite import run_suite
from ngcg.lora import LoRAAdapter, adapted_forward, merge
from ngcg.model import Model
from ngcg.retrieval import build_index, query_many
from ngcg.trainer import evaluate_model, load_corpus, train

GRAD_SEEDS = 5
GRAD_BUDGET_S = 60.0
MERGE_TOL = 1e-10
MERGE_INPUTS = 100
HAVERSINE_TOL_M = 0.01
RETRIEVAL_QUERIES = 200
CHANCE_CANDIDATES = 100
CHANCE_QUERIES = 1000
CHANCE_LEVEL = 0.95
TARGET_R1 = 0.90
TARGET_EPOCHS = 30
TRAIN_BUDGET_S = 300.0
ABLATION_ROWS = {"tau": 6, "alpha": 4, "pooling": 3}

# every report produced while checking the other criteria, for criterion 8
REPORTS = []


@pytest.fixture
def verdict(request):
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        else:
            print(line)
        assert ok, line

    return emit


@pytest.fixture(scope="module")
def default_run():
    cfg = ExperimentConfig()
    assert (cfg.lora.rank, cfg.lora.alpha, cfg.loss.temperature, cfg.pooling.strategy) == \
        (16, 128.0, 0.03, "eos")
    assert cfg.data.scenes == 1024 and cfg.train.epochs == TARGET_EPOCHS
    start = time.perf_counter()
    corpus = load_corpus(cfg)
    model, log = train(corpus, cfg)
    report = evaluate_model(model, corpus, "test", cfg.config_hash())
    seconds = time.perf_counter() - start
    REPORTS.append(report)
    return cfg, corpus, model, log, report, seconds


def test_criterion_1_gradient_suite(verdict):
    result = run_suite(seeds=range(GRAD_SEEDS))
    ops = sum(line.startswith("op ") for line in result.lines)
    composite = sum(line.startswith("infonce[") for line in result.lines)
    failures = [line for line in result.lines if "FAIL" in line or "NONZERO" in line]
    ok = result.passed and not failures and result.seconds < GRAD_BUDGET_S and composite > 0
    verdict(1, ok, f"{ops} operator checks and {composite} composite checks over {GRAD_SEEDS} "
                   f"seeds, {len(failures)} failures, {result.seconds:.1f}s "
                   f"(budget {GRAD_BUDGET_S:.0f}s)")


def test_criterion_2_lora_exactness(verdict, default_run):
    cfg, corpus, model, log, _, _ = default_run
    # (a) B = 0 at step 0: adapted and base embeddings bit-equal
    fresh = Model.init(cfg)
    base = Model.init(cfg)
    base.adapters = None
    texts, grids = corpus.texts[:64], corpus.grids[:64]
    step0 = (np.array_equal(fresh.embed_texts(texts), base.embed_texts(texts))
             and np.array_equal(fresh.embed_images(grids), base.embed_images(grids)))

    # (b) merged dense forward against the adapted forward
    rng = np.random.default_rng(0)
    worst = 0.0
    for target in fresh.params.trunk_targets():
        w0 = fresh.params.tensors[target]
        a = fresh.adapters[target]
        live = LoRAAdapter(a.A, rng.normal(0.0, 0.1, a.B.shape), a.alpha, a.rank, target)
        x = rng.uniform(-1, 1, (MERGE_INPUTS, w0.shape[0]))
        worst = max(worst, float(np.abs(adapted_forward(w0, live, x) - x @ merge(w0, live)).max()))
    merged = worst < MERGE_TOL

    # (c) base tensors after the full default lora run
    init = Model.init(cfg).params.tensors
    frozen = log.frozen_base_ok and all(np.array_equal(init[k], model.params.tensors[k])
                                        for k in init)
    verdict(2, step0 and merged and frozen,
            f"(a) step-0 bit-equal={step0}; (b) merge max|diff|={worst:.2e} over "
            f"{MERGE_INPUTS} inputs x {len(fresh.params.trunk_targets())} sites "
            f"(tol {MERGE_TOL:g}); (c) base bit-identical after {TARGET_EPOCHS} epochs={frozen}")


def test_criterion_3_metric_oracles(verdict):
    mismatches = 0
    for seed in range(20):
        ranked, truths, truth_geo, geo = fifty_query_fixture(seed)
        for conjunctive in (False, True):
            rep = evaluate(ranked, truths, truth_geo, geo, conjunctive=conjunctive)
            REPORTS.append(rep)
            if not conjunctive:
                mismatches += rep.row() != brute_force_report(ranked, truths, truth_geo, geo)
    # arc-length and half-circumference oracles
    cases = [
        (GeoPoint(0.0, 0.0), GeoPoint(0.001, 0.0), EARTH_RADIUS_M * math.radians(0.001),
         HAVERSINE_TOL_M),
        (GeoPoint(0.0, 0.0), GeoPoint(0.0, 0.0), 0.0, HAVERSINE_TOL_M),
        (GeoPoint(0.0, 0.0), GeoPoint(0.0, 180.0), math.pi * EARTH_RADIUS_M, 1.0),
    ]
    errors = [abs(haversine(a, b) - want) for a, b, want, _ in cases]
    hav_ok = all(e < tol for e, (_, _, _, tol) in zip(errors, cases))
    verdict(3, mismatches == 0 and hav_ok,
            f"20 fifty-query fixtures, {mismatches} mismatches vs brute force; haversine errors "
            f"{', '.join(f'{e:.2e} m' for e in errors)}")


def test_criterion_4_retrieval_equivalence(verdict):
    rng = np.random.default_rng(4)
    n, d = 500, 64
    cands = rng.normal(size=(n, d))
    cands /= np.linalg.norm(cands, axis=1, keepdims=True)
    ids = [f"s{i:04d}" for i in range(n)]
    index = build_index([(i, v, GeoPoint(0.0, 0.0)) for i, v in zip(ids, cands)])
    queries = rng.normal(size=(RETRIEVAL_QUERIES, d))
    queries /= np.linalg.norm(queries, axis=1, keepdims=True)
    diffs = 0
    for q, res in zip(queries, query_many(index, queries, n)):
        d2 = ((cands - q) ** 2).sum(axis=1)
        oracle = [ids[j] for j in np.lexsort((np.arange(n), d2))]
        diffs += res.ids != oracle
    verdict(4, diffs == 0, f"{RETRIEVAL_QUERIES} queries over {n} candidates, full rankings, "
                           f"{diffs} differ from brute-force L2")


def test_criterion_5_chance_level(verdict):
    cfg = ExperimentConfig()
    model = Model.init(cfg)
    corpus = generate(CHANCE_QUERIES, seed=cfg.data.seed)
    hits = 0
    groups = CHANCE_QUERIES // CHANCE_CANDIDATES
    for g in range(groups):
        part = corpus.subset(range(g * CHANCE_CANDIDATES, (g + 1) * CHANCE_CANDIDATES))
        q = model.embed_texts(part.texts)
        index = build_index(list(zip(part.ids, model.embed_images(part.grids), part.geos)))
        order, _ = index.rank(q, 10)
        ranked = [[index.ids[j] for j in row] for row in order]
        rep = evaluate(ranked, part.ids, part.geos, index.geo)
        REPORTS.append(rep)
        hits += round(top1_exact_fraction(ranked, part.ids) * CHANCE_CANDIDATES)
    r1 = hits / CHANCE_QUERIES
    lo, hi = chance_interval(CHANCE_QUERIES, CHANCE_CANDIDATES, CHANCE_LEVEL)
    verdict(5, lo <= r1 <= hi, f"untrained R@1={r1:.4f} on {CHANCE_QUERIES} queries x "
                               f"{CHANCE_CANDIDATES} candidates; {CHANCE_LEVEL:.0%} binomial "
                               f"interval [{lo:.3f}, {hi:.3f}]")


def test_criterion_6_end_to_end(verdict, default_run):
    cfg, corpus, _, log, report, seconds = default_run
    part = corpus.split("test")
    r1 = report.recall[1]
    coupling = cfg.data.spacing_m > 150 and report.localization[50.0] == r1
    ok = r1 >= TARGET_R1 and seconds < TRAIN_BUDGET_S and coupling and \
        len(log.epochs) == TARGET_EPOCHS
    curve = ", ".join(f"{v:.2f}" for v in log.heldout_r1[4::5])
    verdict(6, ok, f"held-out R@1={r1:.4f} (target {TARGET_R1}) on {len(part)} pairs after "
                   f"{TARGET_EPOCHS} epochs in {seconds:.0f}s (budget {TRAIN_BUDGET_S:.0f}s); "
                   f"L@50={report.localization[50.0]:.4f} equals R@1={coupling}; "
                   f"R@1 every 5 epochs: {curve}")


SMALL = {
    "data.scenes": 96,
    "model.d_model": 16, "model.n_layers": 1, "model.n_heads": 2,
    "train.epochs": 2, "train.batch_size": 16,
}


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_criterion_7_ablation_harness(verdict, default_run, tmp_path):
    import json

    cfg_path = tmp_path / "small.json"
    small = ExperimentConfig().replace(**SMALL)
    cfg_path.write_text(json.dumps(small.to_dict()))
    counts, same, values_ok = {}, True, True
    for axis, expected in ABLATION_ROWS.items():
        runs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{axis}-{rep}.csv"
            assert main(["ablate", "--axis", axis, "--config", str(cfg_path),
                         "--out-csv", str(out)]) == 0
            runs.append(out.read_bytes())
        rows = read_csv(tmp_path / f"{axis}-a.csv")
        counts[axis] = len(rows)
        same &= runs[0] == runs[1]
        values_ok &= [r["axis_value"] for r in rows] == ABLATION_AXES[axis]
        values_ok &= list(rows[0]) == ABLATION_COLUMNS
    gating = all(counts[a] == n for a, n in ABLATION_ROWS.items()) and same and values_ok

    # directional trends at the default scale, reported only
    cfg, corpus, _, _, default_report, _ = default_run
    eos = default_report.recall[1]
    trends = {}
    for label, override in (("average", {"pooling.strategy": "average"}),
                            ("alpha16", {"lora.alpha": 16.0})):
        variant = cfg.replace(**override)
        model, _ = train(corpus, variant, eval_every_epoch=False)
        rep = evaluate_model(model, corpus, "test", variant.config_hash())
        REPORTS.append(rep)
        trends[label] = rep.recall[1]
    trend_line = (f"trends (non-gating): eos R@1 {eos:.3f} vs average {trends['average']:.3f} "
                  f"[{'holds' if eos >= trends['average'] else 'reversed'}]; alpha 128 R@1 "
                  f"{eos:.3f} vs alpha 16 {trends['alpha16']:.3f} "
                  f"[{'holds' if eos >= trends['alpha16'] else 'reversed'}]")
    verdict(7, gating, f"rows {counts}, byte-identical reruns={same}, settings match={values_ok}; "
                       + trend_line)


def test_criterion_8_monotonicity(verdict):
    # plus a sweep of random rankings and the ablation rows of a small run
    rng = np.random.default_rng(8)
    for seed in range(50):
        ranked, truths, truth_geo, geo = fifty_query_fixture(int(rng.integers(1 << 30)))
        REPORTS.append(evaluate(ranked, truths, truth_geo, geo))
    rows = run_ablation("pooling", ExperimentConfig().replace(**SMALL))
    bad_rows = sum(not (r["R@1"] <= r["R@5"] <= r["R@10"] and r["L@50"] <= r["L@100"] <= r["L@150"])
                   for r in rows)
    bad = sum(not rep.is_monotone() for rep in REPORTS)
    verdict(8, bad == 0 and bad_rows == 0,
            f"{len(REPORTS)} reports and {len(rows)} ablation rows checked, "
            f"{bad + bad_rows} violate R@1<=R@5<=R@10 or L@50<=L@100<=L@150")
