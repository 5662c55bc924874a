"""Acceptance suite.

Runs the full benchmark grid once per session (13 head variants x 3 seeds on
lt60, 30 epochs) and checks the nine exit criteria, printing one pass/fail
line per criterion. Run with ``pytest tests/test_acceptance.py -v -s``.
"""

import copy
import zlib

import numpy as np
import pytest

from tailreg.dataset import generate, partition_by_frequency, preset_config, serialize_dataset
from tailreg.evaluation import (EvalConfig, average_precision, detections_bytes, report,
                                run_inference)
from tailreg.experiments import ExperimentSpec, run_experiment
from tailreg.geometry import decode_delta, encode_delta, nms
from tailreg.heads import effective_weight, load_bank
from tailreg.training import TrainConfig, grad_head, mean_regression_loss, train

from conftest import random_box
from test_evaluation import make_gt, reference_ap
from test_geometry import reference_nms
from test_training import (ALL_VARIANTS, bank_for_variant, finite_difference_grads,
                           random_batch, relative_error)

SEEDS = (1, 2, 3)
EPOCHS = 30

SWEEP_VARIANTS = (
    "specific", "agnostic",
    "cab:0", "cab:0.5", "cab:1",
    "cluster:5:num", "cluster:5:scale", "cluster:10:num", "cluster:10:scale",
    "merge:r", "merge:c", "merge:rc", "merge:rcf",
)

CLEAN_VARIANTS = ("specific", "agnostic", "cab:0.5", "cluster:5:num", "merge:rc")


def criterion(number: int, ok: bool, detail: str) -> None:
    print(f"[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {number}: {detail}"


@pytest.fixture(scope="session")
def lt60_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("lt60-acceptance")
    spec = ExperimentSpec(preset="lt60", seeds=SEEDS, variants=SWEEP_VARIANTS,
                          train=TrainConfig(epochs=EPOCHS), eval=EvalConfig(),
                          out_dir=out)
    return run_experiment(spec)


@pytest.fixture(scope="session")
def clean_runs():
    data = generate(preset_config("lt60-clean", seed=1))
    partition = partition_by_frequency(data)
    batch = [(i.class_id, i.feature, i.target_delta) for i in data.train]
    out = {}
    for token in CLEAN_VARIANTS:
        bank, ledger = train(data, token, TrainConfig(epochs=EPOCHS, seed=1))
        final_loss = mean_regression_loss(bank, batch)
        rep = report(bank, data, EvalConfig(), partition, ledger=ledger)
        out[token] = (final_loss, rep.ap)
    return out


def mean_bias(result, token):
    return float(np.mean([result.cell(token, s).report.bias_ratio for s in SEEDS]))


def mean_metric(result, token, pick):
    return float(np.mean([pick(result.cell(token, s).report) for s in SEEDS]))


def test_criterion_1_bias_reproduction(lt60_sweep):
    ratio = mean_bias(lt60_sweep, "specific")
    runtime = sum(lt60_sweep.cell("specific", s).wall_time_s for s in SEEDS)
    ok = ratio > 1.5 and runtime < 600.0
    criterion(1, ok, f"specific mean bias_ratio {ratio:.2f} > 1.5, "
                     f"3 runs took {runtime:.1f}s < 600s")


def test_criterion_2_agnostic_balance(lt60_sweep):
    ratio = mean_bias(lt60_sweep, "agnostic")
    criterion(2, ratio < 1.25, f"agnostic mean bias_ratio {ratio:.3f} < 1.25")


def test_criterion_3_oracle_table_direction(lt60_sweep):
    rare_specific = mean_metric(lt60_sweep, "specific", lambda r: r.ap_per_group["rare"])
    rare_agnostic = mean_metric(lt60_sweep, "agnostic", lambda r: r.ap_per_group["rare"])
    freq_specific = mean_metric(lt60_sweep, "specific", lambda r: r.ap_per_group["frequent"])
    freq_agnostic = mean_metric(lt60_sweep, "agnostic", lambda r: r.ap_per_group["frequent"])
    rare_gain = rare_agnostic - rare_specific
    ok = rare_gain >= 0.05 and freq_specific >= freq_agnostic - 0.01
    criterion(3, ok, f"agnostic rare AP gain {100 * rare_gain:+.1f} >= +5.0 points; "
                     f"frequent: specific {100 * freq_specific:.1f} >= "
                     f"agnostic {100 * freq_agnostic:.1f} - 1.0")


def test_criterion_4_cab_improvement_and_equivalences(lt60_sweep):
    ap_specific = mean_metric(lt60_sweep, "specific", lambda r: r.ap)
    ap_cab = mean_metric(lt60_sweep, "cab:0.5", lambda r: r.ap)
    rare_specific = mean_metric(lt60_sweep, "specific", lambda r: r.ap_per_group["rare"])
    rare_cab = mean_metric(lt60_sweep, "cab:0.5", lambda r: r.ap_per_group["rare"])
    gains_ok = ap_cab >= ap_specific + 0.005 and rare_cab >= rare_specific + 0.02

    edges_ok = True
    for seed in SEEDS:
        for left, right in (("cab:0", "specific"), ("cab:1", "merge:rcf")):
            a, b = lt60_sweep.cell(left, seed), lt60_sweep.cell(right, seed)
            edges_ok &= a.ledger_digest == b.ledger_digest
            edges_ok &= ((a.cell_dir / "detections.csv").read_bytes()
                         == (b.cell_dir / "detections.csv").read_bytes())
            bank_a = load_bank(a.cell_dir / "bank.json")
            bank_b = load_bank(b.cell_dir / "bank.json")
            for c in range(bank_a.num_classes):
                wa, ba = effective_weight(bank_a, c)
                wb, bb = effective_weight(bank_b, c)
                edges_ok &= np.array_equal(wa, wb) and np.array_equal(ba, bb)

    criterion(4, gains_ok and edges_ok,
              f"cab:0.5 AP {100 * ap_cab:.1f} >= specific {100 * ap_specific:.1f} + 0.5, "
              f"rare {100 * rare_cab:.1f} >= {100 * rare_specific:.1f} + 2.0; "
              f"cab:0==specific and cab:1==merge:rcf bit-identical: {edges_ok}")


def test_criterion_5_flattening_every_seed(lt60_sweep):
    per_seed = [(lt60_sweep.cell("cab:0.5", s).report.bias_ratio,
                 lt60_sweep.cell("specific", s).report.bias_ratio) for s in SEEDS]
    ok = all(cab < spec for cab, spec in per_seed)
    detail = ", ".join(f"seed{s}: {c:.2f} < {p:.2f}" for s, (c, p) in zip(SEEDS, per_seed))
    criterion(5, ok, f"cab:0.5 bias_ratio below specific on every seed ({detail})")


def test_criterion_6_remedy_coverage(lt60_sweep):
    ap_specific = mean_metric(lt60_sweep, "specific", lambda r: r.ap)
    cluster_tokens = ("cluster:5:num", "cluster:5:scale", "cluster:10:num", "cluster:10:scale")
    merge_tokens = ("merge:r", "merge:c", "merge:rc")
    cluster_aps = {t: mean_metric(lt60_sweep, t, lambda r: r.ap) for t in cluster_tokens}
    merge_aps = {t: mean_metric(lt60_sweep, t, lambda r: r.ap) for t in merge_tokens}
    best_cluster = max(cluster_aps, key=cluster_aps.get)
    best_merge = max(merge_aps, key=merge_aps.get)
    ok = cluster_aps[best_cluster] >= ap_specific and merge_aps[best_merge] >= ap_specific
    criterion(6, ok, f"best cluster {best_cluster} AP {100 * cluster_aps[best_cluster]:.1f} and "
                     f"best merge {best_merge} AP {100 * merge_aps[best_merge]:.1f} "
                     f">= specific {100 * ap_specific:.1f}")


def test_criterion_7_numerical_core():
    # analytic gradients vs central differences: 100 randomized probes
    probes_per_variant = 20
    worst = 0.0
    for token in ALL_VARIANTS:
        rng = np.random.default_rng(zlib.crc32(token.encode()))
        for _ in range(probes_per_variant):
            bank = bank_for_variant(token, rng)
            batch = random_batch(rng, bank.num_classes, bank.feature_dim, size=6)
            analytic = grad_head(bank, batch)
            fd = finite_difference_grads(copy.deepcopy(bank), batch)
            worst = max(worst, relative_error(analytic.weights, fd["weights"]).max(),
                        relative_error(analytic.biases, fd["biases"]).max())
            if "agnostic_weight" in fd:
                worst = max(worst,
                            relative_error(analytic.agnostic_weight, fd["agnostic_weight"]).max(),
                            relative_error(analytic.agnostic_bias, fd["agnostic_bias"]).max())
    grad_ok = worst < 1e-5

    # encode/decode roundtrip over 10^4 randomized pairs
    rng = np.random.default_rng(101)
    roundtrip_worst = 0.0
    for _ in range(10_000):
        proposal = random_box(rng, -500, 500)
        target = random_box(rng, -500, 500)
        decoded = decode_delta(proposal, encode_delta(proposal, target))
        roundtrip_worst = max(roundtrip_worst,
                              max(abs(g - w) for g, w in
                                  zip(decoded.as_tuple(), target.as_tuple())))
    roundtrip_ok = roundtrip_worst < 1e-9

    # NMS and AP against brute-force references on seeded instances of <= 8 boxes
    rng = np.random.default_rng(202)
    nms_ok = True
    for _ in range(250):
        dets = [(random_box(rng, 0, 60, 5, 40),
                 float(rng.choice([0.4, 0.4, rng.uniform()])))
                for _ in range(int(rng.integers(0, 9)))]
        for threshold in (0.3, 0.5, 0.7):
            nms_ok &= nms(dets, threshold) == reference_nms(dets, threshold)

    ap_ok = True
    for _ in range(120):
        gts, dets = [], []
        for image in range(int(rng.integers(1, 3))):
            for _ in range(int(rng.integers(1, 4))):
                gts.append(make_gt(image, int(rng.integers(0, 3)), random_box(rng, 0, 60, 4, 30)))
        from tailreg.evaluation import Detection
        from tailreg.geometry import Box
        for _ in range(int(rng.integers(0, 9))):
            base = gts[int(rng.integers(0, len(gts)))]
            b = base.gt_box
            shift = rng.normal(scale=3.0, size=2)
            dets.append(Detection(base.image_id, base.class_id,
                                  float(rng.choice([0.5, rng.uniform()])),
                                  Box(b.x1 + shift[0], b.y1 + shift[1],
                                      b.x2 + shift[0], b.y2 + shift[1])))
        for threshold in (0.3, 0.5, 0.75):
            got = average_precision(dets, gts, threshold)
            want = reference_ap(dets, gts, threshold)
            ap_ok &= set(got) == set(want) and all(abs(got[c] - want[c]) < 1e-9 for c in got)

    ok = grad_ok and roundtrip_ok and nms_ok and ap_ok
    criterion(7, ok, f"gradients rel-err {worst:.2e} < 1e-5 (100 probes, 5 variants); "
                     f"roundtrip {roundtrip_worst:.2e} < 1e-9 (10^4 pairs); "
                     f"NMS oracle: {nms_ok}; AP oracle: {ap_ok}")


def test_criterion_8_determinism(lt60_sweep, tmp_path):
    spec = lt60_sweep.spec

    # stage: dataset generation
    stored = spec.out_dir / "_datasets" / "lt60-seed1.jsonl"
    regenerated = serialize_dataset(generate(preset_config("lt60", seed=1)))
    dataset_ok = regenerated == stored.read_bytes()

    # stage: training (bank + ledger digests must reproduce)
    from tailreg.dataset import load_dataset
    data = load_dataset(stored)
    cell = lt60_sweep.cell("specific", 1)
    bank, ledger = train(data, "specific", TrainConfig(epochs=EPOCHS, seed=1))
    train_ok = (bank.trained_digest == cell.bank_digest
                and ledger.digest() == cell.ledger_digest)

    # stage: inference + report
    detections = run_inference(bank, None, data.val, spec.eval)
    infer_ok = detections_bytes(detections) == (cell.cell_dir / "detections.csv").read_bytes()
    rep = report(bank, data, spec.eval, ledger.partition, ledger=ledger, detections=detections)
    report_ok = rep.csv_bytes() == (cell.cell_dir / "report.csv").read_bytes()

    # stage: plots
    from tailreg.plots import emit_plots
    first = emit_plots(lt60_sweep, tmp_path / "plots1")
    second = emit_plots(lt60_sweep, tmp_path / "plots2")
    plots_ok = all(a.read_bytes() == b.read_bytes() for a, b in zip(first, second))

    ok = dataset_ok and train_ok and infer_ok and report_ok and plots_ok
    criterion(8, ok, f"byte-identical reruns: dataset {dataset_ok}, training {train_ok}, "
                     f"inference {infer_ok}, report {report_ok}, plots {plots_ok}")


def test_criterion_9_degenerate_solvability(clean_runs):
    details = []
    ok = True
    for token, (loss, ap) in clean_runs.items():
        ok &= loss < 1e-6 and ap == 1.0
        details.append(f"{token}: loss {loss:.1e}, AP {ap:.3f}")
    criterion(9, ok, "noise-free runs reach train loss < 1e-6 and oracle AP 1.0 ("
                     + "; ".join(details) + ")")
