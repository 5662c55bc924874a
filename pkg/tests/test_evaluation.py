import numpy as np
import pytest
from pytest import approx

from tailreg.dataset import Instance, SyntheticDataset, partition_by_frequency
from tailreg.evaluation import (Detection, EvalConfig, average_precision,
                                detections_bytes, load_detections, load_report, report,
                                run_inference, save_detections)
from tailreg.exceptions import ConfigError
from tailreg.geometry import Box, Delta
from tailreg.training import TrainConfig, train

from conftest import random_box


# ---------------------------------------------------------------------------
# independent reference evaluator (plain loops, no shared code)

def reference_ap(detections, gt_instances, threshold):
    def ref_iou(a, b):
        iw = min(a.x2, b.x2) - max(a.x1, b.x1)
        ih = min(a.y2, b.y2) - max(a.y1, b.y1)
        if iw <= 0 or ih <= 0:
            return 0.0
        inter = iw * ih
        ua = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter
        return inter / ua

    classes = sorted({g.class_id for g in gt_instances})
    out = {}
    for cls in classes:
        gts = [g for g in gt_instances if g.class_id == cls]
        dets = [(i, d) for i, d in enumerate(detections) if d.class_id == cls]
        dets.sort(key=lambda p: (-p[1].score, p[0]))
        taken = [False] * len(gts)
        flags = []
        for _, det in dets:
            best, best_iou = -1, 0.0
            for gi, gt in enumerate(gts):
                if taken[gi] or gt.image_id != det.image_id:
                    continue
                ov = ref_iou(det.box, gt.gt_box)
                if ov >= threshold and ov > best_iou:
                    best, best_iou = gi, ov
            if best >= 0:
                taken[best] = True
                flags.append(True)
            else:
                flags.append(False)
        # 101-point interpolation, computed directly per grid point
        ap_total = 0.0
        for k in range(101):
            r = k / 100.0
            best_prec = 0.0
            tp = 0
            for rank, is_tp in enumerate(flags, start=1):
                if is_tp:
                    tp += 1
                if tp / len(gts) >= r - 1e-12:
                    best_prec = max(best_prec, tp / rank)
            ap_total += best_prec
        out[cls] = ap_total / 101.0
    return out


def make_gt(image_id, class_id, box):
    return Instance(image_id=image_id, class_id=class_id, gt_box=box, proposal_box=box,
                    feature=np.zeros(4), target_delta=Delta.zero())


class TestEvalConfig:
    def test_defaults_valid(self):
        EvalConfig().validate()

    @pytest.mark.parametrize("kwargs", [
        {"iou_thresholds": ()},
        {"iou_thresholds": (0.5, 0.4)},
        {"iou_thresholds": (0.0, 0.5)},
        {"nms_threshold": 1.0},
        {"max_detections_per_image": 0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            EvalConfig(**kwargs).validate()


class TestAveragePrecision:
    def test_perfect_detections(self):
        gts = [make_gt(0, 0, Box(0, 0, 10, 10)), make_gt(1, 0, Box(5, 5, 20, 20))]
        dets = [Detection(0, 0, 1.0, Box(0, 0, 10, 10)), Detection(1, 0, 1.0, Box(5, 5, 20, 20))]
        assert average_precision(dets, gts, 0.5) == {0: approx(1.0)}

    def test_no_detections(self):
        gts = [make_gt(0, 0, Box(0, 0, 10, 10))]
        assert average_precision([], gts, 0.5) == {0: 0.0}

    def test_zero_gt_class_excluded(self):
        gts = [make_gt(0, 0, Box(0, 0, 10, 10))]
        dets = [Detection(0, 7, 0.9, Box(0, 0, 10, 10))]
        result = average_precision(dets, gts, 0.5)
        assert 7 not in result

    def test_hand_example_against_reference(self):
        gts = [make_gt(0, 0, Box(0, 0, 10, 10)), make_gt(0, 0, Box(20, 0, 30, 10)),
               make_gt(1, 0, Box(0, 0, 8, 8))]
        dets = [
            Detection(0, 0, 0.95, Box(1, 0, 11, 10)),    # good match to gt0
            Detection(0, 0, 0.90, Box(0, 0, 10, 10)),    # duplicate of gt0 -> FP
            Detection(0, 0, 0.60, Box(21, 1, 31, 11)),   # match to gt1
            Detection(1, 0, 0.50, Box(4, 4, 12, 12)),    # too little overlap -> FP
        ]
        got = average_precision(dets, gts, 0.5)
        want = reference_ap(dets, gts, 0.5)
        assert got[0] == approx(want[0], abs=1e-12)

    def test_matches_reference_on_seeded_small_instances(self):
        rng = np.random.default_rng(23)
        for _ in range(150):
            num_classes = int(rng.integers(1, 4))
            gts, dets = [], []
            for image in range(int(rng.integers(1, 3))):
                for _ in range(int(rng.integers(0, 4))):
                    gts.append(make_gt(image, int(rng.integers(0, num_classes)),
                                       random_box(rng, 0, 60, 4, 30)))
            if not gts:
                continue
            for _ in range(int(rng.integers(0, 9))):
                base = gts[int(rng.integers(0, len(gts)))]
                if rng.uniform() < 0.7:
                    b = base.gt_box
                    shift = rng.normal(scale=3.0, size=2)
                    box = Box(b.x1 + shift[0], b.y1 + shift[1], b.x2 + shift[0], b.y2 + shift[1])
                else:
                    box = random_box(rng, 0, 60, 4, 30)
                score = float(rng.choice([0.5, 0.5, rng.uniform()]))
                dets.append(Detection(base.image_id, base.class_id, score, box))
            for threshold in (0.3, 0.5, 0.75):
                got = average_precision(dets, gts, threshold)
                want = reference_ap(dets, gts, threshold)
                assert set(got) == set(want)
                for cls in got:
                    assert got[cls] == approx(want[cls], abs=1e-9)

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(29)
        for _ in range(60):
            gts, dets = [], []
            for image in range(2):
                for _ in range(int(rng.integers(1, 4))):
                    gt = make_gt(image, 0, random_box(rng, 0, 60, 6, 30))
                    gts.append(gt)
                    b = gt.gt_box
                    shift = rng.normal(scale=2.0, size=2)
                    dets.append(Detection(image, 0, float(rng.uniform()),
                                          Box(b.x1 + shift[0], b.y1 + shift[1],
                                              b.x2 + shift[0], b.y2 + shift[1])))
            values = [average_precision(dets, gts, t)[0] for t in (0.3, 0.5, 0.7, 0.9)]
            assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))

    def test_threshold_domain(self):
        with pytest.raises(ValueError):
            average_precision([], [make_gt(0, 0, Box(0, 0, 1, 1))], 0.0)


@pytest.fixture(scope="module")
def trained_tiny(tiny_dataset):
    bank, ledger = train(tiny_dataset, "cab:0.5", TrainConfig(epochs=10, seed=1))
    return tiny_dataset, bank, ledger


@pytest.fixture(scope="module")
def trained_tiny_clean(tiny_clean_dataset):
    # long enough that even the rarest class's head drives its residual to
    # ~1e-9, so decoded boxes land within 1e-6 px of the ground truth
    bank, ledger = train(tiny_clean_dataset, "specific", TrainConfig(epochs=60, seed=1))
    return tiny_clean_dataset, bank, ledger


class TestRunInference:
    def test_oracle_on_clean_dataset_recovers_gt(self, trained_tiny_clean):
        data, bank, _ = trained_tiny_clean
        dets = run_inference(bank, None, data.val, EvalConfig())
        assert len(dets) == len(data.val)
        by_image = {}
        for d in dets:
            by_image.setdefault((d.image_id, d.class_id), d)
        for inst in data.val:
            det = by_image[(inst.image_id, inst.class_id)]
            for got, want in zip(det.box.as_tuple(), inst.gt_box.as_tuple()):
                assert abs(got - want) < 1e-6

    def test_score_threshold_above_one_kills_everything(self, trained_tiny):
        data, bank, _ = trained_tiny
        dets = run_inference(bank, None, data.val, EvalConfig(score_threshold=1.1))
        assert dets == []

    def test_untrained_bank_rejected(self, tiny_dataset):
        from tailreg.heads import initialize_bank, parse_head_spec
        bank = initialize_bank(parse_head_spec("specific"), tiny_dataset.num_classes,
                               tiny_dataset.config.feature_dim, np.random.default_rng(0))
        with pytest.raises(ValueError, match="trained"):
            run_inference(bank, None, tiny_dataset.val, EvalConfig())

    def test_joint_mode_needs_classifier(self, trained_tiny):
        data, bank, _ = trained_tiny
        with pytest.raises(ValueError, match="classifier"):
            run_inference(bank, None, data.val, EvalConfig(oracle_gt_class=False))

    def test_repeat_runs_bit_identical(self, trained_tiny):
        data, bank, _ = trained_tiny
        a = detections_bytes(run_inference(bank, None, data.val, EvalConfig()))
        b = detections_bytes(run_inference(bank, None, data.val, EvalConfig()))
        assert a == b

    def test_detection_cap(self, trained_tiny):
        data, bank, _ = trained_tiny
        capped = run_inference(bank, None, data.val, EvalConfig(max_detections_per_image=1))
        per_image = {}
        for d in capped:
            per_image[d.image_id] = per_image.get(d.image_id, 0) + 1
        assert max(per_image.values()) == 1

    def test_joint_mode_produces_scored_detections(self, tiny_dataset):
        bank, _ = train(tiny_dataset, "specific", TrainConfig(epochs=4, seed=2, mode="joint"))
        dets = run_inference(bank, bank.classifier, tiny_dataset.val,
                             EvalConfig(oracle_gt_class=False, score_threshold=0.2))
        assert all(0.2 <= d.score <= 1.0 for d in dets)


class TestReport:
    def test_report_joins_all_metrics(self, trained_tiny):
        data, bank, ledger = trained_tiny
        part = partition_by_frequency(data)
        rep = report(bank, data, EvalConfig(), part, ledger=ledger)
        assert 0.0 <= rep.ap <= 1.0
        assert set(rep.ap_per_threshold) == set(EvalConfig().iou_thresholds)
        assert rep.bias_ratio is not None
        assert rep.gt_count == len(data.val)
        assert rep.variant == "cab:0.5"

    def test_group_means_recompute_from_class_columns(self, trained_tiny):
        data, bank, ledger = trained_tiny
        part = partition_by_frequency(data)
        rep = report(bank, data, EvalConfig(), part, ledger=ledger)
        for group in ("rare", "common", "frequent"):
            members = [c for c in part.classes_in(group) if c in rep.ap_per_class]
            if not members:
                assert rep.ap_per_group[group] is None
                continue
            expected = float(np.mean([rep.ap_per_class[c] for c in members]))
            assert rep.ap_per_group[group] == approx(expected, abs=1e-12)
        overall = float(np.mean(list(rep.ap_per_class.values())))
        assert rep.ap == approx(overall, abs=1e-12)

    def test_single_group_equals_overall(self, trained_tiny):
        data, bank, ledger = trained_tiny
        all_rare = partition_by_frequency(data, thresholds=(10 ** 6, 10 ** 6 + 1))
        rep = report(bank, data, EvalConfig(), all_rare)
        assert rep.ap_per_group["rare"] == approx(rep.ap, abs=1e-12)
        assert rep.ap_per_group["common"] is None

    def test_excluded_classes_listed(self, trained_tiny):
        data, bank, _ = trained_tiny
        part = partition_by_frequency(data)
        pruned = SyntheticDataset(config=data.config, train=data.train,
                                  val=[i for i in data.val if i.class_id != 3])
        rep = report(bank, pruned, EvalConfig(), part)
        assert 3 in rep.excluded_classes
        assert 3 not in rep.ap_per_class

    def test_json_roundtrip(self, tmp_path, trained_tiny):
        data, bank, ledger = trained_tiny
        rep = report(bank, data, EvalConfig(), partition_by_frequency(data), ledger=ledger)
        rep.write_json(tmp_path / "r.json")
        loaded = load_report(tmp_path / "r.json")
        assert loaded.ap == rep.ap
        assert loaded.ap_per_threshold == rep.ap_per_threshold
        assert loaded.ap_per_class == rep.ap_per_class
        assert loaded.bias_ratio == rep.bias_ratio

    def test_csv_scales_by_100(self, trained_tiny):
        data, bank, ledger = trained_tiny
        rep = report(bank, data, EvalConfig(), partition_by_frequency(data), ledger=ledger)
        lines = rep.csv_bytes().decode().splitlines()
        assert lines[0].startswith("variant,ap,")
        ap_value = float(lines[1].split(",")[1])
        assert ap_value == approx(100.0 * rep.ap)


class TestDetectionsFile:
    def test_roundtrip(self, tmp_path, trained_tiny):
        data, bank, _ = trained_tiny
        dets = run_inference(bank, None, data.val, EvalConfig())
        path = tmp_path / "dets.csv"
        save_detections(dets, path)
        loaded = load_detections(path)
        assert loaded == dets

    def test_rejects_other_files(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("foo\n")
        with pytest.raises(ValueError):
            load_detections(path)
