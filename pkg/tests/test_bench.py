"""Evaluation harness: metrics aggregation, sweeps, comparison, plot data."""

import xml.etree.ElementTree as ET

import numpy as np
import pytest

from conftest import tiny_gat
from tournet import bench
from tournet.bench import (BenchError, Comparison, EvalReport, EvalRow, SweepSpec,
                           compare_runs, curves_from_reports, emit_plot_data, evaluate,
                           generalization_sweep, reference_lengths, solve_instances,
                           sweep_dataset)
from tournet.decoder import DecodeConfig
from tournet.model import PolicyModel
from tournet.tsp import (Dataset, brute_force_solve, generate_dataset, make_tour,
                         nearest_neighbor, optimality_gap)


class ReplayModel:
    """Stub that replays stored tours, keyed by instance coordinates."""

    def __init__(self, dataset, info=None):
        self.table = {inst.coords.tobytes(): sol for inst, sol in
                      zip(dataset.instances, dataset.solutions)}
        self.info = info or {"model_id": "replay", "paradigm": "sl", "train_size": 0}

    def solve_batch(self, instances, decode):
        return [self.table[inst.coords.tobytes()] for inst in instances]


class NNModel:
    """Stub that always runs nearest-neighbor from node 0."""

    info = {"model_id": "nn", "paradigm": "heuristic", "train_size": 0}

    def solve_batch(self, instances, decode):
        return [nearest_neighbor(inst, 0) for inst in instances]


class SeededRandomModel:
    """Stub producing a deterministic random tour per instance."""

    info = {"model_id": "random", "paradigm": "rl", "train_size": 0}

    def solve_batch(self, instances, decode):
        out = []
        for inst in instances:
            seed = int.from_bytes(inst.coords.tobytes()[:8], "little") % (2 ** 31)
            order = np.random.default_rng(seed).permutation(inst.n)
            out.append(make_tour(inst, order))
        return out


GREEDY = DecodeConfig(mode="greedy")


class TestEvaluate:
    def test_replay_optimal_model_has_zero_gap(self):
        ds = generate_dataset(7, 20, seed=3, solver="heldkarp")
        row = evaluate(ReplayModel(ds), ds, GREEDY)
        assert row.mean_gap_pct == 0.0
        assert row.ref == "exact"
        assert row.count == 20 and row.size == 7

    def test_single_instance_report(self):
        ds = generate_dataset(6, 1, seed=9, solver="heldkarp")
        row = evaluate(NNModel(), ds, GREEDY)
        tour = nearest_neighbor(ds.instances[0], 0)
        assert row.mean_len == tour.length
        assert abs(row.mean_gap_pct - optimality_gap(tour.length, ds.solutions[0].length)) < 1e-12

    def test_random_policy_matches_direct_loop(self):
        ds = generate_dataset(6, 100, seed=17, solver="heldkarp")
        model = SeededRandomModel()
        row = evaluate(model, ds, GREEDY)
        tours = model.solve_batch(ds.instances, GREEDY)
        direct = np.mean([optimality_gap(t.length, brute_force_solve(inst).length)
                          for t, inst in zip(tours, ds.instances)])
        assert abs(row.mean_gap_pct - direct) < 1e-10

    def test_mean_gap_matches_naive_accumulation(self):
        ds = generate_dataset(6, 30, seed=21, solver="heldkarp")
        model = NNModel()
        row = evaluate(model, ds, GREEDY)
        total = 0.0
        for inst, sol in zip(ds.instances, ds.solutions):
            total += optimality_gap(nearest_neighbor(inst, 0).length, sol.length)
        assert abs(row.mean_gap_pct - total / 30) < 1e-10

    def test_exact_reference_never_negative(self):
        ds = generate_dataset(7, 25, seed=5, solver="heldkarp")
        row = evaluate(ReplayModel(ds), ds, GREEDY)
        assert row.mean_gap_pct >= 0.0

    def test_exact_only_flag(self):
        ds = generate_dataset(25, 2, seed=5, solver="twoopt")
        with pytest.raises(BenchError):
            evaluate(NNModel(), ds, GREEDY, exact_only=True)
        row = evaluate(NNModel(), ds, GREEDY, exact_only=False)
        assert row.ref == "2opt"

    def test_unlabelled_dataset_solves_references(self):
        ds = generate_dataset(6, 5, seed=6, solver="none")
        row = evaluate(NNModel(), ds, GREEDY)
        assert row.ref == "exact" and row.mean_gap_pct >= 0.0

    def test_real_model_sampling_workers_equivalence(self):
        model = PolicyModel.init(tiny_gat(), 3, {"model_id": "m", "paradigm": "rl", "train_size": 6})
        ds = generate_dataset(6, 8, seed=7, solver="heldkarp")
        decode = DecodeConfig(mode="sample", k=4, seed=99)
        serial = solve_instances(model, ds.instances, decode, workers=1)
        parallel = solve_instances(model, ds.instances, decode, workers=2)
        for a, b in zip(serial, parallel):
            np.testing.assert_array_equal(a.order, b.order)


class TestReferenceLengths:
    def test_labelled_exact(self):
        ds = generate_dataset(6, 4, seed=1, solver="bruteforce")
        lengths, tag = reference_lengths(ds)
        assert tag == "exact" and len(lengths) == 4

    def test_labelled_heuristic_flagged(self):
        ds = generate_dataset(25, 2, seed=1, solver="twoopt")
        _, tag = reference_lengths(ds)
        assert tag == "2opt"

    def test_unknown_provenance_flagged_as_file(self, tmp_path):
        from tournet.tsp import read_dataset, write_dataset

        ds = generate_dataset(6, 3, seed=2, solver="heldkarp")
        ds.meta = {}
        path = tmp_path / "d.txt"
        write_dataset(ds, path)
        back = read_dataset(path)
        _, tag = reference_lengths(back)
        assert tag == "file"


class TestSweep:
    def test_shape_and_determinism(self):
        model = NNModel()
        spec = SweepSpec(sizes=(5, 8, 12), count=6, decodes=(GREEDY,), seed=4)
        a = generalization_sweep(model, spec)
        b = generalization_sweep(model, spec)
        assert len(a.rows) == 3
        assert [r.size for r in a.rows] == [5, 8, 12]
        assert all(np.isfinite(r.mean_gap_pct) for r in a.rows)
        for ra, rb in zip(a.rows, b.rows):
            assert ra.mean_gap_pct == rb.mean_gap_pct and ra.mean_len == rb.mean_len

    def test_sweep_at_training_size_reduces_to_evaluate(self):
        model = NNModel()
        spec = SweepSpec(sizes=(7,), count=10, decodes=(GREEDY,), seed=13)
        srow = generalization_sweep(model, spec).rows[0]
        erow = evaluate(model, sweep_dataset(7, 10, 13), GREEDY)
        assert (srow.mean_len, srow.mean_gap_pct, srow.ref) == (erow.mean_len, erow.mean_gap_pct, erow.ref)

    def test_nn_stub_matches_per_size_oracle(self):
        model = NNModel()
        spec = SweepSpec(sizes=(5, 9), count=8, decodes=(GREEDY,), seed=31)
        report = generalization_sweep(model, spec)
        for row in report.rows:
            ds = sweep_dataset(row.size, 8, 31)
            gaps = [optimality_gap(nearest_neighbor(inst, 0).length, sol.length)
                    for inst, sol in zip(ds.instances, ds.solutions)]
            assert abs(row.mean_gap_pct - np.mean(gaps)) < 1e-10

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SweepSpec(sizes=(5, 5), count=1, decodes=(GREEDY,))
        with pytest.raises(ValueError):
            SweepSpec(sizes=(8, 5), count=1, decodes=(GREEDY,))
        with pytest.raises(ValueError):
            SweepSpec(sizes=(5,), count=0, decodes=(GREEDY,))


def _report(model_id, paradigm, train_size, decodes, sizes, gap_fn):
    rows = [EvalRow(model_id, paradigm, train_size, d, s, 10, 4.0, gap_fn(d, s), "exact", 0.1)
            for d in decodes for s in sizes]
    return EvalReport(rows)


class TestCompare:
    def test_self_comparison_is_all_ties(self):
        rep = _report("a", "sl", 10, ["greedy"], [5, 10], lambda d, s: 1.0 + s)
        cmp_ = compare_runs([rep, rep])
        for size in (5, 10):
            assert cmp_.winner("greedy", size) == "tie"

    def test_known_winners(self):
        a = _report("a", "sl", 10, ["greedy"], [5, 10], lambda d, s: 1.0)
        b = _report("b", "rl", 10, ["greedy"], [5, 10], lambda d, s: 2.0 if s == 5 else 0.5)
        cmp_ = compare_runs([a, b])
        assert cmp_.winner("greedy", 5) == "a"
        assert cmp_.winner("greedy", 10) == "b"

    def test_eighteen_row_table(self, tmp_path):
        decodes = ["greedy", "sample:16", "beam:16"]
        sizes = [20, 50, 100]
        reports = []
        for paradigm in ("sl", "rl"):
            for train_size in sizes:
                gap = lambda d, s, p=paradigm, ts=train_size: abs(s - ts) / 10 + (0.1 if p == "sl" else 0.2)
                reports.append(_report(f"{paradigm}{train_size}", paradigm, train_size, decodes, sizes, gap))
        cmp_ = compare_runs(reports)
        assert len(cmp_.data_rows) == 18
        path = tmp_path / "cmp.csv"
        cmp_.to_csv(path)
        lines = path.read_text().splitlines()
        data_lines = [l for l in lines[1:] if not l.startswith(("winner,", "ref,"))]
        assert len(data_lines) == 18

    def test_misaligned_reports_rejected(self):
        a = _report("a", "sl", 10, ["greedy"], [5, 10], lambda d, s: 1.0)
        b = _report("b", "rl", 10, ["greedy"], [5, 15], lambda d, s: 1.0)
        with pytest.raises(BenchError):
            compare_runs([a, b])

    def test_duplicate_model_ids_disambiguated(self):
        a = _report("same", "sl", 10, ["greedy"], [5], lambda d, s: 1.0)
        b = _report("same", "rl", 10, ["greedy"], [5], lambda d, s: 2.0)
        cmp_ = compare_runs([a, b])
        assert len({s[0] for s in cmp_.series}) == 2


class TestPlotData:
    def test_single_point_curve(self, tmp_path):
        rep = _report("solo", "sl", 10, ["greedy"], [7], lambda d, s: 3.25)
        files = emit_plot_data(curves_from_reports([rep]), tmp_path)
        csv = (tmp_path / "curve_greedy.csv").read_text().splitlines()
        assert csv == ["size,gap,model,paradigm", "7,3.25,solo,sl"]
        assert (tmp_path / "curve_greedy.svg").exists()
        assert len(files) == 2

    def test_csv_round_trip(self, tmp_path):
        rep = _report("m", "rl", 10, ["greedy", "beam:4"], [5, 10, 20], lambda d, s: s / 7.0)
        emit_plot_data(curves_from_reports([rep]), tmp_path)
        lines = (tmp_path / "curve_greedy.csv").read_text().splitlines()[1:]
        parsed = [(int(a), float(b)) for a, b, _, _ in (l.split(",") for l in lines)]
        assert parsed == [(5, 5 / 7.0), (10, 10 / 7.0), (20, 20 / 7.0)]

    def test_chart_axis_ranges_cover_data_exactly(self, tmp_path):
        gaps = {5: 1.5, 10: 9.25, 20: 4.0}
        rep = _report("m", "rl", 10, ["greedy"], sorted(gaps), lambda d, s: gaps[s])
        emit_plot_data(curves_from_reports([rep]), tmp_path)
        root = ET.parse(tmp_path / "curve_greedy.svg").getroot()
        assert float(root.attrib["data-xmin"]) == 5.0
        assert float(root.attrib["data-xmax"]) == 20.0
        assert float(root.attrib["data-ymin"]) == 1.5
        assert float(root.attrib["data-ymax"]) == 9.25

    def test_deterministic_bytes(self, tmp_path):
        rep = _report("m", "sl", 10, ["sample:8"], [5, 10], lambda d, s: s * 0.3)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        emit_plot_data(curves_from_reports([rep]), d1)
        emit_plot_data(curves_from_reports([rep]), d2)
        assert (d1 / "curve_sample-8.csv").read_bytes() == (d2 / "curve_sample-8.csv").read_bytes()
        assert (d1 / "curve_sample-8.svg").read_bytes() == (d2 / "curve_sample-8.svg").read_bytes()

    def test_empty_curves_rejected(self, tmp_path):
        with pytest.raises(BenchError):
            emit_plot_data({}, tmp_path)


class TestReportCsv:
    def test_round_trip(self, tmp_path):
        rep = _report("m", "sl", 10, ["greedy", "sample:4"], [5, 10], lambda d, s: s * 1.1)
        path = tmp_path / "r.csv"
        rep.to_csv(path)
        back = EvalReport.from_csv(path)
        assert back.rows == rep.rows or all(
            (a.model_id, a.decode, a.size, a.mean_len, a.mean_gap_pct) ==
            (b.model_id, b.decode, b.size, b.mean_len, b.mean_gap_pct)
            for a, b in zip(back.rows, rep.rows))

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("nope\n")
        with pytest.raises(BenchError):
            EvalReport.from_csv(path)
