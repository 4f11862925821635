"""Evaluation harness: fixed-size test evaluation, zero-shot generalization
sweeps across sizes, side-by-side run comparison, and curve/chart emission.

Report rows carry a reference tag: "exact" gaps are measured against optimal
tours (Held-Karp or brute force); "2opt" marks heuristic references used
beyond the exact range, where negative gaps are possible and flagged.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .decoder import DecodeConfig
from .model import PolicyModel
from .tsp import (Dataset, HELD_KARP_MAX, Tour, TspInstance, generate_dataset,
                  nearest_neighbor, optimality_gap, solve_reference, two_opt)

CSV_HEADER = "model,paradigm,train_size,decode,size,count,mean_len,mean_gap_pct,ref,seconds"
EXACT_SOLVERS = ("heldkarp", "bruteforce")


class BenchError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvalRow:
    model_id: str
    paradigm: str
    train_size: int
    decode: str        # decode tag: greedy | sample:K | beam:W
    size: int
    count: int
    mean_len: float
    mean_gap_pct: float
    ref: str           # exact | 2opt | file
    seconds: float

    def csv(self) -> str:
        return (f"{self.model_id},{self.paradigm},{self.train_size},{self.decode},"
                f"{self.size},{self.count},{self.mean_len!r},{self.mean_gap_pct!r},"
                f"{self.ref},{self.seconds:.3f}")


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(CSV_HEADER + "\n")
            for row in self.rows:
                fh.write(row.csv() + "\n")

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        rows = []
        with open(path) as fh:
            header = fh.readline().strip()
            if header != CSV_HEADER:
                raise BenchError(f"{path}: unexpected report header {header!r}")
            for line in fh:
                if not line.strip():
                    continue
                f = line.strip().split(",")
                rows.append(EvalRow(f[0], f[1], int(f[2]), f[3], int(f[4]), int(f[5]),
                                    float(f[6]), float(f[7]), f[8], float(f[9])))
        return cls(rows)


@dataclass(frozen=True)
class SweepSpec:
    sizes: tuple[int, ...]
    count: int
    decodes: tuple[DecodeConfig, ...]
    seed: int = 0
    exact_only: bool = False

    def __post_init__(self):
        if not self.sizes or any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError("sizes must be non-empty and strictly increasing")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not self.decodes:
            raise ValueError("need at least one decode config")


def reference_lengths(dataset: Dataset, exact_only: bool = False) -> tuple[np.ndarray, str]:
    """Per-instance reference lengths and the reference tag for a dataset."""
    n = dataset.instances[0].n
    if dataset.solutions is not None:
        solver = dataset.meta.get("solver", "file")
        if solver in EXACT_SOLVERS:
            tag = "exact"
        elif solver == "twoopt":
            tag = "2opt"
        else:
            tag = "file"
        if exact_only and tag != "exact":
            raise BenchError(f"exact references required but dataset solver is {solver!r}")
        return np.array([t.length for t in dataset.solutions]), tag
    if n > HELD_KARP_MAX:
        if exact_only:
            raise BenchError(f"exact references required but n={n} exceeds the exact range ({HELD_KARP_MAX})")
        tours = [two_opt(inst, nearest_neighbor(inst, 0)) for inst in dataset.instances]
        return np.array([t.length for t in tours]), "2opt"
    return np.array([solve_reference(inst)[0].length for inst in dataset.instances]), "exact"


def _solve_chunk(model: PolicyModel, instances: list[TspInstance], decode: DecodeConfig,
                 start: int, total: int) -> list[Tour]:
    if decode.mode == "sample":
        streams = np.random.default_rng(decode.seed).spawn(total)[start:start + len(instances)]
        from .decoder import sample_decode

        return [sample_decode(model, inst, decode.k, streams[i], clip=decode.clip).best
                for i, inst in enumerate(instances)]
    return model.solve_batch(instances, decode)


def solve_instances(model: PolicyModel, instances: list[TspInstance],
                    decode: DecodeConfig, workers: int = 1) -> list[Tour]:
    """Decode every instance; results are independent of the worker count."""
    if workers <= 1 or decode.mode == "greedy" or len(instances) < 2 * workers:
        return model.solve_batch(instances, decode)
    chunks = np.array_split(np.arange(len(instances)), workers)
    with ProcessPoolExecutor(max_workers=workers) as ex:
        futures = [ex.submit(_solve_chunk, model, [instances[i] for i in chunk], decode,
                             int(chunk[0]), len(instances))
                   for chunk in chunks if len(chunk)]
        out: list[Tour] = []
        for fut in futures:
            out.extend(fut.result())
    return out


def evaluate(model: PolicyModel, dataset: Dataset, decode: DecodeConfig,
             exact_only: bool = False, workers: int = 1) -> EvalRow:
    """Decode a dataset under one search setting and aggregate the metrics.

    The reported gap is the mean of per-instance gaps. With an exact
    reference, per-instance gaps below -1e-9 raise (a solver bug); rounding
    dust in [-1e-9, 0) clamps to 0 so exact-reference gaps are never negative.
    """
    refs, tag = reference_lengths(dataset, exact_only)
    t0 = time.perf_counter()
    tours = solve_instances(model, dataset.instances, decode, workers)
    lengths = np.array([t.length for t in tours])
    gaps = np.array([optimality_gap(l, r) for l, r in zip(lengths, refs)])
    if tag == "exact":
        if gaps.min() < -1e-9:
            raise BenchError(f"negative gap {gaps.min()} against an exact reference")
        gaps = np.maximum(gaps, 0.0)
    seconds = time.perf_counter() - t0
    info = model.info
    return EvalRow(
        model_id=str(info.get("model_id", "unknown")),
        paradigm=str(info.get("paradigm", "unknown")),
        train_size=int(info.get("train_size", 0)),
        decode=decode.tag(),
        size=dataset.instances[0].n,
        count=len(dataset.instances),
        mean_len=float(lengths.mean()),
        mean_gap_pct=float(gaps.mean()),
        ref=tag,
        seconds=seconds,
    )


def sweep_dataset(size: int, count: int, seed: int) -> Dataset:
    """Deterministic per-(seed, size) test set with routed reference tours."""
    child_seed = int(np.random.SeedSequence((seed, size)).generate_state(1)[0])
    solver = "heldkarp" if size <= HELD_KARP_MAX else "twoopt"
    return generate_dataset(size, count, seed=child_seed, solver=solver)


def generalization_sweep(model: PolicyModel, spec: SweepSpec, workers: int = 1,
                         progress=None) -> EvalReport:
    """Evaluate one model across sizes and decode settings (zero-shot)."""
    say = progress or (lambda msg: None)
    rows = []
    for size in spec.sizes:
        dataset = sweep_dataset(size, spec.count, spec.seed)
        for decode in spec.decodes:
            row = evaluate(model, dataset, decode, spec.exact_only, workers)
            rows.append(row)
            say(f"size {size} {decode.tag()}: mean len {row.mean_len:.4f}, "
                f"gap {row.mean_gap_pct:.3f}% ({row.ref})")
    return EvalReport(rows)


# ---------------------------------------------------------------------------
# comparison and plot data


@dataclass
class Comparison:
    """Side-by-side table: one row per (model, decode mode), one gap column
    per size, plus per-(decode, size) winners by lower gap."""

    decode_tags: list[str]
    sizes: list[int]
    series: list[tuple[str, str, int]]              # (model_id, paradigm, train_size)
    gaps: dict[tuple[str, int, str], float]         # (decode, size, model_id) -> gap
    refs: dict[tuple[str, int], str]

    def winner(self, decode: str, size: int) -> str:
        best_gap = min(self.gaps[(decode, size, s[0])] for s in self.series)
        ties = [s[0] for s in self.series if self.gaps[(decode, size, s[0])] == best_gap]
        return "tie" if len(ties) > 1 else ties[0]

    @property
    def data_rows(self) -> list[tuple[str, str, int, str]]:
        return [(m, p, ts, d) for d in self.decode_tags for m, p, ts in self.series]

    def to_csv(self, path) -> None:
        size_cols = ",".join(f"gap@{s}" for s in self.sizes)
        lines = [f"model,paradigm,train_size,decode,{size_cols}"]
        for decode in self.decode_tags:
            for model_id, paradigm, train_size in self.series:
                gaps = ",".join(repr(self.gaps[(decode, s, model_id)]) for s in self.sizes)
                lines.append(f"{model_id},{paradigm},{train_size},{decode},{gaps}")
        for decode in self.decode_tags:
            winners = ",".join(self.winner(decode, s) for s in self.sizes)
            lines.append(f"winner,,,{decode},{winners}")
            tags = ",".join(self.refs[(decode, s)] for s in self.sizes)
            lines.append(f"ref,,,{decode},{tags}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def compare_runs(reports: list[EvalReport]) -> Comparison:
    """Merge per-model reports that share the same decode/size grid."""
    if not reports:
        raise BenchError("no reports to compare")
    keysets = [sorted({(r.decode, r.size) for r in rep.rows}) for rep in reports]
    if any(ks != keysets[0] for ks in keysets[1:]):
        raise BenchError("misaligned reports: decode/size grids differ")
    series = []
    gaps = {}
    refs = {}
    for rep in reports:
        first = rep.rows[0]
        sid = first.model_id
        if any(s[0] == sid for s in series):
            sid = f"{sid}#{len(series)}"
        series.append((sid, first.paradigm, first.train_size))
        for r in rep.rows:
            gaps[(r.decode, r.size, sid)] = r.mean_gap_pct
            refs[(r.decode, r.size)] = r.ref
    decode_tags = sorted({k[0] for k in keysets[0]})
    sizes = sorted({k[1] for k in keysets[0]})
    return Comparison(decode_tags=decode_tags, sizes=sizes, series=series, gaps=gaps, refs=refs)


def curves_from_reports(reports: list[EvalReport]) -> dict[str, list[dict]]:
    """Per decode tag: one (model, paradigm) series of gap vs size."""
    curves: dict[str, dict[tuple[str, str], dict]] = {}
    for rep in reports:
        for r in rep.rows:
            mode = curves.setdefault(r.decode, {})
            key = (r.model_id, r.paradigm)
            s = mode.setdefault(key, {"model": r.model_id, "paradigm": r.paradigm,
                                      "sizes": [], "gaps": []})
            s["sizes"].append(r.size)
            s["gaps"].append(r.mean_gap_pct)
    out = {}
    for tag, mode in curves.items():
        series = []
        for key in sorted(mode):
            s = mode[key]
            order = np.argsort(s["sizes"])
            series.append({"model": s["model"], "paradigm": s["paradigm"],
                           "sizes": [s["sizes"][i] for i in order],
                           "gaps": [s["gaps"][i] for i in order]})
        out[tag] = series
    return out


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _svg_chart(series: list[dict], title: str) -> str:
    """A minimal deterministic SVG line chart of gap vs size.

    The true data ranges are recorded as data-* attributes on the root node.
    """
    xs = [x for s in series for x in s["sizes"]]
    ys = [y for s in series for y in s["gaps"]]
    xmin, xmax, ymin, ymax = min(xs), max(xs), min(ys), max(ys)
    xlo, xhi = (xmin, xmax) if xmax > xmin else (xmin - 0.5, xmax + 0.5)
    ylo, yhi = (ymin, ymax) if ymax > ymin else (ymin - 0.5, ymax + 0.5)
    width, height, ml, mr, mt, mb = 640, 440, 70, 20, 40, 50

    def px(x: float) -> float:
        return ml + (x - xlo) / (xhi - xlo) * (width - ml - mr)

    def py(y: float) -> float:
        return height - mb - (y - ylo) / (yhi - ylo) * (height - mt - mb)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'data-xmin="{xmin!r}" data-xmax="{xmax!r}" data-ymin="{ymin!r}" data-ymax="{ymax!r}">',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<rect x="{ml}" y="{mt}" width="{width - ml - mr}" height="{height - mt - mb}" '
        f'fill="none" stroke="#333"/>',
        f'<text x="{ml}" y="{height - 12}" font-size="11">size {xmin!r}</text>',
        f'<text x="{width - mr}" y="{height - 12}" text-anchor="end" font-size="11">{xmax!r}</text>',
        f'<text x="{ml - 6}" y="{py(ymax):.1f}" text-anchor="end" font-size="11">{ymax!r}</text>',
        f'<text x="{ml - 6}" y="{py(ymin):.1f}" text-anchor="end" font-size="11">{ymin!r}</text>',
        f'<text x="12" y="{height / 2:.1f}" font-size="11" transform="rotate(-90 12 {height / 2:.1f})" '
        f'text-anchor="middle">mean gap (%)</text>',
    ]
    for i, s in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(s["sizes"], s["gaps"]))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in zip(s["sizes"], s["gaps"]):
            parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="2.5" fill="{color}"/>')
        parts.append(f'<text x="{width - mr - 6}" y="{mt + 16 + 14 * i}" text-anchor="end" '
                     f'font-size="11" fill="{color}">{s["model"]} ({s["paradigm"]})</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def _safe_tag(tag: str) -> str:
    return tag.replace(":", "-")


def emit_plot_data(curves: dict[str, list[dict]], outdir) -> list[str]:
    """One CSV plus one SVG chart per decode tag; deterministic output."""
    from pathlib import Path

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if not curves:
        raise BenchError("no curves to emit")
    written = []
    for tag in sorted(curves):
        series = curves[tag]
        safe = _safe_tag(tag)
        csv_path = outdir / f"curve_{safe}.csv"
        lines = ["size,gap,model,paradigm"]
        for s in series:
            for x, y in zip(s["sizes"], s["gaps"]):
                lines.append(f"{x},{y!r},{s['model']},{s['paradigm']}")
        csv_path.write_text("\n".join(lines) + "\n")
        svg_path = outdir / f"curve_{safe}.svg"
        svg_path.write_text(_svg_chart(series, f"zero-shot generalization, {tag} decoding"))
        written.extend([str(csv_path), str(svg_path)])
    return written
