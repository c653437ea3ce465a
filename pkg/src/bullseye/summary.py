"""Aggregate report records into summary.tsv and plot-ready series files.

Everything written here is derived from persisted artifacts only, so
``summarize`` on a finished directory always reproduces the same bytes.
Timings are excluded on purpose; they live in reports/timings.jsonl.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from bullseye.attacks import load_poison_set
from bullseye.errors import ManifestError, NoDataError
from bullseye.simplex import coefficient_entropy
from bullseye.victim import read_records


def wilson(successes: int, n: int, confidence=0.95) -> tuple[float, float]:
    if n == 0:
        return float("nan"), float("nan")
    ci = binomtest(successes, n).proportion_ci(confidence_level=confidence, method="wilson")
    return ci.low, ci.high


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if np.isnan(x) else f"{x:.4f}"
    return str(x)


def _write_tsv(path: Path, header, rows, comment=None):
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {comment}"] if comment else []
    lines.append("\t".join(header))
    lines += ["\t".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def success_table(outcomes: list[dict]) -> list[tuple]:
    groups = {}
    for r in outcomes:
        groups.setdefault((r["victim"], r["scenario"], r["attack_kind"]), []).append(r)
    rows = []
    for (victim, scenario, kind), recs in sorted(groups.items()):
        flags = [bool(s) for r in recs for s in r["success"]]
        hits = sum(flags)
        lo, hi = wilson(hits, len(flags))
        acc = float(np.mean([r["baseline_test_accuracy"] for r in recs]))
        rows.append((victim, scenario, kind, len(recs), hits, hits / len(flags), lo, hi, acc))
    return rows


def _check_hashes(outcomes, allow_mixed):
    hashes = sorted({r["manifest_hash"] for r in outcomes})
    if len(hashes) > 1 and not allow_mixed:
        raise ManifestError([f"reports mix manifest hashes {', '.join(hashes)}; pass allow_mixed to combine"])
    return hashes


def write_series(out: Path):
    series = out / "series"
    if series.exists():
        for f in series.glob("*.tsv"):
            f.unlink()
    loss_rows, coef_rows, entropy_rows = [], [], []
    for path in sorted((out / "poisons").glob("*/target-*.npz")):
        ps, _ = load_poison_set(path)
        kind, index = path.parent.name, int(path.stem.split("-")[1])
        loss_rows += [(kind, index, it, float(v)) for it, v in enumerate(ps.loss_trace)]
        coeffs = ps.final_coefficients
        if coeffs is not None:
            for net, row in enumerate(np.asarray(coeffs)):
                coef_rows += [(kind, index, net, rank, float(c)) for rank, c in enumerate(sorted(row, reverse=True))]
                entropy_rows.append((kind, index, net, coefficient_entropy(row), float(np.log2(len(row)))))
    if loss_rows:
        _write_tsv(series / "loss_trace.tsv", ("attack_kind", "target_index", "iteration", "loss"), loss_rows)
    if coef_rows:
        _write_tsv(series / "cp_sorted_coefficients.tsv",
                   ("attack_kind", "target_index", "network", "rank", "coefficient"), coef_rows)
        _write_tsv(series / "cp_entropy.tsv",
                   ("attack_kind", "target_index", "network", "entropy_bits", "max_bits"), entropy_rows)
    defenses = out / "reports" / "defenses.jsonl"
    if defenses.exists():
        recs = read_records(defenses)
        groups = {}
        for r in recs:
            key = (r["victim"], r["attack_kind"], r["parameter_name"], r["parameter"])
            groups.setdefault(key, []).append(r)
        rows = []
        for (victim, kind, name, value), rs in sorted(groups.items()):
            rows.append((victim, kind, name, value, len(rs),
                         float(np.mean([r["precision"] for r in rs])), float(np.mean([r["recall"] for r in rs])),
                         float(np.mean([r["success_after_defense"][0] for r in rs]))))
        _write_tsv(series / "defense_curves.tsv",
                   ("victim", "attack_kind", "parameter_name", "parameter", "n", "precision", "recall",
                    "success_after_defense"), rows)


def summarize(output_dir, allow_mixed: bool = False) -> Path:
    out = Path(output_dir)
    path = out / "reports" / "attack_outcomes.jsonl"
    if not path.exists() or not path.read_text().strip():
        raise NoDataError(f"no attack outcomes under {out}")
    outcomes = read_records(path)
    hashes = _check_hashes(outcomes, allow_mixed)
    rows = success_table(outcomes)
    header = ("victim", "scenario", "attack_kind", "n_targets", "successes", "success_rate",
              "ci95_low", "ci95_high", "clean_test_accuracy")
    _write_tsv(out / "summary.tsv", header, rows, comment="manifest " + ",".join(hashes))
    write_series(out)
    return out / "summary.tsv"


def read_summary(path) -> list[dict]:
    lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    header = lines[0].split("\t")
    return [dict(zip(header, l.split("\t"))) for l in lines[1:]]
