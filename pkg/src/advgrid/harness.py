"""Evaluation grid construction, execution, and per-state aggregation.

The grid is the cross product sets x losses x methods enumerated in a
deterministic set-major order. Aggregation follows the mean / minimum /
worst-case adversarial accuracy convention: the worst case counts a
sample as robust only if no selected cell fooled the model on it.
"""

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import attacks, losses


class GridConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class GridCell:
    pset: object
    loss: object
    method: object

    @property
    def ident(self):
        return f"{self.pset.ident}|{self.loss.ident}|{self.method.ident}"


@dataclass
class EvaluationGrid:
    psets: list
    loss_family: list
    methods: list
    cells: list

    def __len__(self):
        return len(self.cells)


def build_grid(psets, n_classes, methods):
    """Enumerate cells set-major, then loss, then method."""
    if not psets or not methods:
        raise GridConfigurationError("grid axes must be nonempty")
    if len({(s.family, s.norm) for s in psets}) != len(psets):
        raise GridConfigurationError("duplicate perturbation sets in grid")
    family = losses.build_family(n_classes)
    cells = [
        GridCell(pset, loss, method)
        for pset in psets
        for loss in family
        for method in methods
    ]
    return EvaluationGrid(list(psets), family, list(methods), cells)


@dataclass
class SuccessMatrix:
    """Boolean samples x cells attack-success matrix plus per-cell digests."""

    success: np.ndarray
    digests: list  # one dict per cell

    @property
    def n_samples(self):
        return self.success.shape[0]


def _cell_config(cell, defaults):
    defaults = defaults or {}
    return attacks.AttackConfig(
        cell.pset,
        cell.loss,
        cell.method,
        steps=defaults.get("steps", 20),
        random_start=defaults.get("random_start", False),
        seed=defaults.get("seed", 0),
    )


def _run_cell(target_model, dataset, cell, defaults, keep_traces):
    cfg = _cell_config(cell, defaults)
    grad_model = (
        target_model
        if cell.method.kind == "whitebox"
        else defaults["surrogates"][cell.method.surrogate_id]
    )
    digest = {
        "cell": cell.ident,
        "success": [],
        "delta_ell": [],
        "final_pred": [],
        "errors": [],
    }
    if keep_traces:
        digest["traces"] = []
        digest["labels"] = []
    for x, y in zip(dataset.inputs, dataset.labels):
        outcome = attacks.pgd(grad_model, target_model, x, y, cfg)
        digest["success"].append(bool(outcome.success))
        digest["delta_ell"].append(float(outcome.delta_ell))
        digest["final_pred"].append(int(np.argmax(outcome.trace[-1])))
        digest["errors"].append(outcome.error)
        if keep_traces:
            digest["traces"].append(outcome.trace.tolist())
            digest["labels"].append(int(y))
    return digest


def _is_trace_cell(cell):
    # traces are persisted for the white-box CE (I, linf) cell, the one
    # the trap diagnostics consume
    return (
        cell.method.kind == "whitebox"
        and cell.loss.ident == "ce"
        and cell.pset.family == "intensity"
        and cell.pset.norm == "linf"
    )


def run_grid(target_model, dataset, grid, attack_defaults=None, surrogates=None,
             outcome_dir=None, jobs=1, resume=False):
    """One pgd call per (sample, cell); the matrix entry is the success flag.

    With `outcome_dir`, per-cell digests are written as they complete and
    a rerun with resume=True skips cells whose digest file already exists.
    Attack errors are recorded in the digest and counted as failures; they
    never abort the sweep.
    """
    defaults = dict(attack_defaults or {})
    defaults["surrogates"] = surrogates or {}
    if outcome_dir:
        os.makedirs(outcome_dir, exist_ok=True)

    def cell_path(idx):
        name = grid.cells[idx].ident.replace("|", "_").replace(":", "-")
        return os.path.join(outcome_dir, f"cell_{name}.json")

    digests = [None] * len(grid.cells)
    pending = []
    for idx, cell in enumerate(grid.cells):
        if outcome_dir and resume and os.path.exists(cell_path(idx)):
            with open(cell_path(idx)) as fh:
                digests[idx] = json.load(fh)
        else:
            pending.append(idx)

    def finish(idx, digest):
        digests[idx] = digest
        if outcome_dir:
            tmp = cell_path(idx) + ".tmp"
            with open(tmp, "w") as fh:
                json.dump(digest, fh, sort_keys=True)
            os.replace(tmp, cell_path(idx))

    if jobs > 1 and pending:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = pool.map(
                _run_cell,
                [target_model] * len(pending),
                [dataset] * len(pending),
                [grid.cells[i] for i in pending],
                [defaults] * len(pending),
                [_is_trace_cell(grid.cells[i]) for i in pending],
            )
            for idx, digest in zip(pending, results):
                finish(idx, digest)
    else:
        for idx in pending:
            cell = grid.cells[idx]
            finish(idx, _run_cell(target_model, dataset, cell, defaults,
                                  _is_trace_cell(cell)))

    success = np.array([d["success"] for d in digests], dtype=bool).T
    return SuccessMatrix(success, digests)


def accuracy_per_cell(matrix, cell_index):
    """Adversarial accuracy of one grid cell: 1 - mean attack success."""
    return 1.0 - float(np.mean(matrix.success[:, cell_index]))


@dataclass
class ReportRow:
    state: str
    a_me: float
    a_mi: float
    a_wc: float
    clean: float

    def __post_init__(self):
        if not self.a_wc <= self.a_mi + 1e-12 or not self.a_mi <= self.a_me + 1e-12:
            raise ValueError(f"aggregate ordering violated in state {self.state}")


def aggregate_state(matrix, columns, clean_accuracy, name):
    """Mean / min / worst-case adversarial accuracy over selected cells."""
    columns = np.asarray(columns, dtype=np.intp)
    if columns.size == 0:
        raise ValueError(f"state {name} selects no grid cells")
    sub = matrix.success[:, columns]
    per_cell = 1.0 - sub.mean(axis=0)
    a_wc = float(np.mean(~sub.any(axis=1)))
    return ReportRow(name, float(per_cell.mean()), float(per_cell.min()), a_wc,
                     clean_accuracy)


STATE_NAMES = ("S0", "S1", "S2", "S3", "S4", "S5")


def builtin_states(grid):
    """The nested S0..S5 column subsets over a grid containing the
    six-set default axes."""

    def select(pred):
        return [i for i, cell in enumerate(grid.cells) if pred(cell)]

    def ilinf(c):
        return c.pset.family == "intensity" and c.pset.norm == "linf"

    states = [
        ("S0", select(lambda c: ilinf(c) and c.loss.ident == "ce"
                      and c.method.kind == "whitebox")),
        ("S1", select(lambda c: ilinf(c) and c.loss.ident == "ce")),
        ("S2", select(ilinf)),
        ("S3", select(lambda c: c.pset.family == "intensity"
                      and c.pset.norm in ("linf", "l1"))),
        ("S4", select(lambda c: c.pset.family == "intensity")),
        ("S5", select(lambda c: True)),
    ]
    for (_, prev), (_, cur) in zip(states, states[1:]):
        if not set(prev) <= set(cur):
            raise GridConfigurationError("states are not nested")
    return states


def state_report(matrix, grid, clean_accuracy):
    return [
        aggregate_state(matrix, cols, clean_accuracy, name)
        for name, cols in builtin_states(grid)
    ]


def emit_report(rows, metadata, path, format="csv"):
    """Write the aggregate report; byte-deterministic given equal inputs.

    csv:   long form, one state per row (state, A_me, A_mi, A_wc, clean).
    table: wide form, 7 columns (clean, S0..S5), rows A_me / A_mi / A_wc.
    json:  full document with metadata and exact row values.

    The csv/table formats carry the run metadata as a single leading
    comment line so every output file is self-reproducing.
    """
    comment = "# metadata: " + json.dumps(metadata or {}, sort_keys=True) + "\n"
    if format == "csv":
        lines = ["state,A_me,A_mi,A_wc,clean"]
        lines += [
            f"{r.state},{r.a_me!r},{r.a_mi!r},{r.a_wc!r},{r.clean!r}"
            for r in rows
        ]
        body = comment + "\n".join(lines) + "\n"
    elif format == "table":
        by_state = {r.state: r for r in rows}
        ordered = [by_state[name] for name in STATE_NAMES if name in by_state]
        lines = ["clean," + ",".join(r.state for r in ordered)]
        for metric in ("a_me", "a_mi", "a_wc"):
            clean = repr(ordered[0].clean) if ordered else ""
            lines.append(
                clean + "," + ",".join(repr(getattr(r, metric)) for r in ordered)
            )
        body = comment + "\n".join(lines) + "\n"
    elif format == "json":
        doc = {
            "metadata": metadata,
            "rows": [
                {
                    "state": r.state,
                    "A_me": r.a_me,
                    "A_mi": r.a_mi,
                    "A_wc": r.a_wc,
                    "clean": r.clean,
                }
                for r in rows
            ],
        }
        body = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    else:
        raise ValueError(f"unknown report format {format!r}")
    with open(path, "w") as fh:
        fh.write(body)
    return path


def parse_report_json(path):
    """Reconstruct ReportRows exactly from an emitted json report."""
    with open(path) as fh:
        doc = json.load(fh)
    rows = [
        ReportRow(r["state"], r["A_me"], r["A_mi"], r["A_wc"], r["clean"])
        for r in doc["rows"]
    ]
    return rows, doc["metadata"]
