"""Command-line pipeline: train -> calibrate -> evaluate -> diagnose.

Each stage reads the previous stage's files from the output directory, so
stages are independently rerunnable. Every output document embeds the
exact configuration and seeds that produced it.
"""

import argparse
import copy
import json
import os
import sys

import numpy as np

from . import attacks, data, diagnostics, harness, losses, models, sets

DEFAULT_CONFIG = {
    "dataset": {
        "seed": 7,
        "test_seed": 8,
        "n_classes": 3,
        "height": 8,
        "width": 8,
        "n_per_class_train": 60,
        "n_per_class_test": 34,
        "noise": 0.2,
        "contrast": 0.15,
    },
    "model": {"hidden": [32], "init_seed": 0},
    "train": {"epochs": 40, "lr": 0.5, "seed": 0},
    "adversarial": {"epochs": 40, "lr": 0.5, "seed": 1, "steps": 10},
    "surrogates": {"seeds": [11, 12, 13, 14], "epochs": 40, "lr": 0.5},
    "attack": {"steps": 20, "random_start": False, "seed": 0},
    "calibration": {"threshold": 0.01, "rel_tol": 1e-3, "eps_seed": 1e-4},
    "evaluate": {"target": "adversarial"},
    "diagnostics": {"bins": 20, "top_n": 10, "dominance_threshold": 0.5},
}

# design-decision defaults echoed into every report header
CONVENTIONS = {
    "flow_units": "normalized coordinates (image spans [0,1] per axis); "
    "norms on the flattened 2*H*W displacement vector",
    "pgd": {
        "alpha": "epsilon / steps",
        "steps_eval": 20,
        "steps_at_inner": 10,
        "random_start_default": False,
        "linf_step": "sign(grad)",
        "l2_step": "grad / ||grad||_2",
        "l1_step": "top-k sparse sign step, k = ceil(0.1 * d), "
        "clamp-saturated pixels masked out",
        "zero_gradient": "zero step, attack continues",
        "projection_order": "norm-project the perturbation, then clamp to [0,1]",
    },
    "delta_ell": "cross-entropy on the target model regardless of surrogate",
    "dominance": "max over wrong classes of mean confidence across the "
    "trailing half of the trace",
}


class ConfigError(ValueError):
    pass


def _merge(base, extra):
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path=None, seed=None):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = _merge(cfg, user)
    if seed is not None:
        cfg["dataset"]["seed"] = seed + 7
        cfg["dataset"]["test_seed"] = seed + 8
        cfg["train"]["seed"] = seed
        cfg["adversarial"]["seed"] = seed + 1
        cfg["surrogates"]["seeds"] = [seed + 11 + i for i in range(4)]
        cfg["attack"]["seed"] = seed
    return cfg


def _datasets(cfg):
    d = cfg["dataset"]
    common = dict(
        n_classes=d["n_classes"],
        height=d["height"],
        width=d["width"],
        noise=d["noise"],
        contrast=d["contrast"],
    )
    train = data.generate_dataset(
        d["seed"], n_per_class=d["n_per_class_train"], split="train", **common
    )
    test = data.generate_dataset(
        d["test_seed"], n_per_class=d["n_per_class_test"], split="test", **common
    )
    return train, test


def _spec(cfg, init_seed=None):
    d, m = cfg["dataset"], cfg["model"]
    return models.ModelSpec(
        height=d["height"],
        width=d["width"],
        hidden=tuple(m["hidden"]),
        n_classes=d["n_classes"],
        init_seed=m["init_seed"] if init_seed is None else init_seed,
    )


def _write_json(path, doc):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def _metadata(cfg):
    return {"config": cfg, "conventions": CONVENTIONS}


def _load_model(out, name):
    path = os.path.join(out, name + ".ckpt")
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"missing checkpoint {path}; run `advgrid train` first"
        )
    return models.load_checkpoint(path).model()


BUDGETS_FILE = "budgets.json"
SURROGATE_IDS = ("s0", "s1", "s2", "s3")


def _budget_key(family, norm):
    return f"{family}:{norm}"


def _load_budgets(out):
    path = os.path.join(out, BUDGETS_FILE)
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"missing budget table {path}; run `advgrid calibrate` first"
        )
    with open(path) as fh:
        return json.load(fh)


def _at_epsilon(cfg, out, standard_model, test):
    """Intensity-linf budget for adversarial training: the calibrated one
    if a budget table exists, else calibrate it now from the standard
    model."""
    path = os.path.join(out, BUDGETS_FILE)
    if os.path.exists(path):
        doc = _load_budgets(out)
        key = _budget_key(sets.INTENSITY, sets.LINF)
        if key in doc["budgets"]:
            return doc["budgets"][key]
    cal = cfg["calibration"]
    return sets.calibrate_epsilon(
        standard_model,
        sets.INTENSITY,
        sets.LINF,
        test,
        threshold=cal["threshold"],
        eps_seed=cal["eps_seed"],
        rel_tol=cal["rel_tol"],
    )


def cmd_train(args):
    cfg = load_config(args.config, args.seed)
    os.makedirs(args.out, exist_ok=True)
    train, test = _datasets(cfg)
    tr = cfg["train"]

    std = models.train_standard(
        _spec(cfg), train, epochs=tr["epochs"], lr=tr["lr"], seed=tr["seed"]
    )
    models.save_checkpoint(std, os.path.join(args.out, "standard.ckpt"))
    std_model = std.model()
    print(f"standard: clean accuracy {models.accuracy(std_model, test):.3f}")

    su = cfg["surrogates"]
    for ident, seed in zip(SURROGATE_IDS, su["seeds"]):
        ckpt = models.train_standard(
            _spec(cfg, init_seed=seed), train,
            epochs=su["epochs"], lr=su["lr"], seed=seed,
        )
        models.save_checkpoint(ckpt, os.path.join(args.out, f"surrogate_{ident}.ckpt"))
        print(f"surrogate {ident}: clean accuracy "
              f"{models.accuracy(ckpt.model(), test):.3f}")

    at = cfg["adversarial"]
    eps = _at_epsilon(cfg, args.out, std_model, test)
    at_cfg = attacks.AttackConfig(
        sets.PerturbationSet(sets.INTENSITY, sets.LINF, eps),
        losses.SurrogateLoss(losses.CE),
        steps=at["steps"],
        seed=cfg["attack"]["seed"],
    )
    adv = models.train_adversarial(
        _spec(cfg), train, epochs=at["epochs"], lr=at["lr"], seed=at["seed"],
        attack_cfg=at_cfg,
    )
    models.save_checkpoint(adv, os.path.join(args.out, "adversarial.ckpt"))
    print(f"adversarial (eps={eps:g}): clean accuracy "
          f"{models.accuracy(adv.model(), test):.3f}")
    return 0


def cmd_calibrate(args):
    cfg = load_config(args.config, args.seed)
    os.makedirs(args.out, exist_ok=True)
    std = _load_model(args.out, "standard")
    _, test = _datasets(cfg)
    cal = cfg["calibration"]
    budgets, failures = {}, {}
    for family in sets.FAMILIES:
        for norm in sets.NORMS:
            key = _budget_key(family, norm)
            try:
                budgets[key] = sets.calibrate_epsilon(
                    std, family, norm, test,
                    threshold=cal["threshold"],
                    eps_seed=cal["eps_seed"],
                    rel_tol=cal["rel_tol"],
                )
                print(f"{key}: eps = {budgets[key]!r}")
            except sets.CalibrationError as exc:
                failures[key] = {
                    "error": str(exc),
                    "residual_accuracy": exc.residual_accuracy,
                }
                print(f"{key}: calibration failed ({exc})")
    _write_json(
        os.path.join(args.out, BUDGETS_FILE),
        {"budgets": budgets, "failures": failures, "metadata": _metadata(cfg)},
    )
    return 0


def _grid_axes(cfg, out):
    doc = _load_budgets(out)
    psets = []
    for family in sets.FAMILIES:
        for norm in sets.NORMS:
            key = _budget_key(family, norm)
            if key not in doc["budgets"]:
                raise ConfigError(
                    f"budget table lacks {key} "
                    f"(calibration failure: {doc['failures'].get(key)})"
                )
            psets.append(sets.PerturbationSet(family, norm, doc["budgets"][key]))
    methods = [attacks.WHITE_BOX] + [
        attacks.AttackMethod("transfer", ident) for ident in SURROGATE_IDS
    ]
    return psets, methods


def cmd_evaluate(args):
    cfg = load_config(args.config, args.seed)
    os.makedirs(args.out, exist_ok=True)
    target = _load_model(args.out, cfg["evaluate"]["target"])
    surrogates = {
        ident: _load_model(args.out, f"surrogate_{ident}")
        for ident in SURROGATE_IDS
    }
    _, test = _datasets(cfg)
    psets, methods = _grid_axes(cfg, args.out)
    grid = harness.build_grid(psets, cfg["dataset"]["n_classes"], methods)

    if args.state:
        columns = dict(harness.builtin_states(grid)).get(args.state)
        if columns is None:
            raise ConfigError(f"unknown state {args.state!r}")
        grid = harness.EvaluationGrid(
            grid.psets, grid.loss_family, grid.methods,
            [grid.cells[i] for i in columns],
        )

    defaults = {
        "steps": cfg["attack"]["steps"],
        "random_start": cfg["attack"]["random_start"],
        "seed": cfg["attack"]["seed"],
    }
    matrix = harness.run_grid(
        target, test, grid,
        attack_defaults=defaults,
        surrogates=surrogates,
        outcome_dir=os.path.join(args.out, "outcomes"),
        jobs=args.jobs,
        resume=args.resume,
    )
    clean = models.accuracy(target, test)
    if args.state:
        rows = [harness.aggregate_state(matrix, range(len(grid)), clean, args.state)]
    else:
        rows = harness.state_report(matrix, grid, clean)

    metadata = _metadata(cfg)
    metadata["attack_defaults"] = defaults
    metadata["per_cell_accuracy"] = {
        cell.ident: harness.accuracy_per_cell(matrix, i)
        for i, cell in enumerate(grid.cells)
    }
    harness.emit_report(rows, metadata, os.path.join(args.out, "report.csv"), "csv")
    harness.emit_report(rows, metadata, os.path.join(args.out, "table.csv"), "table")
    harness.emit_report(rows, metadata, os.path.join(args.out, "report.json"), "json")
    for row in rows:
        print(f"{row.state}: A_me={row.a_me:.3f} A_mi={row.a_mi:.3f} "
              f"A_wc={row.a_wc:.3f} clean={row.clean:.3f}")
    return 0


class _DigestOutcome:
    """Adapter giving stored cell digests the outcome interface the
    diagnostics expect."""

    def __init__(self, success, delta_ell, trace, label):
        self.success = success
        self.delta_ell = delta_ell
        self.trace = np.asarray(trace)
        self.label = label


def _trace_cell_digest(out):
    path = os.path.join(out, "outcomes", "cell_I-linf_ce_whitebox.json")
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"missing attack outcomes {path}; run `advgrid evaluate` first"
        )
    with open(path) as fh:
        digest = json.load(fh)
    return [
        _DigestOutcome(s, d, t, l)
        for s, d, t, l in zip(
            digest["success"], digest["delta_ell"],
            digest["traces"], digest["labels"],
        )
    ]


def cmd_diagnose(args):
    cfg = load_config(args.config, args.seed)
    dg = cfg["diagnostics"]
    bins = args.bins if args.bins else dg["bins"]
    outcomes = _trace_cell_digest(args.out)
    hist = diagnostics.histogram_delta_ell(outcomes, bin_count=bins)
    traps = diagnostics.detect_traps(
        outcomes, top_n=dg["top_n"], dominance_threshold=dg["dominance_threshold"]
    )
    doc = {
        "histogram": hist,
        "traps": [
            {
                "sample_id": t.sample_id,
                "delta_ell": t.delta_ell,
                "dominance": t.dominance,
                "flagged": t.flagged,
            }
            for t in traps
        ],
        "metadata": _metadata(cfg),
    }
    _write_json(os.path.join(args.out, "diagnostics.json"), doc)
    flagged = sum(t.flagged for t in traps)
    print(f"overlap mass: {hist['overlap_mass']}")
    print(f"gradient traps flagged: {flagged} of {len(traps)} inspected")
    return 0


def cmd_demo_toy(args):
    report = diagnostics.toy_inconsistency_demo(
        (args.x[0], args.x[1]), args.y, args.eps, grid_resolution=args.resolution
    )
    os.makedirs(args.out, exist_ok=True)
    doc = {
        "x": list(report.x),
        "y": report.y,
        "eps": report.eps,
        "grid_resolution": report.grid_resolution,
        "ce_argmax_point": list(report.ce_argmax_point),
        "ce_argmax_value": report.ce_argmax_value,
        "ce_argmax_zero_one": report.ce_argmax_zero_one,
        "misclassified_exists": report.misclassified_exists,
        "misclassified_example": (
            list(report.misclassified_example)
            if report.misclassified_example is not None else None
        ),
        "inconsistency": report.inconsistency,
        "weights": diagnostics.TOY_WEIGHTS.tolist(),
    }
    _write_json(os.path.join(args.out, "toy_demo.json"), doc)
    print(f"inconsistency: {report.inconsistency}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="advgrid",
        description="Worst-case adversarial-robustness evaluation harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (overrides defaults)")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", default="runs", help="output directory")

    p = sub.add_parser("train", help="train standard, adversarial, and surrogate models")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="calibrate perturbation budgets")
    common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="run the attack grid and emit reports")
    common(p)
    p.add_argument("--state", help="restrict to one built-in state (S0..S5)")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                   help="parallel workers for grid cells")
    p.add_argument("--resume", action="store_true",
                   help="skip cells with persisted outcomes")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", help="histogram delta-ell and detect gradient traps")
    common(p)
    p.add_argument("--bins", type=int, help="histogram bin count")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("demo-toy", help="surrogate / 0-1 loss inconsistency demo")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--x", type=float, nargs=2, default=(-0.5, 0.45))
    p.add_argument("--y", type=int, default=0)
    p.add_argument("--eps", type=float, default=0.2)
    p.add_argument("--resolution", type=int, default=201)
    p.set_defaults(func=cmd_demo_toy)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, models.CheckpointFormatError,
            models.TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, data.ConfigurationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
