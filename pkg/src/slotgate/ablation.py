"""Scripted ablation sweeps over selection components, gates, the novelty
threshold and the slot budget, with per-variant replicates."""

import os
import traceback
from dataclasses import dataclass, field

import numpy as np

from .metrics import evaluate_model
from .scenes import load_dataset, parse_key_values
from .training import TrainConfig, fit, load_checkpoint

AXES = ("components", "gates", "mu", "kmax")

METRIC_KEYS = ("mbo_i", "mbo_c", "miou", "mean_inferred_k", "k_correlation")


@dataclass
class AblationPlan:
    axis: str
    variants: list                      # [(name, {field: raw_value})]
    replicates: int = 3
    base_config: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"unknown ablation axis: {self.axis!r}")
        if not self.variants:
            raise ValueError("ablation plan has no variants")
        if self.replicates < 1:
            raise ValueError(f"replicates must be >= 1, got {self.replicates}")
        valid = set(TrainConfig().to_mapping())
        for name, deltas in self.variants:
            unknown = set(deltas) - valid
            if unknown:
                raise ValueError(
                    f"variant {name!r} names unknown config fields: {sorted(unknown)}"
                )


def components_variants() -> list:
    """Selection-component toggles, weakest configuration first."""
    return [
        ("all-off", {"use_coverage": "false"}),
        ("coverage-only", {"order_by_quality": "false", "mu": "0.0"}),
        ("coverage+quality", {"mu": "0.0"}),
        ("full", {}),
    ]


def gates_variants() -> list:
    """Gate toggles: a disabled gate path is forced to 1 via its floor."""
    return [
        ("no-gate", {"eps1": "1.0", "eps2": "1.0"}),
        ("g2-only", {"eps1": "1.0"}),
        ("g1-only", {"eps2": "1.0"}),
        ("g1+g2", {}),
    ]


def mu_variants(grid=(0.0, 0.1, 0.2, 0.3, 0.4, 0.5)) -> list:
    return [(f"mu={v:g}", {"mu": repr(float(v))}) for v in grid]


def kmax_variants(values) -> list:
    return [(f"kmax={v}", {"k_max": str(int(v))}) for v in values]


def default_variants(axis: str) -> list:
    if axis == "components":
        return components_variants()
    if axis == "gates":
        return gates_variants()
    if axis == "mu":
        return mu_variants()
    raise ValueError(f"axis {axis!r} needs explicit variants")


def apply_deltas(base: TrainConfig, deltas: dict, seed: int) -> TrainConfig:
    mapping = base.to_mapping()
    mapping.update({k: str(v) for k, v in deltas.items()})
    mapping["seed"] = str(seed)
    return TrainConfig.from_mapping(mapping)


@dataclass
class VariantResult:
    name: str
    deltas: dict
    seeds: list
    metrics: dict                # metric -> list of per-seed values
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return bool(self.metrics.get("mbo_i"))

    def mean(self, key: str) -> float:
        vals = self.metrics.get(key, [])
        return float(np.mean(vals)) if vals else float("nan")

    def sd(self, key: str) -> float:
        vals = self.metrics.get(key, [])
        return float(np.std(vals)) if len(vals) > 1 else 0.0


@dataclass
class AblationResult:
    plan: AblationPlan
    rows: list                   # [VariantResult] in plan order
    trend_flags: dict            # metric -> means monotone nondecreasing?

    def by_name(self, name: str) -> VariantResult:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)


def run_ablation(plan: AblationPlan, train_dir, eval_dir, out_dir,
                 progress=None) -> AblationResult:
    """Train every variant × replicate, evaluate, aggregate.

    A failed run is recorded on its variant and skipped in the stats;
    it never aborts the sweep.
    """
    os.makedirs(out_dir, exist_ok=True)
    _, eval_samples = load_dataset(eval_dir)
    rows = []
    for name, deltas in plan.variants:
        metrics = {k: [] for k in METRIC_KEYS}
        seeds, failures = [], []
        for rep in range(plan.replicates):
            seed = plan.base_config.seed + rep
            run_dir = os.path.join(out_dir, f"{_safe(name)}_seed{seed}")
            try:
                cfg = apply_deltas(plan.base_config, deltas, seed)
                ckpt, _ = fit(train_dir, cfg, run_dir)
                model, _, _ = load_checkpoint(ckpt)
                report = evaluate_model(model, eval_samples, cfg.batch_size)
                metrics["mbo_i"].append(report.mbo_i)
                metrics["mbo_c"].append(report.mbo_c)
                metrics["miou"].append(report.miou)
                metrics["mean_inferred_k"].append(report.mean_inferred_k)
                metrics["k_correlation"].append(report.k_correlation)
                seeds.append(seed)
            except Exception as exc:  # noqa: BLE001 - sweep must survive
                failures.append(f"seed {seed}: {exc}")
                with open(os.path.join(out_dir, "failures.log"), "a",
                          encoding="utf-8") as fh:
                    fh.write(f"[{name} seed={seed}]\n{traceback.format_exc()}\n")
            if progress is not None:
                progress(name, rep)
        rows.append(VariantResult(name, dict(deltas), seeds, metrics, failures))

    trend_flags = {}
    for key in ("mbo_i", "mbo_c", "miou"):
        means = [r.mean(key) for r in rows if r.ok]
        trend_flags[key] = bool(
            len(means) >= 2 and all(b >= a - 1e-12 for a, b in zip(means, means[1:]))
        )
    result = AblationResult(plan=plan, rows=rows, trend_flags=trend_flags)
    with open(os.path.join(out_dir, "ablation_table.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(format_table(result))
    return result


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_=." else "_" for c in name)


def format_table(result: AblationResult) -> str:
    lines = [
        f"axis={result.plan.axis} replicates={result.plan.replicates}",
        "",
        f"{'variant':<20} {'runs':>4}  "
        + "  ".join(f"{k:>18}" for k in ("mbo_i", "mbo_c", "miou", "mean_k")),
    ]
    for row in result.rows:
        cells = []
        for key in ("mbo_i", "mbo_c", "miou", "mean_inferred_k"):
            if row.ok:
                cells.append(f"{row.mean(key):.4f} ± {row.sd(key):.4f}")
            else:
                cells.append("failed")
        lines.append(
            f"{row.name:<20} {len(row.seeds):>4}  "
            + "  ".join(f"{c:>18}" for c in cells)
        )
        for failure in row.failures:
            lines.append(f"    ! {failure}")
    lines.append("")
    for key, flag in result.trend_flags.items():
        lines.append(f"trend_monotone[{key}]={str(flag).lower()}")
    return "\n".join(lines) + "\n"


def parse_plan_file(path):
    """Plan text: global key=value lines, then [variant NAME] delta blocks.

    Global keys: axis, replicates, train_data, eval_data and base.FIELD
    overrides of the default train config. Returns (plan, train_data,
    eval_data).
    """
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    globals_kv: dict = {}
    variants: list = []
    current: dict | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            header = line[1:-1].strip()
            if not header.startswith("variant "):
                raise ValueError(f"line {lineno}: expected [variant NAME]")
            current = {}
            variants.append((header[len("variant "):].strip(), current))
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if current is None:
            globals_kv[key] = value
        else:
            current[key] = value

    axis = globals_kv.pop("axis", None)
    if axis is None:
        raise ValueError("plan file missing axis=")
    replicates = int(globals_kv.pop("replicates", "3"))
    train_data = globals_kv.pop("train_data", None)
    eval_data = globals_kv.pop("eval_data", None)
    base_kv = {}
    for key, value in globals_kv.items():
        if not key.startswith("base."):
            raise ValueError(f"unexpected plan key: {key!r}")
        base_kv[key[len("base."):]] = value
    base = TrainConfig.from_mapping({**TrainConfig().to_mapping(), **base_kv})
    if not variants:
        variants = default_variants(axis)
    plan = AblationPlan(axis=axis, variants=variants, replicates=replicates,
                        base_config=base)
    return plan, train_data, eval_data
