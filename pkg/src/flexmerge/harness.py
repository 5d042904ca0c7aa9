"""Experiment plans, the generate-to-report pipeline and result bundles.

A plan is a JSON document validated against :data:`PLAN_SCHEMA`.  The
pipeline runs the stages ``generate``, ``split``, ``fit-toolkit``,
``fit-vmm``, ``predict``, ``passthrough``, ``inference`` and ``report``.  A
stage that raises a package error is recorded in the bundle's
``manifest.json`` and every stage depending on it is skipped.  Markets where
any equilibrium solve failed are listed in the manifest and left out of the
tables.

Every table CSV is an aggregate of a persisted prediction CSV, and bundles
contain no timings, so re-running a plan reproduces them byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import counterfactual as cf
from . import inference, toolkit, validators, vmm
from .datagen import TEST, TRAIN, Dataset, ScenarioConfig, apply_merger, generate, load_dataset, save_dataset, split, summary_statistics
from .equilibrium import SolverConfig
from .errors import FlexMergeError, InvalidInput
from .market_model import ConductSpec

TABLES = ("merger", "fit", "passthrough", "inference", "validators", "summary")
# percent prediction errors; the outer bins are open-ended
HISTOGRAM_EDGES = tuple(float(v) for v in np.round(np.linspace(-50.0, 50.0, 41), 10))
STAGES = ("generate", "split", "fit-toolkit", "fit-vmm", "predict", "passthrough", "inference", "report")

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_CONDUCT = {
    "type": "object",
    "required": ["kind"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["Bertrand", "Monopoly", "PerfectCompetition", "ProfitWeight"]},
        "kappa": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
    },
}

PLAN_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "flexmerge experiment plan",
    "type": "object",
    "required": ["scenario", "estimators"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "scenario": {
            "type": "object",
            "required": ["seed"],
            "additionalProperties": False,
            "properties": {
                "T": {"type": "integer", "minimum": 1},
                "firm_counts": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "firm_weights": {"type": "array", "items": _NUM, "minItems": 1},
                "demand": {
                    "type": "object",
                    "required": ["alpha", "beta"],
                    "additionalProperties": False,
                    "properties": {"alpha": _NUM, "beta": {"type": "array", "items": _NUM}},
                },
                "gamma": {"type": "array", "items": _NUM},
                "shock_corr": _NUM,
                "char_mean": _NUM,
                "char_sd": {"type": "number", "minimum": 0},
                "conduct": _CONDUCT,
                "seed": {"type": "integer", "minimum": 0},
                "split_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "target_observations": {"type": ["integer", "null"], "minimum": 1},
            },
        },
        "estimators": {
            "type": "array",
            "minItems": 1,
            "items": {
                "oneOf": [
                    {
                        "type": "object",
                        "required": ["kind", "conduct"],
                        "additionalProperties": False,
                        "properties": {"kind": {"const": "toolkit"}, "label": {"type": "string"}, "conduct": _CONDUCT},
                    },
                    {
                        "type": "object",
                        "required": ["kind", "config"],
                        "additionalProperties": False,
                        "properties": {
                            "kind": {"const": "vmm"},
                            "label": {"type": "string"},
                            "config": {"type": "object", "required": ["seed"], "properties": {"seed": {"type": "integer", "minimum": 0}}},
                            "encoding": {"type": "object"},
                        },
                    },
                ]
            },
        },
        "merger": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"merging": {"type": "array", "items": _INT, "minItems": 2, "maxItems": 2}},
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"type": "integer", "minimum": 1},
                "damping": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "method": {"enum": ["ZetaFixedPoint", "NewtonRoot", "Hybrid"]},
            },
        },
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tables": {"type": "array", "items": {"enum": list(TABLES)}, "uniqueItems": True},
                "histogram_edges": {"type": "array", "items": _NUM, "minItems": 2, "default": list(HISTOGRAM_EDGES)},
                "inference": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                        "method": {"enum": [inference.HOLM_EXACT, inference.BONFERRONI]},
                        "n_points": {"type": "integer", "minimum": 1},
                        "variance": {"type": "object"},
                    },
                },
            },
        },
    },
}


def plan_schema() -> dict:
    return json.loads(json.dumps(PLAN_SCHEMA))


# ---------------------------------------------------------------------------
# plans


@dataclass(frozen=True)
class EstimatorSpec:
    kind: str
    label: str
    conduct: ConductSpec | None = None
    config: vmm.VmmConfig | None = None
    encoding: vmm.SupplyEncoding | None = None

    def to_dict(self) -> dict:
        if self.kind == "toolkit":
            return {"kind": "toolkit", "label": self.label, "conduct": self.conduct.to_dict()}
        return {"kind": "vmm", "label": self.label, "config": self.config.to_dict(), "encoding": self.encoding.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "EstimatorSpec":
        if d["kind"] == "toolkit":
            c = ConductSpec.from_dict(d["conduct"])
            return cls("toolkit", d.get("label", c.label), conduct=c)
        return cls(
            "vmm", d.get("label", "VMM"),
            config=vmm.VmmConfig.from_dict(d["config"]),
            encoding=vmm.SupplyEncoding(**d.get("encoding", {})),
        )


@dataclass(frozen=True)
class InferenceSpec:
    alpha: float = 0.05
    method: str = inference.HOLM_EXACT
    n_points: int = 1
    variance: inference.VarianceConfig = field(default_factory=inference.VarianceConfig)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "method": self.method, "n_points": self.n_points, "variance": self.variance.to_dict()}


@dataclass(frozen=True)
class ExperimentPlan:
    scenario: ScenarioConfig
    estimators: tuple
    name: str = "experiment"
    merging: tuple = (1, 2)
    solver: SolverConfig = field(default_factory=SolverConfig)
    tables: tuple = TABLES
    histogram_edges: tuple = HISTOGRAM_EDGES
    inference: InferenceSpec = field(default_factory=InferenceSpec)

    def __post_init__(self):
        if not self.estimators:
            raise InvalidInput("a plan needs at least one estimator")
        labels = [e.label for e in self.estimators]
        if len(set(labels)) != len(labels):
            raise InvalidInput(f"estimator labels must be unique, got {labels}")
        edges = np.asarray(self.histogram_edges, dtype=float)
        if edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise InvalidInput("histogram edges must be strictly increasing")

    @property
    def toolkit_estimators(self) -> list:
        return [e for e in self.estimators if e.kind == "toolkit"]

    @property
    def vmm_estimators(self) -> list:
        return [e for e in self.estimators if e.kind == "vmm"]

    def with_seed(self, seed) -> "ExperimentPlan":
        sc = ScenarioConfig.from_dict({**self.scenario.to_dict(), "seed": int(seed)})
        return ExperimentPlan(sc, self.estimators, self.name, self.merging, self.solver, self.tables, self.histogram_edges, self.inference)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "scenario": self.scenario.to_dict(),
            "estimators": [e.to_dict() for e in self.estimators],
            "merger": {"merging": list(self.merging)},
            "solver": {"tol": self.solver.tol, "max_iter": self.solver.max_iter, "damping": self.solver.damping, "method": self.solver.method.value},
            "evaluation": {"tables": list(self.tables), "histogram_edges": list(self.histogram_edges), "inference": self.inference.to_dict()},
        }

    @classmethod
    def from_dict(cls, d) -> "ExperimentPlan":
        try:
            jsonschema.validate(d, PLAN_SCHEMA)
        except jsonschema.ValidationError as e:
            path = "/".join(str(p) for p in e.absolute_path) or "<root>"
            raise InvalidInput(f"plan does not match schema at {path}: {e.message}") from None
        ev = d.get("evaluation", {})
        inf = ev.get("inference", {})
        try:
            return cls(
                scenario=ScenarioConfig.from_dict(d["scenario"]),
                estimators=tuple(EstimatorSpec.from_dict(e) for e in d["estimators"]),
                name=d.get("name", "experiment"),
                merging=tuple(d.get("merger", {}).get("merging", (1, 2))),
                solver=SolverConfig(**d.get("solver", {})),
                tables=tuple(ev.get("tables", TABLES)),
                histogram_edges=tuple(float(v) for v in ev.get("histogram_edges", HISTOGRAM_EDGES)),
                inference=InferenceSpec(
                    inf.get("alpha", 0.05), inf.get("method", inference.HOLM_EXACT), inf.get("n_points", 1),
                    inference.VarianceConfig.from_dict(inf.get("variance", {})),
                ),
            )
        except TypeError as e:
            raise InvalidInput(f"invalid plan: {e}") from None


def load_plan(path, seed=None) -> ExperimentPlan:
    """Read and validate a JSON plan; ``seed`` overrides the scenario seed."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise InvalidInput(f"cannot read plan {path}: {e}") from None
    plan = ExperimentPlan.from_dict(raw)
    return plan if seed is None else plan.with_seed(seed)


def default_plan(conduct: ConductSpec | None = None, T: int = 1000, seed: int = 0, triopoly_only: bool = False, vmm_config=None, name=None) -> ExperimentPlan:
    """Plan with the standard toolkit models, the true conduct model and one VMM estimator."""
    conduct = conduct or ConductSpec.bertrand()
    counts = ((3,), (1.0,)) if triopoly_only else ((2, 3), (0.5, 0.5))
    scen = ScenarioConfig(T=T, firm_counts=counts[0], firm_weights=counts[1], conduct=conduct, seed=seed)
    models = [ConductSpec.bertrand(), ConductSpec.monopoly(), ConductSpec.perfect_competition()]
    if conduct not in models:
        models.append(conduct)
    ests = [EstimatorSpec("toolkit", m.label, conduct=m) for m in models]
    ests.append(EstimatorSpec("vmm", "VMM", config=vmm_config or vmm.VmmConfig(seed=seed), encoding=vmm.SupplyEncoding()))
    return ExperimentPlan(scen, tuple(ests), name or f"{conduct.label}_{'triopoly' if triopoly_only else 'mixed'}_T{T}")


# ---------------------------------------------------------------------------
# pipeline


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", label).strip("_")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return int(v)
    return v


def write_rows(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(columns)
        for r in rows:
            wr.writerow([_fmt(r[c]) for c in columns])


def _dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class RunResult:
    plan: ExperimentPlan
    out: Path | None
    stages: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    nonconverged: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    dataset: Dataset | None = None
    toolkit_fits: dict = field(default_factory=dict)
    vmm_fits: dict = field(default_factory=dict)
    merged: Dataset | None = None
    truth: object = None
    predictions: dict = field(default_factory=dict)
    mask: np.ndarray | None = None

    @property
    def status(self) -> str:
        if self.failures:
            return "failed"
        if any(self.nonconverged.values()):
            return "partial"
        return "ok"

    @property
    def exit_code(self) -> int:
        return 0 if self.status == "ok" else 2

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def directory(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.mkdir(parents=True, exist_ok=True)
        return p


def _run_stage(res: RunResult, name, fn, needs=()) -> bool:
    if any(res.stages.get(n) != "ok" for n in needs):
        res.stages[name] = "skipped"
        return False
    try:
        fn(res)
    except FlexMergeError as e:
        res.stages[name] = "failed"
        entry = {"stage": name, "error": type(e).__name__, "message": str(e)}
        markets = getattr(e, "markets", None) or ([e.market_id] if getattr(e, "market_id", None) is not None else [])
        if markets:
            entry["markets"] = [int(m) for m in markets]
        res.failures.append(entry)
        return False
    res.stages[name] = "ok"
    return True


def _stage_generate(res: RunResult, data_dir=None):
    if data_dir is not None:
        res.dataset = load_dataset(data_dir)
    else:
        res.dataset = generate(res.plan.scenario, res.plan.solver)


def _stage_split(res: RunResult):
    ds = res.dataset
    if ds.split_labels is None:
        ds = split(ds, res.plan.scenario.split_fraction, res.plan.scenario.seed)
    if not any(lbl == TEST for lbl in ds.split_labels) or not any(lbl == TRAIN for lbl in ds.split_labels):
        raise InvalidInput("the split left the training or test sample empty")
    res.dataset = ds
    if res.out is not None:
        save_dataset(ds, res.directory("data"))


def _stage_fit_toolkit(res: RunResult, fits_dir=None):
    train = res.dataset.split_subset(TRAIN)
    for est in res.plan.toolkit_estimators:
        src = None if fits_dir is None else Path(fits_dir) / "toolkit" / _slug(est.label)
        if src is not None and (src / "toolkit_fit.json").exists():
            res.toolkit_fits[est.label] = toolkit.load_fit(src)
        else:
            res.toolkit_fits[est.label] = toolkit.fit(train, est.conduct)
        if res.out is not None:
            toolkit.save_fit(res.toolkit_fits[est.label], res.directory("fits", "toolkit", _slug(est.label)))


def _stage_fit_vmm(res: RunResult, fits_dir=None):
    for est in res.plan.vmm_estimators:
        src = None if fits_dir is None else Path(fits_dir) / "vmm" / _slug(est.label)
        if src is not None and (src / "h.ckpt").exists():
            res.vmm_fits[est.label] = vmm.load_result(src)
        else:
            res.vmm_fits[est.label] = vmm.fit(res.dataset, est.config, est.encoding)
        if res.out is not None:
            vmm.save_result(res.vmm_fits[est.label], res.directory("fits", "vmm", _slug(est.label)))


def _stage_predict(res: RunResult):
    ds = res.dataset
    test = ds.split_subset(TEST)
    merged = apply_merger(test, res.plan.merging)
    res.merged = merged
    res.truth = toolkit.true_post_merger(merged, res.plan.solver)
    eqs = {}
    for label, f in res.toolkit_fits.items():
        om = toolkit.implied_shocks(test, f)
        eqs[label] = toolkit.predict_merger(merged, f, cfg=res.plan.solver, omega=om)
    for label, r in res.vmm_fits.items():
        omh = cf.flexible_shocks(test, r.supply)
        eqs[label] = cf.predict_merger_flexible(merged, r.supply, omh, cfg=res.plan.solver)
    res.predictions = eqs
    sizes = merged.sizes
    ok = np.ones(len(merged), dtype=bool)
    for label, eq in [("True", res.truth), *eqs.items()]:
        bad = eq.failed
        res.nonconverged[label] = [int(merged.market_ids[i]) for i in bad]
        ok[bad] = False
    res.mask = np.repeat(np.asarray(merged.affected) & ok, sizes)
    if not res.mask.any():
        raise InvalidInput("no converged merger-affected markets to evaluate")


def _percent_errors(pred, true):
    return 100.0 * (pred - true) / true


def _merger_tables(res: RunResult):
    merged, mask = res.merged, res.mask
    truth = res.truth.prices
    preds = {label: eq.prices for label, eq in res.predictions.items()}
    if res.out is not None:
        cf.write_predictions(res.path("predictions.csv"), merged, preds, truth=truth, mask=mask)
    rows, hist = [], []
    edges = np.concatenate([[-np.inf], res.plan.histogram_edges, [np.inf]])
    for label, p in preds.items():
        rep = cf.prediction_error_report(p, truth, mask=mask)
        rows.append({"model": label, **rep.as_row()})
        counts, _ = np.histogram(_percent_errors(p[mask], truth[mask]), bins=edges)
        hist += [{"model": label, "bin_lo": edges[i], "bin_hi": edges[i + 1], "count": int(c)} for i, c in enumerate(counts)]
    res.tables["merger"] = rows
    res.tables["merger_histogram"] = hist
    if res.out is not None:
        write_rows(res.path("table_merger.csv"), ("model", "mse", "n", *[f"pct_q{int(q * 100):02d}" for q in cf.QUANTILES]), rows)
        write_rows(res.path("hist_merger.csv"), ("model", "bin_lo", "bin_hi", "count"), hist)


def _fit_table(res: RunResult):
    """Hold-out fit of pre-merger prices net of shocks, on merger-affected test markets."""
    test = res.dataset.split_subset(TEST)
    aff = np.repeat(np.asarray(res.merged.affected), test.sizes)
    fitted = {"True": test.prices - test.omega}
    for label, f in res.toolkit_fits.items():
        fitted[label] = test.prices - toolkit.implied_shocks(test, f)
    for label, r in res.vmm_fits.items():
        fitted[label] = r.supply.on_dataset(test)
    mids, fids = test.product_market_ids, test.firm_ids
    long, rows = [], []
    for label, fp in fitted.items():
        long += [{"market_id": mids[i], "firm_id": fids[i], "price": test.prices[i], "fitted_price": fp[i], "model": label} for i in np.flatnonzero(aff)]
        rows.append({"model": label, "mse": float(np.mean((test.prices[aff] - fp[aff]) ** 2)), "n": int(aff.sum())})
    res.tables["fit"] = rows
    if res.out is not None:
        write_rows(res.path("fit_predictions.csv"), ("market_id", "firm_id", "price", "fitted_price", "model"), long)
        write_rows(res.path("table_fit.csv"), ("model", "mse", "n"), rows)


def _stage_passthrough(res: RunResult):
    test = res.dataset.split_subset(TEST)
    if res.merged is None:
        res.merged = apply_merger(test, res.plan.merging)
        res.truth = toolkit.true_post_merger(res.merged, res.plan.solver)
    i = cf.median_share_market(res.merged, res.truth.shares)
    m = test.markets[i]
    cost = m.w @ np.asarray(res.plan.scenario.gamma) + m.omega
    mats = {"True": cf.passthrough_matrix(m, cf.StructuralModel(res.plan.scenario.conduct, cost), demand=test.demand, cfg=res.plan.solver)}
    one = test.subset(np.arange(len(test)) == i)
    for label, r in res.vmm_fits.items():
        model = cf.FlexibleModel(r.supply, cf.flexible_shocks(one, r.supply))
        mats[label] = cf.passthrough_matrix(m, model, demand=test.demand, cfg=res.plan.solver, cost_base=cost)
    rows = [
        {"model": label, "market_id": m.market_id, "row": j, "col": k, "value": P[j, k]}
        for label, P in mats.items()
        for j in range(m.J)
        for k in range(m.J)
    ]
    res.tables["passthrough"] = rows
    res.tables["passthrough_matrices"] = mats
    if res.out is not None:
        write_rows(res.path("table_passthrough.csv"), ("model", "market_id", "row", "col", "value"), rows)


def inference_points(dataset: Dataset, n_points: int) -> np.ndarray:
    """Training observations whose prices sit nearest the ``k / (n + 1)`` price quantiles."""
    train = dataset.split_subset(TRAIN)
    p = train.prices
    order = np.argsort(p, kind="stable")
    picks = []
    for k in range(1, n_points + 1):
        q = np.quantile(p, k / (n_points + 1))
        cand = order[np.argmin(np.abs(p[order] - q))]
        picks.append(int(cand))
    return np.array(picks)


def _stage_inference(res: RunResult):
    spec = res.plan.inference
    train = res.dataset.split_subset(TRAIN)
    idx = inference_points(res.dataset, spec.n_points)
    rows = []
    for label, r in res.vmm_fits.items():
        X = vmm.encode_dataset(train, r.supply.enc)[idx]
        ci, _ = inference.point_inference(r, res.dataset, X, spec.alpha, spec.method, spec.variance)
        psi = (train.prices - train.omega)[idx]
        for j in range(idx.size):
            rows.append({
                "model": label, "point_id": j, "market_id": train.product_market_ids[idx[j]], "N": ci.n_obs,
                "psi": psi[j], "psi_hat": ci.centers[j], "sigma": ci.sigmas[j], "se": ci.standard_errors[j],
                "lower": ci.lower[j], "upper": ci.upper[j], "method": ci.method, "alpha": ci.alpha,
                "covers": bool(ci.lower[j] <= psi[j] <= ci.upper[j]),
            })
        if res.out is not None:
            inference.write_ci(res.path(f"ci_{_slug(label)}.csv"), ci)
    res.tables["inference"] = rows
    if res.out is not None:
        cols = ("model", "point_id", "market_id", "N", "psi", "psi_hat", "sigma", "se", "lower", "upper", "method", "alpha", "covers")
        write_rows(res.path("table_inference.csv"), cols, rows)


def _stage_report(res: RunResult):
    if "merger" in res.plan.tables:
        _merger_tables(res)
    if "fit" in res.plan.tables:
        _fit_table(res)


def _side_reports(res: RunResult):
    ds = res.dataset
    if "summary" in res.plan.tables:
        stats = summary_statistics(ds)
        res.tables["summary"] = [{"statistic": k, "value": v} for k, v in stats.items()]
        if res.out is not None:
            write_rows(res.path("summary.csv"), ("statistic", "value"), res.tables["summary"])
    if "validators" in res.plan.tables:
        rep = validators.dataset_report(ds.split_subset(TRAIN))
        res.tables["validators"] = rep
        if res.out is not None:
            rep.write_csv(res.path("validators.csv"))
            res.path("validators.txt").write_text(rep.to_text())


def _finish(res: RunResult) -> RunResult:
    for s in STAGES:
        res.stages.setdefault(s, "not-run")
    if res.out is None:
        return res
    _dump_json(res.path("plan.json"), res.plan.to_dict())
    _dump_json(res.path("plan_schema.json"), PLAN_SCHEMA)
    files = {}
    for p in sorted(res.out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[p.relative_to(res.out).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    manifest = {
        "name": res.plan.name,
        "status": res.status,
        "stages": [{"name": s, "status": res.stages[s]} for s in STAGES],
        "failures": res.failures,
        "nonconverged_markets": res.nonconverged,
        "files": files,
    }
    _dump_json(res.path("manifest.json"), manifest)
    return res


COMMAND_STAGES = {
    "generate": ("generate", "split"),
    "fit-toolkit": ("generate", "split", "fit-toolkit"),
    "fit-vmm": ("generate", "split", "fit-vmm"),
    "simulate-merger": ("generate", "split", "fit-toolkit", "fit-vmm", "predict", "report"),
    "passthrough": ("generate", "split", "fit-vmm", "passthrough"),
    "infer": ("generate", "split", "fit-vmm", "inference"),
    "report": STAGES,
}

_NEEDS = {
    "split": ("generate",),
    "fit-toolkit": ("split",),
    "fit-vmm": ("split",),
    "predict": ("fit-toolkit", "fit-vmm"),
    "passthrough": ("fit-vmm",),
    "inference": ("fit-vmm",),
    "report": ("predict",),
}


def run_pipeline(plan: ExperimentPlan, out=None, stages=STAGES, data_dir=None, fits_dir=None) -> RunResult:
    """Run the selected ``stages`` in pipeline order; persist into ``out`` when given.

    ``data_dir`` replaces generation by loading a saved dataset and
    ``fits_dir`` supplies previously saved fits by estimator label.
    """
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise InvalidInput(f"unknown stages {sorted(unknown)}")
    out = None if out is None else Path(out)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    res = RunResult(plan, out)
    impl = {
        "generate": lambda r: _stage_generate(r, data_dir),
        "split": _stage_split,
        "fit-toolkit": lambda r: _stage_fit_toolkit(r, fits_dir),
        "fit-vmm": lambda r: _stage_fit_vmm(r, fits_dir),
        "predict": _stage_predict,
        "passthrough": _stage_passthrough,
        "inference": _stage_inference,
        "report": _stage_report,
    }
    for name in STAGES:
        if name not in stages:
            continue
        if name in ("passthrough", "inference") and stages is STAGES and name not in plan.tables:
            continue
        _run_stage(res, name, impl[name], _NEEDS.get(name, ()))
        if name == "split" and res.stages["split"] == "ok" and len(stages) > 2:
            _side_reports(res)
    return _finish(res)


def run_table(plan: ExperimentPlan, out=None) -> RunResult:
    """Full pipeline: generate, split, fit, predict and every requested table."""
    return run_pipeline(plan, out, STAGES)


def recompute_merger_table(path) -> dict:
    """``{model: mse}`` from a prediction CSV alone."""
    acc: dict = {}
    with open(path) as fh:
        for r in csv.DictReader(fh):
            e = float(r["predicted_price"]) - float(r["true_post_price"])
            s = acc.setdefault(r["model"], [0.0, 0])
            s[0] += e * e
            s[1] += 1
    return {k: v[0] / v[1] for k, v in acc.items()}
