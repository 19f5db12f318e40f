"""Experiment configuration: one JSON document plus dotted ``key=value`` overrides.

Resolution order is built-in defaults, then the config file, then ``--set``
flags, then ``--seed``.  A non-null ``rung`` finally rewrites the flags it
controls, so the resolved document always states the values actually used.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Optional

from .costmodel import CostModelParams
from .predictor import PredictorConfig
from .scheduler import SchedulerConfig, SloConfig
from .simengine import RUNGS, EngineConfig, EngineConfigError
from .workload import (
    PRESETS,
    LengthDist,
    RequestKind,
    Sharing,
    SyntheticWorkloadSpec,
    TraceError,
    generate_synthetic,
    load_trace,
    preset,
)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


ENGINE_KEYS = ("capacity_tokens", "block_size", "eviction", "use_threshold", "noise_std", "max_iterations")

# sections whose keys are fixed by a dataclass; anything else is free-form
_TYPED_SECTIONS = ("engine", "slo", "scheduler", "predictor", "plan", "report")


def default_document() -> dict:
    eng = EngineConfig()
    sched = asdict(SchedulerConfig())
    sched["bucket_edges"] = list(sched["bucket_edges"])
    return {
        "seed": 0,
        "rung": "FULL",
        "engine": {k: getattr(eng, k) for k in ENGINE_KEYS},
        "slo": asdict(SloConfig()),
        "scheduler": sched,
        "predictor": asdict(PredictorConfig()),
        "cost_model": {"true": CostModelParams().to_json(), "estimated": None},
        "workload": {
            "online": {"preset": "sharegpt_like"},
            "offline": {"preset": "loogle_qa_short_like"},
        },
        "plan": {
            "window_s": 300.0,
            "capacities": 8,
            "base_capacity": 4096,
            "speeds": [1.0, 2.0, 4.0],
        },
        "report": {"bin_s": 60.0, "history_bins": 15, "k": 2.0},
    }


# --------------------------------------------------------------------------
# document assembly


def parse_value(text: str) -> Any:
    """JSON if it parses, else the raw string (so ``rung=FULL`` works unquoted)."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_assignment(item: str) -> tuple:
    key, sep, value = item.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
    return key, parse_value(value)


def _is_free_form(path: tuple) -> bool:
    # below workload.<source> and cost_model.<block> keys are checked later
    return len(path) >= 2 and path[0] in ("workload", "cost_model")


def set_path(doc: dict, key: str, value: Any) -> None:
    parts = tuple(key.split("."))
    if any(not p for p in parts):
        raise ConfigError(f"{key}: empty path component")
    node = doc
    for i, p in enumerate(parts[:-1]):
        here = parts[: i + 1]
        if isinstance(node.get(p), dict):
            node = node[p]
        elif len(here) > 1 and _is_free_form(here) and node.get(p) is None:
            node[p] = {}
            node = node[p]
        else:
            raise ConfigError(f"{'.'.join(here)}: unknown section")
    if parts[-1] not in node and not _is_free_form(parts[:-1]):
        raise ConfigError(f"{key}: unknown key")
    node[parts[-1]] = value


def merge(base: dict, update: dict, path: tuple = ()) -> dict:
    """Recursive merge; each workload source is replaced whole."""
    for k, v in update.items():
        here = path + (k,)
        if here == ("workload",):
            if not isinstance(v, dict):
                raise ConfigError("workload: expected an object")
            for kk, vv in v.items():
                if kk not in ("online", "offline"):
                    raise ConfigError(f"workload.{kk}: unknown key")
                base["workload"][kk] = copy.deepcopy(vv)
        elif k not in base and not _is_free_form(path):
            raise ConfigError(f"{'.'.join(here)}: unknown key")
        elif isinstance(v, dict) and isinstance(base.get(k), dict):
            merge(base[k], v, here)
        else:
            base[k] = copy.deepcopy(v)
    return base


def _absolutize_traces(doc: dict, base_dir: str) -> None:
    wl = doc.get("workload")
    if not isinstance(wl, dict):
        return
    for src in wl.values():
        if isinstance(src, dict) and isinstance(src.get("trace"), str):
            if not os.path.isabs(src["trace"]):
                src["trace"] = os.path.normpath(os.path.join(base_dir, src["trace"]))


def read_document(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    _absolutize_traces(doc, os.path.dirname(os.path.abspath(path)))
    return doc


def build_document(
    path: Optional[str] = None,
    overrides: tuple = (),
    seed: Optional[int] = None,
) -> dict:
    doc = default_document()
    if path is not None:
        merge(doc, read_document(path))
    for item in overrides:
        key, value = parse_assignment(item) if isinstance(item, str) else item
        set_path(doc, key, value)
    if seed is not None:
        doc["seed"] = seed
    return expand_rung(doc)


def expand_rung(doc: dict) -> dict:
    rung = doc.get("rung")
    if rung is None:
        return doc
    if rung not in RUNGS:
        raise ConfigError(f"rung: unknown rung {rung!r}; choose from {list(RUNGS)}")
    flags = RUNGS[rung]
    for k in ("policy", "slo_aware", "reference_aware"):
        doc["scheduler"][k] = flags[k]
    for k in ("eviction", "use_threshold"):
        doc["engine"][k] = flags[k]
    return doc


# --------------------------------------------------------------------------
# typed views


def _check_type(where: str, value: Any, default: Any) -> Any:
    if default is None:
        if value is not None and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigError(f"{where}: expected a number or null, got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    elif isinstance(default, (list, tuple)):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
    return value


def _typed(doc: dict, section: str) -> dict:
    defaults = default_document()[section]
    got = doc.get(section)
    if not isinstance(got, dict):
        raise ConfigError(f"{section}: expected an object")
    out = {}
    for k, v in got.items():
        if k not in defaults:
            raise ConfigError(f"{section}.{k}: unknown key")
        out[k] = _check_type(f"{section}.{k}", v, defaults[k])
    return out


def _params(obj: Any, where: str) -> CostModelParams:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object of cost coefficients")
    try:
        return CostModelParams.from_json(obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def engine_config(doc: dict) -> EngineConfig:
    eng = _typed(doc, "engine")
    sched = _typed(doc, "scheduler")
    sched["bucket_edges"] = tuple(sched["bucket_edges"])
    try:
        slo = SloConfig(**_typed(doc, "slo"))
    except ValueError as exc:
        raise ConfigError(f"slo: {exc}") from None
    cm = doc.get("cost_model")
    if not isinstance(cm, dict) or set(cm) - {"true", "estimated"}:
        raise ConfigError("cost_model: expected keys 'true' and 'estimated'")
    est = cm.get("estimated")
    seed = doc.get("seed")
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError(f"seed: expected an integer, got {seed!r}")
    scheduler = SchedulerConfig(**sched)
    predictor = PredictorConfig(**_typed(doc, "predictor"))
    for name, part in (("scheduler", scheduler), ("predictor", predictor)):
        try:
            part.validate()
        except ValueError as exc:
            raise ConfigError(f"{name}: {exc}") from None
    cfg = EngineConfig(
        slo=slo,
        scheduler=scheduler,
        predictor=predictor,
        params_true=_params(cm.get("true"), "cost_model.true"),
        params_est=None if est is None else _params(est, "cost_model.estimated"),
        seed=seed,
        **eng,
    )
    try:
        cfg.validate()
    except EngineConfigError as exc:
        raise ConfigError(f"engine: {exc}") from None
    return cfg


_SPEC_FIELDS = {f.name for f in fields(SyntheticWorkloadSpec)}


def workload_spec(src: dict, kind: RequestKind, seed: int, where: str) -> SyntheticWorkloadSpec:
    src = dict(src)
    name = src.pop("preset", None)
    if name is not None and name not in PRESETS:
        raise ConfigError(f"{where}.preset: unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = {}
    for k, v in src.items():
        if k not in _SPEC_FIELDS:
            raise ConfigError(f"{where}.{k}: unknown workload field")
        try:
            if k in ("prompt_len", "output_len"):
                v = LengthDist(**v)
            elif k == "sharing":
                v = Sharing(**v)
            elif k == "kind":
                v = RequestKind(v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}.{k}: {exc}") from None
        kw[k] = v
    kw.setdefault("seed", seed)
    base = preset(name) if name is not None else SyntheticWorkloadSpec()
    spec = replace(base, **kw)
    if spec.kind is not kind:
        spec = replace(spec, kind=kind)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return spec


@dataclass
class WorkloadSource:
    kind: RequestKind
    trace: Optional[str] = None
    spec: Optional[SyntheticWorkloadSpec] = None

    def events(self) -> list:
        if self.trace is not None:
            try:
                with open(self.trace, "r", encoding="utf-8") as fh:
                    text = fh.read()
            except OSError as exc:
                raise ConfigError(f"trace file {self.trace}: {exc.strerror}") from None
            try:
                evs = load_trace(text)
            except TraceError as exc:
                raise ConfigError(f"trace file {self.trace}: {exc}") from None
            return [e for e in evs if e.kind is self.kind]
        if self.spec is not None:
            return generate_synthetic(self.spec)
        return []


def workload_source(doc: dict, which: str) -> WorkloadSource:
    kind = RequestKind.ONLINE if which == "online" else RequestKind.OFFLINE
    where = f"workload.{which}"
    src = doc.get("workload", {}).get(which)
    if src is None:
        return WorkloadSource(kind)
    if not isinstance(src, dict):
        raise ConfigError(f"{where}: expected an object, or null for none")
    if "trace" in src:
        if set(src) != {"trace"} or not isinstance(src["trace"], str):
            raise ConfigError(f"{where}: a trace source takes only a 'trace' path")
        return WorkloadSource(kind, trace=src["trace"])
    # online and offline streams get distinct default seeds
    seed = doc["seed"] if kind is RequestKind.ONLINE else doc["seed"] + 1
    return WorkloadSource(kind, spec=workload_spec(src, kind, seed, where))


@dataclass
class ExperimentConfig:
    document: dict  # resolved; embedded in artifacts
    engine: EngineConfig
    online: WorkloadSource
    offline: WorkloadSource
    rung: Optional[str]

    @classmethod
    def from_document(cls, doc: dict) -> "ExperimentConfig":
        unknown = set(doc) - set(default_document())
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown key")
        doc = expand_rung(copy.deepcopy(doc))
        engine = engine_config(doc)
        for section in ("plan", "report"):
            _typed(doc, section)
        return cls(
            document=doc,
            engine=engine,
            online=workload_source(doc, "online"),
            offline=workload_source(doc, "offline"),
            rung=doc.get("rung"),
        )

    def with_rung(self, rung: str) -> "ExperimentConfig":
        doc = copy.deepcopy(self.document)
        doc["rung"] = rung
        return ExperimentConfig.from_document(doc)


def load_config(path: Optional[str] = None, overrides: tuple = (), seed: Optional[int] = None) -> ExperimentConfig:
    return ExperimentConfig.from_document(build_document(path, overrides, seed))


def dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
