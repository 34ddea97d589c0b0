"""Scenario configuration files: parsing, validation, hashing and building.

A config is a YAML mapping.  Validation errors carry the file, line and
column of the offending node.  :func:`normalize` fills every default so
that ``normalize(parse(dump(cfg))) == cfg`` and the content hash is stable.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
import re
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .chain import TierParams
from .grpo import CategoricalOrderPolicy, DemandCurriculum, EnvConfig, RewardSpec, TrainConfig, load_checkpoint
from .lab import DemandSpec, Scenario
from .policies import (BaseStockPolicy, DecisionShockSpec, MajorityVote, OrderUpToPolicy,
                       RemoteAgentPolicy, ScriptedPolicy)

ENDPOINT_ENV = "AGENTBULLWHIP_ENDPOINT"
MANIFEST_SCHEMA = "agentbullwhip.manifest/1"

TIER_FIELDS = {"order_delay": 1, "ship_delay": 2, "smoothing": 0.5, "target_multiplier": 4.0,
               "holding_cost": 0.5, "backlog_cost": 1.0}

DEFAULTS: dict[str, Any] = {
    "name": "scenario",
    "seed": 0,
    "horizon": 20,
    "engine": "chain",
    "tiers": {"count": 4},
    "initial": {"on_hand": 12.0, "flow": 4.0},
    "demand": {"kind": "pattern", "values": [4.0, 4.0, 4.0, 4.0], "level": 8.0, "mode": "fixed"},
    "policy": {"kind": "order_up_to"},
    "burn_in": None,
    "remote": {"max_failures": 0},
    "train": {},
}


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (``1e-8``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


class ConfigError(ValueError):
    def __init__(self, message: str, source: str = "<config>", line: int | None = None,
                 column: int | None = None, field: str = ""):
        self.source, self.line, self.column, self.field = source, line, column, field
        where = source if line is None else f"{source}:{line}:{column}"
        super().__init__(f"{where}: {field + ': ' if field else ''}{message}")


# --- parsing with line anchors ------------------------------------------------

def _marks(node, path=(), out=None) -> dict:
    out = {} if out is None else out
    out[path] = (node.start_mark.line + 1, node.start_mark.column + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = k.value
            out[path + (key,)] = (k.start_mark.line + 1, k.start_mark.column + 1)
            _marks(v, path + (key,), out)
            out[path + (key,)] = (v.start_mark.line + 1, v.start_mark.column + 1)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _marks(v, path + (i,), out)
    return out


class _Ctx:
    def __init__(self, source: str, marks: dict):
        self.source, self.marks = source, marks

    def fail(self, path: tuple, msg: str):
        probe = tuple(path)
        while probe and probe not in self.marks:
            probe = probe[:-1]
        line, col = self.marks.get(probe, (None, None))
        raise ConfigError(msg, self.source, line, col, ".".join(str(p) for p in path))


def parse(text: str, source: str = "<config>") -> dict:
    """Parse and validate; returns the normalized config dict."""
    try:
        node = yaml.compose(text, Loader=_Loader)
        raw = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {getattr(err, 'problem', err)}", source,
                          mark.line + 1 if mark else None, mark.column + 1 if mark else None) from None
    marks = _marks(node) if node is not None else {}
    raw = {} if raw is None else raw
    ctx = _Ctx(source, marks)
    if not isinstance(raw, dict):
        ctx.fail((), "top level must be a mapping")
    if raw.get("schema") == MANIFEST_SCHEMA:
        # re-running from a manifest: the embedded config is authoritative
        inner = raw.get("config")
        if not isinstance(inner, dict):
            ctx.fail(("config",), "manifest has no embedded config")
        return normalize(inner, _Ctx(source, {k[1:]: v for k, v in marks.items() if k[:1] == ("config",)}))
    return normalize(raw, ctx)


def load(path: str | os.PathLike) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config: {err.strerror}", str(path)) from None
    return parse(text, str(path))


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False, default_flow_style=None)


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# --- normalization --------------------------------------------------------------

def _num(ctx, path, value, lo=None, hi=None, integer=False, lo_open=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        ctx.fail(path, f"expected a number, got {value!r}")
    if integer and int(value) != value:
        ctx.fail(path, f"expected an integer, got {value!r}")
    if not np.isfinite(value):
        ctx.fail(path, f"must be finite, got {value!r}")
    if lo is not None and (value < lo or (lo_open and value == lo)):
        ctx.fail(path, f"must be {'>' if lo_open else '>='} {lo}, got {value!r}")
    if hi is not None and value > hi:
        ctx.fail(path, f"must be <= {hi}, got {value!r}")
    return int(value) if integer else float(value)


def _choice(ctx, path, value, options):
    if value not in options:
        ctx.fail(path, f"must be one of {', '.join(options)}; got {value!r}")
    return value


def _map(ctx, path, value):
    if value is None:
        return {}
    if not isinstance(value, dict):
        ctx.fail(path, "expected a mapping")
    return value


def _known(ctx, path, value: dict, allowed):
    for key in value:
        if key not in allowed:
            ctx.fail(path + (key,), f"unknown field; expected one of {', '.join(sorted(allowed))}")


def _tier(ctx, path, raw, base):
    _known(ctx, path, raw, set(TIER_FIELDS) | {"count"})
    out = dict(base)
    for key in TIER_FIELDS:
        if key in raw:
            out[key] = raw[key]
    p = path
    out["order_delay"] = _num(ctx, p + ("order_delay",), out["order_delay"], 0, integer=True)
    out["ship_delay"] = _num(ctx, p + ("ship_delay",), out["ship_delay"], 0, integer=True)
    out["smoothing"] = _num(ctx, p + ("smoothing",), out["smoothing"], 0, 1, lo_open=True)
    out["target_multiplier"] = _num(ctx, p + ("target_multiplier",), out["target_multiplier"], 0, lo_open=True)
    out["holding_cost"] = _num(ctx, p + ("holding_cost",), out["holding_cost"], 0)
    out["backlog_cost"] = _num(ctx, p + ("backlog_cost",), out["backlog_cost"], 0)
    return out


def _tiers(ctx, raw):
    if isinstance(raw, list):
        if not raw:
            ctx.fail(("tiers",), "needs at least one tier")
        return [_tier(ctx, ("tiers", i), _map(ctx, ("tiers", i), t), TIER_FIELDS) for i, t in enumerate(raw)]
    raw = _map(ctx, ("tiers",), raw)
    count = _num(ctx, ("tiers", "count"), raw.get("count", 4), 1, integer=True)
    one = _tier(ctx, ("tiers",), raw, TIER_FIELDS)
    return [dict(one) for _ in range(count)]


def _shock(ctx, path, raw):
    raw = _map(ctx, path, raw)
    _known(ctx, path, raw, {"family", "scale", "values", "probs"})
    fam = _choice(ctx, path + ("family",), raw.get("family", "zero"), ("gaussian", "uniform", "discrete", "zero"))
    out = {"family": fam, "scale": _num(ctx, path + ("scale",), raw.get("scale", 0.0 if fam == "zero" else 1.0), 0)}
    if fam == "discrete":
        vals, probs = raw.get("values"), raw.get("probs")
        if not isinstance(vals, list) or not isinstance(probs, list) or len(vals) != len(probs) or not vals:
            ctx.fail(path, "discrete shocks need equal-length non-empty values and probs lists")
        out["values"] = [_num(ctx, path + ("values", i), v) for i, v in enumerate(vals)]
        out["probs"] = [_num(ctx, path + ("probs", i), v, 0, 1) for i, v in enumerate(probs)]
        try:
            DecisionShockSpec("discrete", out["scale"], tuple(out["values"]), tuple(out["probs"]))
        except ValueError as err:
            ctx.fail(path, str(err))
    return out


POLICY_KINDS = ("order_up_to", "base_stock", "remote", "categorical", "majority_vote", "scripted")


def _policy(ctx, path, raw):
    raw = _map(ctx, path, raw)
    kind = _choice(ctx, path + ("kind",), raw.get("kind", "order_up_to"), POLICY_KINDS)
    out: dict[str, Any] = {"kind": kind}
    if kind == "order_up_to":
        _known(ctx, path, raw, {"kind", "shock", "theta", "integer"})
        out["shock"] = _shock(ctx, path + ("shock",), raw.get("shock"))
        out["theta"] = None if raw.get("theta") is None else _num(ctx, path + ("theta",), raw["theta"], 0, lo_open=True)
        out["integer"] = bool(raw.get("integer", False))
    elif kind == "base_stock":
        _known(ctx, path, raw, {"kind", "level"})
        if "level" not in raw:
            ctx.fail(path + ("level",), "base_stock needs a level")
        out["level"] = _num(ctx, path + ("level",), raw["level"], 0)
    elif kind == "remote":
        _known(ctx, path, raw, {"kind", "endpoint", "timeout", "retries", "fallback"})
        ep = raw.get("endpoint")
        if ep is not None and not isinstance(ep, str):
            ctx.fail(path + ("endpoint",), "expected a URL string")
        out["endpoint"] = ep
        out["timeout"] = _num(ctx, path + ("timeout",), raw.get("timeout", 30.0), 0, lo_open=True)
        out["retries"] = _num(ctx, path + ("retries",), raw.get("retries", 2), 0, integer=True)
        out["fallback"] = _choice(ctx, path + ("fallback",), raw.get("fallback", "repeat_last"),
                                  ("repeat_last", "zero", "forecast"))
    elif kind == "categorical":
        _known(ctx, path, raw, {"kind", "checkpoint", "params", "theta", "sigma", "max_order", "scale"})
        out["checkpoint"] = raw.get("checkpoint")
        if raw.get("params") is not None:
            ps = raw["params"]
            if not isinstance(ps, list):
                ctx.fail(path + ("params",), "expected a list of numbers")
            out["params"] = [_num(ctx, path + ("params", i), v) for i, v in enumerate(ps)]
        else:
            out["params"] = None
        out["theta"] = _num(ctx, path + ("theta",), raw.get("theta", 4.0), 0)
        out["sigma"] = _num(ctx, path + ("sigma",), raw.get("sigma", 5.0), 0, lo_open=True)
        out["max_order"] = _num(ctx, path + ("max_order",), raw.get("max_order", 64), 1, integer=True)
        out["scale"] = _num(ctx, path + ("scale",), raw.get("scale", 16.0), 0, lo_open=True)
    elif kind == "majority_vote":
        _known(ctx, path, raw, {"kind", "n", "base"})
        out["n"] = _num(ctx, path + ("n",), raw.get("n", 10), 1, integer=True)
        if raw.get("base") is None:
            ctx.fail(path + ("base",), "majority_vote needs a base policy")
        out["base"] = _policy(ctx, path + ("base",), raw["base"])
    else:
        _known(ctx, path, raw, {"kind", "values", "probs"})
        vals, probs = raw.get("values"), raw.get("probs")
        if not isinstance(vals, list) or not isinstance(probs, list) or len(vals) != len(probs) or not vals:
            ctx.fail(path, "scripted policies need equal-length values and probs lists")
        out["values"] = [_num(ctx, path + ("values", i), v, 0) for i, v in enumerate(vals)]
        out["probs"] = [_num(ctx, path + ("probs", i), v, 0, 1) for i, v in enumerate(probs)]
    return out


DEMAND_KINDS = ("constant", "pattern", "path", "normal", "poisson", "trunc_normal")


def _demand(ctx, raw):
    path = ("demand",)
    raw = _map(ctx, path, raw)
    _known(ctx, path, raw, {"kind", "level", "values", "mean", "std", "rate", "low", "high", "mode"})
    kind = _choice(ctx, path + ("kind",), raw.get("kind", "constant"), DEMAND_KINDS)
    out: dict[str, Any] = {"kind": kind}
    default_mode = "fixed" if kind in ("constant", "pattern", "path") else "stochastic"
    out["mode"] = _choice(ctx, path + ("mode",), raw.get("mode", default_mode), ("fixed", "stochastic"))
    if kind in ("constant", "pattern"):
        out["level"] = _num(ctx, path + ("level",), raw.get("level", 4.0), 0)
    if kind in ("pattern", "path"):
        vals = raw.get("values", [])
        if not isinstance(vals, list):
            ctx.fail(path + ("values",), "expected a list of numbers")
        out["values"] = [_num(ctx, path + ("values", i), v, 0) for i, v in enumerate(vals)]
    if kind in ("normal", "trunc_normal"):
        out["mean"] = _num(ctx, path + ("mean",), raw.get("mean", 0.0))
        out["std"] = _num(ctx, path + ("std",), raw.get("std", 1.0), 0, lo_open=True)
    if kind == "trunc_normal":
        out["low"] = _num(ctx, path + ("low",), raw.get("low", 0.0))
        out["high"] = _num(ctx, path + ("high",), raw.get("high", 50.0))
        if out["high"] <= out["low"]:
            ctx.fail(path + ("high",), "must exceed low")
    if kind == "poisson":
        out["rate"] = _num(ctx, path + ("rate",), raw.get("rate", 10.0), 0)
    return out


def _train(ctx, raw):
    path = ("train",)
    raw = _map(ctx, path, raw)
    _known(ctx, path, raw, {"group_size", "steps", "beta", "lr", "max_grad_norm", "eps_norm", "optimizer",
                            "reward", "curriculum", "init"})
    d = TrainConfig()
    out: dict[str, Any] = {
        "group_size": _num(ctx, path + ("group_size",), raw.get("group_size", d.group_size), 2, integer=True),
        "steps": _num(ctx, path + ("steps",), raw.get("steps", d.steps), 0, integer=True),
        "beta": _num(ctx, path + ("beta",), raw.get("beta", d.beta), 0),
        "lr": _num(ctx, path + ("lr",), raw.get("lr", d.lr), 0, lo_open=True),
        "max_grad_norm": _num(ctx, path + ("max_grad_norm",), raw.get("max_grad_norm", d.max_grad_norm), 0, lo_open=True),
        "eps_norm": _num(ctx, path + ("eps_norm",), raw.get("eps_norm", d.eps_norm), 0, lo_open=True),
        "optimizer": _choice(ctx, path + ("optimizer",), raw.get("optimizer", d.optimizer), ("sgd", "adam")),
    }
    rw = _map(ctx, path + ("reward",), raw.get("reward"))
    _known(ctx, path + ("reward",), rw, {"scope", "attribution"})
    out["reward"] = {
        "scope": _choice(ctx, path + ("reward", "scope"), rw.get("scope", "agent"), ("system", "agent")),
        "attribution": _choice(ctx, path + ("reward", "attribution"), rw.get("attribution", "reward_to_go"),
                               ("episode", "reward_to_go")),
    }
    cp = path + ("curriculum",)
    cu = _map(ctx, cp, raw.get("curriculum"))
    _known(ctx, cp, cu, {"regimes", "rate_range", "mean_range", "std_range", "support", "level", "resample"})
    dc = DemandCurriculum()
    regimes = cu.get("regimes", list(dc.regimes))
    if not isinstance(regimes, list) or not regimes:
        ctx.fail(cp + ("regimes",), "expected a non-empty list")
    for i, r in enumerate(regimes):
        _choice(ctx, cp + ("regimes", i), r, ("poisson", "trunc_normal", "constant"))

    def pair(key, default):
        v = cu.get(key, list(default))
        if not isinstance(v, list) or len(v) != 2:
            ctx.fail(cp + (key,), "expected [low, high]")
        lo, hi = (_num(ctx, cp + (key, i), x, 0) for i, x in enumerate(v))
        if hi < lo:
            ctx.fail(cp + (key,), "high must be >= low")
        return [lo, hi]

    out["curriculum"] = {"regimes": list(regimes), "rate_range": pair("rate_range", dc.rate_range),
                         "mean_range": pair("mean_range", dc.mean_range), "std_range": pair("std_range", dc.std_range),
                         "support": pair("support", dc.support),
                         "level": _num(ctx, cp + ("level",), cu.get("level", dc.level), 0),
                         "resample": bool(cu.get("resample", dc.resample))}
    init = raw.get("init", {"kind": "categorical"})
    out["init"] = _policy(ctx, path + ("init",), init)
    if out["init"]["kind"] != "categorical":
        ctx.fail(path + ("init", "kind"), "training needs a categorical policy")
    return out


TOP_FIELDS = {"name", "seed", "horizon", "engine", "tiers", "initial", "demand", "policy", "policies",
              "shock", "shocks", "burn_in", "remote", "train"}


def normalize(raw: dict, ctx: _Ctx | None = None) -> dict:
    ctx = ctx or _Ctx("<config>", {})
    raw = copy.deepcopy(raw)
    _known(ctx, (), raw, TOP_FIELDS)
    cfg: dict[str, Any] = {}
    name = raw.get("name", DEFAULTS["name"])
    if not isinstance(name, str):
        ctx.fail(("name",), "expected a string")
    cfg["name"] = name
    cfg["seed"] = _num(ctx, ("seed",), raw.get("seed", 0), 0, integer=True)
    cfg["horizon"] = _num(ctx, ("horizon",), raw.get("horizon", 20), 1, integer=True)
    cfg["engine"] = _choice(ctx, ("engine",), raw.get("engine", "chain"), ("chain", "linear"))
    cfg["tiers"] = _tiers(ctx, raw.get("tiers", DEFAULTS["tiers"]))
    n = len(cfg["tiers"])
    init = _map(ctx, ("initial",), raw.get("initial"))
    _known(ctx, ("initial",), init, {"on_hand", "flow"})
    cfg["initial"] = {"on_hand": _num(ctx, ("initial", "on_hand"), init.get("on_hand", 12.0), 0),
                      "flow": _num(ctx, ("initial", "flow"), init.get("flow", 4.0), 0)}
    cfg["demand"] = _demand(ctx, raw.get("demand", DEFAULTS["demand"]))
    if cfg["engine"] == "chain":
        if "shock" in raw or "shocks" in raw:
            ctx.fail(("shocks",), "shocks apply to the linear engine; give order_up_to policies a shock instead")
        if "policies" in raw:
            pol = raw["policies"]
            if not isinstance(pol, list) or len(pol) != n:
                ctx.fail(("policies",), f"expected a list of {n} policies")
            cfg["policies"] = [_policy(ctx, ("policies", i), p) for i, p in enumerate(pol)]
        else:
            one = _policy(ctx, ("policy",), raw.get("policy", DEFAULTS["policy"]))
            cfg["policies"] = [copy.deepcopy(one) for _ in range(n)]
    else:
        if "policy" in raw or "policies" in raw:
            ctx.fail(("policy",), "the linear engine takes shocks, not policies")
        if "shocks" in raw:
            sh = raw["shocks"]
            if not isinstance(sh, list) or len(sh) != n:
                ctx.fail(("shocks",), f"expected a list of {n} shocks")
            cfg["shocks"] = [_shock(ctx, ("shocks", i), s) for i, s in enumerate(sh)]
        else:
            one = _shock(ctx, ("shock",), raw.get("shock"))
            cfg["shocks"] = [dict(one) for _ in range(n)]
    b = raw.get("burn_in")
    cfg["burn_in"] = None if b is None else _num(ctx, ("burn_in",), b, 0, integer=True)
    if cfg["burn_in"] is not None and cfg["burn_in"] >= cfg["horizon"]:
        ctx.fail(("burn_in",), f"must be below the horizon {cfg['horizon']}")
    rem = _map(ctx, ("remote",), raw.get("remote"))
    _known(ctx, ("remote",), rem, {"max_failures"})
    cfg["remote"] = {"max_failures": _num(ctx, ("remote", "max_failures"), rem.get("max_failures", 0), 0, integer=True)}
    cfg["train"] = _train(ctx, raw.get("train"))
    return cfg


# --- builders ---------------------------------------------------------------

def tier_params(cfg: dict) -> tuple[TierParams, ...]:
    return tuple(TierParams(**{k: t[k] for k in TIER_FIELDS}) for t in cfg["tiers"])


def demand_spec(cfg: dict) -> DemandSpec:
    d = dict(cfg["demand"])
    if "values" in d:
        d["values"] = tuple(d["values"])
    return DemandSpec(**d)


def shock_spec(s: dict) -> DecisionShockSpec:
    return DecisionShockSpec(s["family"], s["scale"], tuple(s.get("values", ())), tuple(s.get("probs", ())))


def build_policy(p: dict, base_dir: Path | None = None):
    kind = p["kind"]
    if kind == "order_up_to":
        return OrderUpToPolicy(shock_spec(p["shock"]), p["theta"], p["integer"])
    if kind == "base_stock":
        return BaseStockPolicy(p["level"])
    if kind == "remote":
        endpoint = os.environ.get(ENDPOINT_ENV) or p["endpoint"]
        if not endpoint:
            raise ConfigError(f"remote policy needs an endpoint (config or ${ENDPOINT_ENV})", field="policy.endpoint")
        return RemoteAgentPolicy(endpoint, p["timeout"], p["retries"], p["fallback"])
    if kind == "categorical":
        if p.get("checkpoint"):
            ck = Path(p["checkpoint"])
            if base_dir is not None and not ck.is_absolute():
                ck = base_dir / ck
            return load_checkpoint(ck)[0]
        if p.get("params") is not None:
            return CategoricalOrderPolicy(np.array(p["params"], float), p["max_order"], p["scale"])
        return CategoricalOrderPolicy.order_up_to(p["theta"], p["sigma"], p["max_order"], p["scale"])
    if kind == "majority_vote":
        return MajorityVote(build_policy(p["base"], base_dir), p["n"])
    return ScriptedPolicy(tuple(p["values"]), tuple(p["probs"]))


def build_scenario(cfg: dict, base_dir: Path | None = None) -> Scenario:
    tiers = tier_params(cfg)
    common = dict(tiers=tiers, demand=demand_spec(cfg), horizon=cfg["horizon"], engine=cfg["engine"],
                  initial_on_hand=cfg["initial"]["on_hand"], initial_flow=cfg["initial"]["flow"],
                  burn_in=cfg["burn_in"], max_protocol_failures=cfg["remote"]["max_failures"], name=cfg["name"])
    if cfg["engine"] == "linear":
        return Scenario(shocks=tuple(shock_spec(s) for s in cfg["shocks"]), **common)
    return Scenario(policies=tuple(build_policy(p, base_dir) for p in cfg["policies"]), **common)


def env_config(cfg: dict) -> EnvConfig:
    return EnvConfig(tier_params(cfg), cfg["horizon"], cfg["initial"]["on_hand"], cfg["initial"]["flow"])


def build_train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    cu = t["curriculum"]
    curriculum = DemandCurriculum(tuple(cu["regimes"]), tuple(cu["rate_range"]), tuple(cu["mean_range"]),
                                  tuple(cu["std_range"]), tuple(cu["support"]), cu["level"], cu["resample"])
    return TrainConfig(env_config(cfg), curriculum, RewardSpec(**t["reward"]), t["group_size"], t["steps"],
                       t["beta"], t["lr"], t["max_grad_norm"], t["eps_norm"], cfg["seed"], t["optimizer"])
