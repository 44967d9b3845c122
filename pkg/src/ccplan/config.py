"""Scenario configuration: strict JSON documents and the objects built from them.

A configuration has the sections ``system``, ``cost``, ``obstacles``,
``risk``, ``solver`` and ``eval``. Unknown keys are rejected; missing
optional keys take the defaults below, so ``dumps(loads(text))`` is the
canonical form and its SHA-256 is the config digest.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import closed_loop, model, prediction, stats
from .errors import ConfigError

_VEC = {"type": "array", "items": {"type": "number"}}
_MAT = {"type": "array", "items": _VEC}
_BOX = {"type": "array", "items": _VEC, "minItems": 2, "maxItems": 2}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_FACE = _obj({"mean": _VEC, "cov": _MAT, "cov_scale": {"type": "number", "exclusiveMinimum": 0},
              "samples": _MAT, "sample_file": {"type": "string"}})

_OBSTACLE = {
    "oneOf": [
        _obj({"mode": {"const": "exact"}, "faces": {"type": "array", "items": _FACE, "minItems": 1},
              "n_samples": {"type": "integer", "minimum": 2}}, ("mode", "faces")),
        _obj({"mode": {"const": "sampled"}, "faces": {"type": "array", "items": _FACE, "minItems": 1}},
             ("mode", "faces")),
        _obj({"mode": {"const": "dynamic"}, "model": {"const": "merging_car"},
              "init_mean": _VEC, "init_cov": _MAT, "process_cov": _MAT, "measurement_cov": _MAT,
              "length": {"type": "number", "minimum": 0}, "width": {"type": "number", "minimum": 0},
              "lane_center": {"type": "number"},
              "ego_length": {"type": "number", "minimum": 0}, "ego_width": {"type": "number", "minimum": 0},
              "n_samples": {"type": "integer", "minimum": 2}},
             ("mode", "model", "init_mean", "init_cov", "process_cov", "measurement_cov", "length", "width")),
    ]
}

SCHEMA = _obj({
    "name": {"type": "string"},
    "kind": {"enum": ["open_loop", "closed_loop"]},
    "system": _obj({
        "template": {"enum": ["single_integrator", "double_integrator", "explicit"]},
        "a": _MAT, "b": _MAT,
        "ts": {"type": "number", "exclusiveMinimum": 0},
        "horizon": {"type": "integer", "minimum": 1},
        "x0": _VEC, "input_box": _BOX, "state_box": _BOX,
        "face_states": {"type": "array", "items": {"type": "integer", "minimum": 0}},
    }, ("template", "horizon", "x0", "input_box")),
    "cost": _obj({
        "terminal_idx": {"type": "array", "items": {"type": "integer"}}, "terminal_target": _VEC,
        "stage_idx": {"type": "array", "items": {"type": "integer"}}, "stage_target": _VEC,
        "input_weight": {"type": "number", "minimum": 0},
    }),
    "obstacles": {"type": "array", "items": _OBSTACLE},
    "risk": _obj({
        "epsilon": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "beta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "allocation": {"enum": ["uniform", "improved"]},
        "redistribute": {"type": "boolean"},
        "redistribute_tol": {"type": "number", "minimum": 0},
        "redistribute_iters": {"type": "integer", "minimum": 0},
    }),
    "solver": _obj({
        "gap_tol": {"type": "number", "minimum": 0},
        "node_limit": {"type": "integer", "minimum": 1},
        "policy": {"enum": [closed_loop.ABORT, closed_loop.FALLBACK]},
        "accept_incumbent": {"type": "boolean"},
    }),
    "eval": _obj({
        "n_mc": {"type": "integer", "minimum": 100},
        "n_instances": {"type": "integer", "minimum": 1},
        "n_runs": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "sweep": {"type": "array", "items": {"type": "integer", "minimum": 2}},
    }),
}, ("kind", "system", "obstacles"))

DEFAULTS = {
    "name": "",
    "system": {"ts": 1.0},
    "cost": {"terminal_idx": [], "terminal_target": [], "stage_idx": [], "stage_target": [], "input_weight": 0.0},
    "risk": {"epsilon": 0.05, "beta": 1e-3, "allocation": "improved", "redistribute": False,
             "redistribute_tol": 5e-3, "redistribute_iters": 10},
    "solver": {"gap_tol": 1e-9, "node_limit": 100_000, "policy": closed_loop.ABORT, "accept_incumbent": True},
    "eval": {"n_mc": 10_000, "n_instances": 20, "n_runs": 50, "seed": 0, "sweep": [100, 1000, 10_000, 100_000]},
}

FULL_SCALE = {"n_mc": 100_000, "n_instances": 100, "n_runs": 500}

BUNDLED = ("open_loop_s51", "closed_loop_s52")


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class ScenarioConfig:
    """A validated configuration with every default filled in."""

    data: dict

    def __getitem__(self, key):
        return self.data[key]

    def dumps(self):
        return json.dumps(self.data, sort_keys=True, indent=2) + "\n"

    def digest(self):
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_eval(self, **kw):
        data = copy.deepcopy(self.data)
        data["eval"].update({k: v for k, v in kw.items() if v is not None})
        return validate(data)


def validate(data):
    """Schema check, default filling and cross-field checks."""
    if not isinstance(data, dict):
        raise ConfigError("a configuration must be a JSON object")
    try:
        jsonschema.validate(data, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    full = _merge(DEFAULTS, data)
    sysc = full["system"]
    nu = 2
    if sysc["template"] == "explicit":
        if "a" not in sysc or "b" not in sysc:
            raise ConfigError("config error at system: explicit systems need 'a' and 'b'")
        nu = len(sysc["b"][0])
    elif "a" in sysc or "b" in sysc:
        raise ConfigError("config error at system: 'a'/'b' are only allowed with template 'explicit'")
    for side in sysc["input_box"]:
        if len(side) != nu:
            raise ConfigError(f"config error at system/input_box: expected {nu} entries per side")
    for face in (f for ob in full["obstacles"] if ob["mode"] != "dynamic" for f in ob["faces"]):
        if ("samples" in face or "sample_file" in face) == ("mean" in face):
            raise ConfigError("config error at obstacles: a face has either moments or samples")
    kinds = {ob["mode"] for ob in full["obstacles"]}
    if full["kind"] == "closed_loop" and kinds != {"dynamic"}:
        raise ConfigError("config error at obstacles: closed-loop scenarios take one dynamic obstacle")
    if full["kind"] == "open_loop" and "dynamic" in kinds:
        raise ConfigError("config error at obstacles: dynamic obstacles need kind 'closed_loop'")
    return ScenarioConfig(full)


def loads(text):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return validate(data)


def load(path):
    """Load a file, or a bundled configuration by name."""
    if str(path) in BUNDLED:
        return loads(resources.files("ccplan.configs").joinpath(f"{path}.json").read_text())
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)


# -- builders -----------------------------------------------------------------

def _system(cfg, x0=None):
    s = cfg["system"]
    if s["template"] == "single_integrator":
        a, b = model.single_integrator(s["ts"], len(s["x0"]))
    elif s["template"] == "double_integrator":
        a, b = model.double_integrator(s["ts"], len(s["x0"]) // 2)
    else:
        a, b = np.array(s["a"], float), np.array(s["b"], float)
    lo, hi = (np.array(v, float) for v in s["input_box"])
    x0 = np.array(s["x0"], float) if x0 is None else x0
    return model.lti_system(a, b, s["horizon"], x0, lo, hi)


def _cost(cfg):
    c = cfg["cost"]
    return model.QuadraticCost(tuple(c["terminal_idx"]), tuple(c["terminal_target"]), tuple(c["stage_idx"]),
                               tuple(c["stage_target"]), float(c["input_weight"]))


def _face_belief(face):
    mean = np.array(face["mean"], float)
    if "cov" in face:
        cov = np.array(face["cov"], float)
    else:
        cov = face.get("cov_scale", 1.0) * np.eye(mean.size)
    return stats.GaussianBelief(mean, cov)


def _face_samples(face, base):
    if "samples" in face:
        return np.array(face["samples"], float)
    path = Path(face["sample_file"])
    return np.load(path if path.is_absolute() else base / path)


@dataclass
class OpenLoopInstance:
    """One draw of the open-loop scenario.

    ``problems`` maps each method to the problem its planner sees: the exact
    moments for ema, moment estimates for mra and raw samples for sa.
    ``truth`` holds the true faces for the evaluator (None for sampled-only
    obstacles).
    """

    problems: dict
    truth: list | None


def open_loop_instance(cfg, rng, n_samples=None, base=Path(".")):
    """Draw the planner's sample sets for one instance of an open-loop config.

    Exact obstacles are sampled independently at every plan step; each face
    of an obstacle is one uncertain half-space (the obstacle is the
    intersection of its faces).
    """
    sysm = _system(cfg)
    n = cfg["system"]["horizon"]
    per_method = {"ema": [], "mra": [], "sa": []}
    truth = []
    has_truth = True
    for j, ob in enumerate(cfg["obstacles"]):
        count = n_samples or ob.get("n_samples", 1000)
        for i, face in enumerate(ob["faces"]):
            belief = _face_belief(face) if ob["mode"] == "exact" else None
            fixed = None if belief is not None else _face_samples(face, base)
            for t in range(1, n + 1):
                if belief is not None:
                    draws = stats.draw_array(belief, rng, count)
                    truth.append(model.UncertainFace(t, j, i, belief=belief))
                    per_method["ema"].append(model.UncertainFace(t, j, i, belief=belief))
                else:
                    draws = fixed
                    has_truth = False
                sset = stats.SampleSet(draws)
                per_method["mra"].append(model.UncertainFace(t, j, i, estimate=stats.sample_moments(sset)))
                per_method["sa"].append(model.UncertainFace(t, j, i, samples=sset))
    s = cfg["system"]
    lb, ub = (s["state_box"] if "state_box" in s else (None, None))
    problems = {}
    for method, faces in per_method.items():
        if method == "ema" and not has_truth:
            continue
        problems[method] = model.PlanningProblem(
            sysm, faces, cfg["risk"]["epsilon"], _cost(cfg), beta=cfg["risk"]["beta"],
            state_lb=lb, state_ub=ub, face_states=s.get("face_states"),
            allocation=cfg["risk"]["allocation"],
        )
    return OpenLoopInstance(problems, truth if has_truth else None)


def ccrh_scenario(cfg, method="mra"):
    """Receding-horizon scenario for a closed-loop config."""
    s, ob = cfg["system"], cfg["obstacles"][0]
    init = stats.GaussianBelief(np.array(ob["init_mean"], float), np.array(ob["init_cov"], float))
    wn = stats.GaussianBelief(np.zeros(len(ob["init_mean"])), np.array(ob["process_cov"], float))
    vn = stats.GaussianBelief(np.zeros(len(ob["measurement_cov"])), np.array(ob["measurement_cov"], float))
    lane = ob.get("lane_center", 2.0)
    obs = prediction.merging_car_model(s["ts"], init, wn, vn, ob["length"], ob["width"], lane_center=lane,
                                       horizon=2 * s["horizon"])
    if "state_box" not in s:
        raise ConfigError("config error at system: closed-loop scenarios need a state_box")
    c = cfg["cost"]
    return closed_loop.CcrhScenario(
        ts=s["ts"], horizon=s["horizon"], x0=np.array(s["x0"], float),
        input_lb=np.array(s["input_box"][0], float), input_ub=np.array(s["input_box"][1], float),
        state_lb=np.array(s["state_box"][0], float), state_ub=np.array(s["state_box"][1], float),
        stage_idx=tuple(c["stage_idx"]), stage_target=tuple(c["stage_target"]),
        input_weight=float(c["input_weight"]), eps=cfg["risk"]["epsilon"], beta=cfg["risk"]["beta"],
        n_samples=ob.get("n_samples", 1000), obstacle=obs,
        ego_length=ob.get("ego_length", 0.0), ego_width=ob.get("ego_width", 0.0), method=method,
        policy=cfg["solver"]["policy"], node_limit=cfg["solver"]["node_limit"],
        gap_tol=cfg["solver"]["gap_tol"], accept_incumbent=cfg["solver"]["accept_incumbent"],
    )
