"""Versioned persistence for scenarios, datasets and checkpoints."""
from __future__ import annotations

import base64
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import AgentCategory, AgentTrack, BoxDims, Polygon, Polyline, Pose2, Scenario, SceneMap
from .scenarios import GeneratorConfig, generate_scenario

log = logging.getLogger(__name__)

SCENARIO_VERSION = 1
MANIFEST_VERSION = 1
CHECKPOINT_VERSION = 1


class ScenarioParseError(ValueError):
    pass


class VersionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scenarios


def scenario_to_dict(scn: Scenario) -> dict:
    m = scn.map
    return {
        "version": SCENARIO_VERSION,
        "scenario_id": scn.scenario_id,
        "dt": scn.dt,
        "horizon_F": scn.horizon_F,
        "meta": scn.meta,
        "map": {
            "drivable": {"outer": m.drivable.vertices.tolist(),
                         "holes": [np.asarray(h).tolist() for h in m.drivable.holes]},
            "route_centerline": m.route_centerline.vertices.tolist(),
            "speed_limit": m.speed_limit,
            "static_obstacles": [{"pose": [p.x, p.y, p.heading], "dims": [d.length, d.width]}
                                 for p, d in m.static_obstacles],
        },
        "agents": [{
            "category": a.category.name,
            "dims": [a.dims.length, a.dims.width],
            "history": a.history.tolist(),
            "future": None if a.future_gt is None else a.future_gt.tolist(),
        } for a in scn.agents],
    }


class _Reader:
    """Field accessor that reports the path of whatever is missing or malformed."""

    def __init__(self, obj, path="$"):
        self.obj, self.path = obj, path

    def get(self, key, kind=None):
        if not isinstance(self.obj, dict) or key not in self.obj:
            raise ScenarioParseError(f"missing field {self.path}.{key}")
        val = self.obj[key]
        if kind is not None and not isinstance(val, kind):
            raise ScenarioParseError(f"field {self.path}.{key} has type {type(val).__name__}")
        return val

    def sub(self, key):
        return _Reader(self.get(key), f"{self.path}.{key}")

    def array(self, key, width=None):
        try:
            a = np.asarray(self.get(key), dtype=float)
        except (TypeError, ValueError) as e:
            raise ScenarioParseError(f"field {self.path}.{key}: {e}") from None
        if width is not None and (a.ndim != 2 or a.shape[1] != width):
            raise ScenarioParseError(f"field {self.path}.{key} must be an (n, {width}) array, got shape {a.shape}")
        return a


def scenario_from_dict(d: dict) -> Scenario:
    r = _Reader(d)
    version = r.get("version")
    if version != SCENARIO_VERSION:
        raise VersionError(f"unsupported scenario version {version!r} (expected {SCENARIO_VERSION})")
    try:
        mr = r.sub("map")
        dr = mr.sub("drivable")
        holes = tuple(np.asarray(h, dtype=float) for h in dr.get("holes", list))
        obstacles = []
        for i, o in enumerate(mr.get("static_obstacles", list)):
            orr = _Reader(o, f"$.map.static_obstacles[{i}]")
            obstacles.append((Pose2(*orr.get("pose", list)), BoxDims(*orr.get("dims", list))))
        smap = SceneMap(Polygon(dr.array("outer", 2), holes), Polyline(mr.array("route_centerline", 2)),
                        float(mr.get("speed_limit")), tuple(obstacles))
        agents = []
        for i, a in enumerate(r.get("agents", list)):
            ar = _Reader(a, f"$.agents[{i}]")
            fut = None if ar.get("future") is None else ar.array("future", 3)
            agents.append(AgentTrack(AgentCategory[ar.get("category", str)], BoxDims(*ar.get("dims", list)),
                                     ar.array("history", 3), fut))
        return Scenario(smap, tuple(agents), float(r.get("dt")), int(r.get("horizon_F")),
                        r.get("scenario_id", str), dict(r.get("meta", dict)))
    except ScenarioParseError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ScenarioParseError(f"invalid scenario: {type(e).__name__}: {e}") from None


def save_scenario(scn: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(scn)))


def load_scenario(path) -> Scenario:
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(d, dict):
        raise ScenarioParseError(f"{path}: top level must be an object")
    return scenario_from_dict(d)


# ---------------------------------------------------------------------------
# datasets


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class DatasetManifest:
    root: str
    splits: dict  # split name -> list of relative file names
    config_hash: str
    config: dict
    hashes: dict = field(default_factory=dict)  # file -> sha256
    meta: dict = field(default_factory=dict)  # file -> {template, has_injected_speeding}
    version: int = MANIFEST_VERSION

    def paths(self, split: str) -> list[Path]:
        if split not in self.splits:
            raise KeyError(f"unknown split {split!r}; have {sorted(self.splits)}")
        return [Path(self.root) / f for f in self.splits[split]]

    def load_split(self, split: str, verify: bool = True) -> list[Scenario]:
        out = []
        for f, p in zip(self.splits[split], self.paths(split)):
            if verify and file_sha256(p) != self.hashes[f]:
                raise ValueError(f"hash mismatch for {p}")
            out.append(load_scenario(p))
        return out

    def verify(self) -> bool:
        return all(file_sha256(Path(self.root) / f) == h for f, h in self.hashes.items())

    def save(self, path=None) -> Path:
        path = Path(path) if path else Path(self.root) / "manifest.json"
        d = asdict(self)
        d.pop("root")
        path.write_text(json.dumps(d, indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        d = json.loads(path.read_text())
        if d.get("version") != MANIFEST_VERSION:
            raise VersionError(f"unsupported manifest version {d.get('version')!r}")
        return cls(root=str(path.parent), **d)


def generate_dataset(cfg: GeneratorConfig, out_dir) -> DatasetManifest:
    """Generate ``cfg.num_scenarios`` scenarios; the last ``eval_fraction`` of indices form the eval split."""
    out = Path(out_dir)
    (out / "scenarios").mkdir(parents=True, exist_ok=True)
    n_eval = int(round(cfg.num_scenarios * cfg.eval_fraction))
    n_train = cfg.num_scenarios - n_eval
    splits: dict = {"train": [], "eval": []}
    hashes, meta = {}, {}
    for i in range(cfg.num_scenarios):
        scn = generate_scenario(i, cfg)
        rel = f"scenarios/{scn.scenario_id}.json"
        save_scenario(scn, out / rel)
        splits["train" if i < n_train else "eval"].append(rel)
        hashes[rel] = file_sha256(out / rel)
        meta[rel] = dict(scn.meta)
        if (i + 1) % 200 == 0:
            log.info("generated %d/%d scenarios", i + 1, cfg.num_scenarios)
    man = DatasetManifest(str(out), splits, cfg.digest(), asdict(cfg), hashes, meta)
    man.save()
    return man


# ---------------------------------------------------------------------------
# checkpoints


def _encode_array(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode_array(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").copy()


def save_checkpoint(path, model_config: dict, params: np.ndarray, provenance: dict | None = None) -> None:
    """JSON container; parameters as base64 little-endian float64 so reloads are bit-exact."""
    doc = {"version": CHECKPOINT_VERSION, "model_config": model_config, "dtype": "<f8",
           "num_params": int(params.size), "params": _encode_array(params),
           "provenance": provenance or {}}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[dict, np.ndarray, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {doc.get('version')!r}")
    params = _decode_array(doc["params"])
    if params.size != doc["num_params"]:
        raise ValueError(f"checkpoint holds {params.size} values, header says {doc['num_params']}")
    return doc["model_config"], params, doc.get("provenance", {})
