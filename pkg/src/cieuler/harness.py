"""Run configuration, orchestration and the run manifest."""
from __future__ import annotations

import csv
import io as _io
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from . import iterate, verify
from .beltrami import geometric_coefficients
from .errors import CIError, ConfigError, ContractError, StageError
from .io import PHYSICAL, SPECTRAL, content_hash, encode
from .noise import NoiseSpectrum, TimeGrid, sample_ou_path, truncate_and_cutoff
from .params import (EnergyBounds, beta_cap, build_schedule, cutoff_gap_check, suggested_gamma, verify_ledger)
from .spectral import PeriodicGrid, to_physical

log = logging.getLogger(__name__)

DEFAULTS = {
    "params": {"a": 2, "b": 7, "gamma": None, "beta": None, "sigma": 1, "r": 2, "L": 1.0, "m": 10,
               "alpha": "1/1000", "M_bar": 1.0},
    "grid": {"N": 64, "dealias": "2/3"},
    "noise": {"s": 4.5, "c0": 0.1, "K": 4, "seed": 0, "members": 8},
    "run": {"mode": "desk", "Q": 1, "n_out": 4, "out_dir": "run", "osc_form": "structured", "keep_members": [0],
            "flow_N": None, "terms": False, "probe": True},
    "energy": {"K": None, "table": None},
}

MEMORY_BUDGET = 4 * 2 ** 30  # bytes of field storage allowed in proof mode


def _merge(base, over):
    out = json.loads(json.dumps(base))
    for k, v in (over or {}).items():
        if k not in out:
            raise ConfigError(f"unknown config block {k!r}")
        if not isinstance(v, dict):
            raise ConfigError(f"config block {k!r} must be an object")
        for kk, vv in v.items():
            if kk not in out[k]:
                raise ConfigError(f"unknown key {k}.{kk}")
            out[k][kk] = vv
    return out


@dataclass
class RunConfig:
    params: dict
    grid: dict
    noise: dict
    run: dict
    energy: dict

    @classmethod
    def from_dict(cls, d: Optional[dict] = None):
        m = _merge(DEFAULTS, d or {})
        cfg = cls(**m)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)

    def to_dict(self):
        return asdict(self)

    def canonical(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    def hash(self) -> str:
        return content_hash(self.canonical())

    def validate(self):
        mode = self.run["mode"]
        if mode not in ("desk", "proof"):
            raise ConfigError(f"run.mode must be desk or proof, got {mode!r}")
        if self.grid.get("dealias") != "2/3":
            raise ConfigError("only the 2/3 dealiasing rule is supported")
        N = self.grid["N"]
        if not isinstance(N, int) or N < 8 or N % 2:
            raise ConfigError("grid.N must be an even integer >= 8")
        if self.noise["members"] < 2:
            raise ConfigError("noise.members must be >= 2")
        if self.run["Q"] < 0:
            raise ConfigError("run.Q must be >= 0")
        if self.run["osc_form"] not in ("structured", "divergence"):
            raise ConfigError("run.osc_form must be structured or divergence")
        if self.energy["K"] is not None and self.energy["table"] is not None:
            raise ConfigError("energy: give either K or table")
        if mode == "proof":
            need = 8 * 2 * 20 * N ** 3 * self.noise["members"]
            if need > MEMORY_BUDGET:
                raise ConfigError(f"proof mode forbids field allocation of {need} bytes")

    def schedule(self):
        p = self.params
        b = int(p["b"])
        gamma = Fraction(p["gamma"]) if p["gamma"] is not None else suggested_gamma(b)
        beta = Fraction(p["beta"]) if p["beta"] is not None else beta_cap(b, Fraction(p["sigma"])) / 2
        gc = geometric_coefficients()
        cs = gc.cStarComputed
        cR = cs / 2
        floor = 6 * 48 * (2 * math.pi) ** 3 * float(p["L"]) ** 2 / cR
        K = self.energy_level(floor)
        lo, hi = K, K
        if self.energy["table"] is not None:
            vals = [float(e) for _, e in self.energy["table"]]
            lo, hi = min(vals), max(vals)
        sch = build_schedule(p["a"], b, beta, gamma, Fraction(p["sigma"]), Fraction(p["r"]), float(p["L"]), p["m"],
                             Fraction(p["alpha"]), cR, cs, EnergyBounds(hi, lo, 0.0), mode=self.run["mode"],
                             M_bar=float(p["M_bar"]))
        return sch

    def energy_level(self, floor):
        if self.energy["K"] is None and self.energy["table"] is None:
            return floor
        if self.energy["K"] is not None:
            return float(self.energy["K"])
        return min(float(e) for _, e in self.energy["table"])

    def energy_fn(self, floor):
        if self.energy["table"] is None:
            K = self.energy_level(floor)
            return lambda t: K
        ts = np.array([float(t) for t, _ in self.energy["table"]])
        es = np.array([float(e) for _, e in self.energy["table"]])
        return lambda t: float(np.interp(t, ts, es))


@dataclass
class RunManifest:
    config_hash: str
    seeds: dict
    artifacts: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    status: str = "ok"
    failed_stage: Optional[str] = None
    message: str = ""

    def add(self, out_dir: Path, name: str, data: bytes, kind: str, **meta):
        path = out_dir / name
        path.write_bytes(data)
        self.artifacts.append({"path": name, "kind": kind, "hash": content_hash(data), **meta})

    def hashes(self):
        return {a["path"]: a["hash"] for a in self.artifacts}

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        try:
            return cls(**json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot read manifest {path}: {exc}") from exc


def _csv_bytes(header, rows) -> bytes:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue().encode()


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, default=_jsonable).encode()


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, Fraction):
        return str(x)
    raise TypeError(type(x))


# -- stages ---------------------------------------------------------------------


class _Stage:
    def __init__(self, manifest, name):
        self.m, self.name = manifest, name

    def __enter__(self):
        self.t = time.perf_counter()
        log.info("stage %s", self.name)
        return self

    def __exit__(self, et, ev, tb):
        self.m.timings[self.name] = time.perf_counter() - self.t
        if ev is not None and not isinstance(ev, StageError):
            if isinstance(ev, ConfigError):
                return False
            if isinstance(ev, CIError):
                raise StageError(self.name, str(ev)) from ev
        return False


def step_config(schedule, cfg: RunConfig, q: int):
    N = cfg.grid["N"]
    gc = geometric_coefficients()
    lam_next = iterate.desk_lambda(N, gc.ds.n_star)
    lam_q = schedule.lam(q)
    ell = 1.0 / lam_q ** 2
    return iterate.StepConfig(lam=lam_next, ell=ell, dt=ell / 8, n_out=cfg.run["n_out"], N_flow=cfg.run["flow_N"],
                              osc_form=cfg.run["osc_form"], c_star=gc.cStarComputed)


def build_noise(cfg: RunConfig, schedule, scfg, grid, members=None, seed=None):
    """Cut-off noise for levels 0 and 1 of every member on the slices a step reads."""
    seed = cfg.noise["seed"] if seed is None else seed
    spec = NoiseSpectrum(s=cfg.noise["s"], c0=cfg.noise["c0"], K=cfg.noise["K"])
    n0 = scfg.history_needed() - 1
    n1 = scfg.n_out + 1
    tg = TimeGrid(n0 * scfg.dt, scfg.dt, n1 - n0)
    out = []
    for mbr in range(cfg.noise["members"] if members is None else members):
        path = sample_ou_path(spec, tg, seed, mbr)
        c0 = truncate_and_cutoff(path, 0, schedule, grid)
        # level 1 is only read on the output slices -1 .. n_out+1
        c1 = truncate_and_cutoff(path.tail(-1 - n0), 1, schedule, grid)
        out.append((path, c0, c1))
    return out, n0


def run_pipeline(cfg: RunConfig, out_dir=None, seed=None) -> RunManifest:
    """ledger -> noise -> steps -> verify; on a stage failure the partial manifest is saved and StageError raised."""
    out = Path(out_dir or cfg.run["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.noise["seed"] if seed is None else int(seed)
    M = cfg.noise["members"]
    manifest = RunManifest(cfg.hash(), {"noise": seed, "members": [[seed, m] for m in range(M)]})
    try:
        _run(cfg, out, seed, manifest)
    except StageError as exc:
        manifest.status = "failed"
        manifest.failed_stage = exc.stage
        manifest.message = str(exc)
        manifest.save(out / "manifest.json")
        raise
    manifest.save(out / "manifest.json")
    return manifest


def _run(cfg, out, seed, manifest):
    with _Stage(manifest, "ledger"):
        schedule = cfg.schedule()
        rep = verify_ledger(schedule)
        manifest.add(out, "ledger.csv", _csv_bytes(["id", "lhs", "rhs", "verdict", "source", "scale"], rep.csv_rows()),
                     "ledger")
        gaps = [[q, cutoff_gap_check(schedule, q)] for q in range(4)]
        manifest.add(out, "cutoff_gap.csv", _csv_bytes(["q", "gap_ok"], gaps), "ledger")
        if not rep.passed:
            raise StageError("ledger", f"ledger items failed: {sorted(rep.failed_ids())}")
    if cfg.run["mode"] == "proof":
        return
    grid = PeriodicGrid(cfg.grid["N"])
    floor = schedule.energy_floor()
    e = cfg.energy_fn(floor)
    Q = cfg.run["Q"]
    scfg = step_config(schedule, cfg, 0)
    with _Stage(manifest, "noise"):
        noise, n0 = build_noise(cfg, schedule, scfg, grid, seed=seed)
        rows = []
        for mbr, (path, c0, _) in enumerate(noise):
            for i, t in enumerate(path.times):
                rows.append([mbr, float(t), float(c0.c1[i]), float(c0.chi[i]), float(c0.chi[i] ** 2 * path.energy(c0.K)[i])])
        manifest.add(out, "noise.csv", _csv_bytes(["member", "t", "c1", "chi", "energy"], rows), "noise")
    states = [iterate.ColdStartState(c0, scfg.dt, n0, mbr) for mbr, (_, c0, _) in enumerate(noise)]
    keep = set(cfg.run["keep_members"])
    _dump_state(manifest, out, states, keep, 0, grid)
    norms_all = {}
    step_diag = []
    energy_terms = []
    for q in range(Q):
        with _Stage(manifest, f"step{q}"):
            if q >= 1:
                raise StageError(f"step{q}", "insufficient history: level-q slices do not reach back "
                                             f"{scfg.substeps * 2} slices before the output window")
            zeta, info = iterate.energy_gap(states, e, q, schedule, list(range(scfg.history_needed(), scfg.n_out + 2)))
            new = []
            for mbr, st in enumerate(states):
                res = iterate.step(st, zeta, noise[mbr][2], -1, scfg, diagnostics=mbr in keep,
                                   keep_terms=cfg.run["terms"] and mbr in keep)
                for name, arr in (res.terms or {}).items():
                    manifest.add(out, f"term_q{q + 1}_m{mbr}_{name}.cief", encode(arr, 2, SPECTRAL), "term",
                                 q=q + 1, member=mbr, field=name, layout="spectral")
                new.append(res.state)
                step_diag.append({"q": q, "member": mbr, **{k: v for k, v in res.diagnostics.items()
                                                            if k not in ("residual",)}})
                energy_terms.append(res.energy_terms)
                if hasattr(st, "_cache"):
                    st._cache.clear()
            manifest.add(out, f"step{q}.json", _json_bytes(step_diag), "step", q=q)
        with _Stage(manifest, f"verify{q}"):
            slices = scfg.residual_slices()
            if q not in norms_all:
                norms_all[q] = [verify.state_norms(st, slices) for st in states]
            norms_all[q + 1] = [verify.state_norms(s1, slices, previous=s0) for s0, s1 in zip(states, new)]
            for qq in (q, q + 1):
                amp = max((d["amp_max"] for d in step_diag if d["q"] == qq), default=float("nan"))
                ir = verify.inductive_report(norms_all[qq], schedule, qq, e(0.0), amplitude_sup=amp)
                manifest.add(out, f"inductive_q{qq}.csv",
                             _csv_bytes(["q", "id", "measured", "reference", "mode", "passed", "halfwidth", "note"],
                                        ir.rows()), "inductive", q=qq, passed=ir.passed, breaches=ir.breaches)
            manifest.add(out, f"norms_q{q}.json", _json_bytes(norms_all[q]), "norms", q=q)
            manifest.add(out, f"norms_q{q + 1}.json", _json_bytes(norms_all[q + 1]), "norms", q=q + 1)
            zeta_by_n = {n: 3 * iterate.TWO_PI_CUBED * zeta[n] for n in slices}
            for et in energy_terms:
                for n in et:
                    et[n]["three_zeta"] = zeta_by_n[n]
            erep = verify.energy_check(energy_terms, [(seed, seed)] * len(energy_terms),
                                       lambda n: e(n * scfg.dt), schedule, q)
            manifest.add(out, f"energy_q{q}.csv", _csv_bytes(["q", "term", "mean", "se"], erep.rows()), "energy",
                         q=q, passed=erep.passed)
            terms_rows = [[d["q"], d["member"], k, v] for d in step_diag for k, v in d["term_norms"].items()]
            manifest.add(out, f"reynolds_terms_q{q}.csv", _csv_bytes(["q", "member", "term", "l2"], terms_rows),
                         "reynolds", q=q)
        states = new
        _dump_state(manifest, out, states, keep, q + 1, grid)
    if cfg.run["probe"]:
        with _Stage(manifest, "probe"):
            gc = geometric_coefficients()
            ns = gc.ds.n_star
            lams = [8 * ns, 16 * ns, 32 * ns, 64 * ns]
            phi = verify.SeparableMap((0.2, 0.15, 0.1), (0.3, 1.1, 0.7))
            amp = [verify.power_amplitude(3), verify.power_amplitude(3), lambda x: np.ones_like(x)]
            xi = gc.ds.as_float(0)[0]
            pr = verify.stationary_phase_probe(amp, phi, xi, lams, 3)
            manifest.add(out, "decay.csv", _csv_bytes(["lambda", "abs_integral"], list(zip(pr["lams"], pr["values"]))),
                         "decay", slope=pr["slope"], bound=pr["bound"])


def _dump_state(manifest, out, states, keep, q, grid):
    for mbr in sorted(keep):
        if mbr >= len(states):
            continue
        s = states[mbr].slice(0)
        for name, arr, rank in (("v", s.v, 1), ("R", s.R, 2), ("p", s.p, 0), ("z", s.z, 1)):
            manifest.add(out, f"state_q{q}_m{mbr}_{name}.cief", encode(arr, rank, SPECTRAL), "state", q=q,
                         member=mbr, field=name, layout="spectral")


# -- plot data --------------------------------------------------------------------


class NothingToEmit(Exception):
    pass


def emit_plots(manifest_path, out_dir=None):
    """Plot-ready CSVs from a run manifest; raises NothingToEmit when it lists no reports."""
    mpath = Path(manifest_path)
    man = RunManifest.load(mpath)
    base = mpath.parent
    out = Path(out_dir) if out_dir else base / "plots"
    reports = [a for a in man.artifacts if a["kind"] in ("norms", "reynolds", "decay")]
    if not reports:
        raise NothingToEmit("manifest lists no reports")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    rows = []
    for a in sorted((a for a in reports if a["kind"] == "norms"), key=lambda a: a["q"]):
        norms = json.loads((base / a["path"]).read_text())
        for key in ("v_c0", "v_c1", "R_c0", "R_l1", "energy"):
            vals = np.array([n[key] for n in norms], float)
            rows.append([a["q"], key, float(vals.max()), float(vals.mean())])
    if rows:
        (out / "norms_vs_q.csv").write_bytes(_csv_bytes(["q", "norm", "max", "mean"], rows))
        written.append("norms_vs_q.csv")
    for a in reports:
        if a["kind"] in ("reynolds", "decay"):
            name = "decay_scatter.csv" if a["kind"] == "decay" else a["path"]
            (out / name).write_bytes((base / a["path"]).read_bytes())
            written.append(name)
    return written
