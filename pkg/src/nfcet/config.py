"""INI-style run configuration for the command-line tools.

A configuration file carries six sections that map onto the library
dataclasses: [scenario] -> Scenario, [priors] -> PriorParams,
[stage2] -> SscaSchedule plus the turbo-loop controls, and [grids],
[stage1], [beamforming], [sweep] -> small option groups.  Every key is
optional and falls back to the library default; unknown sections or keys
are rejected so typos cannot silently change a run.
"""

import configparser
import hashlib
from dataclasses import dataclass, field, fields

from .channel import Scenario
from .priors import PriorParams
from .spvbi import SscaSchedule

SECTIONS = ("scenario", "grids", "priors", "stage1", "stage2",
            "beamforming", "sweep")

# option groups that do not map onto an existing dataclass
GRID_KEYS = {"s": int, "n_f": int, "z_delta": float}
STAGE1_KEYS = {"max_paths": int, "refine_iters": int, "n_init": int}
STAGE2_EXTRA = {"n_turbo": int, "turbo_tol": float}
BEAM_KEYS = {"eps_v": float, "delta_n": int}
SWEEP_KEYS = {"snr_db": float, "snr_list": list, "p2_list": list,
              "trials": int, "t_frames": int}


@dataclass
class RunConfig:
    """Everything a CLI run needs besides the seed and output paths."""

    scenario: Scenario = field(default_factory=Scenario)
    priors: PriorParams = field(default_factory=PriorParams)
    sched: SscaSchedule = field(default_factory=SscaSchedule)
    grids: dict = field(default_factory=lambda: {"s": 3, "z_delta": 1.2})
    stage1: dict = field(default_factory=lambda: {
        "max_paths": 3, "refine_iters": 30, "n_init": 16})
    stage2_extra: dict = field(default_factory=lambda: {
        "n_turbo": 3, "turbo_tol": 0.01})
    beamforming: dict = field(default_factory=lambda: {
        "eps_v": 0.5, "delta_n": 1})
    sweep: dict = field(default_factory=lambda: {
        "snr_db": 10.0, "snr_list": [0.0, 10.0, 20.0],
        "p2_list": [4, 6, 8], "trials": 10, "t_frames": 10})

    def canonical_lines(self):
        """Deterministic key=value dump used for hashing and logging."""
        lines = []
        for name, obj in (("scenario", self.scenario),
                          ("priors", self.priors),
                          ("stage2", self.sched)):
            for f in fields(obj):
                lines.append(f"{name}.{f.name}={getattr(obj, f.name)!r}")
        for name, group in (("grids", self.grids),
                            ("stage1", self.stage1),
                            ("stage2", self.stage2_extra),
                            ("beamforming", self.beamforming),
                            ("sweep", self.sweep)):
            for key in sorted(group):
                lines.append(f"{name}.{key}={group[key]!r}")
        return lines

    def config_hash(self):
        text = "\n".join(self.canonical_lines())
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _convert(section, key, raw, kind):
    try:
        if kind is list:
            return [float(tok) if "." in tok or "e" in tok.lower()
                    else int(tok)
                    for tok in raw.replace(",", " ").split()]
        if kind is tuple:
            return tuple(float(tok) for tok in raw.replace(",", " ").split())
        if kind is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return kind(raw)
    except ValueError as exc:
        raise ValueError(f"[{section}] {key}: cannot parse {raw!r}") from exc


def _fill_dataclass(obj, section, items):
    known = {f.name: f.type for f in fields(obj)}
    types = {"int": int, "float": float, "tuple": tuple, "bool": bool}
    for key, raw in items:
        if key not in known:
            raise ValueError(f"unknown key {key!r} in section [{section}]")
        kind = types.get(known[key], type(getattr(obj, key)))
        setattr(obj, key, _convert(section, key, raw, kind))
    return obj


def _fill_group(group, table, section, items):
    for key, raw in items:
        if key not in table:
            raise ValueError(f"unknown key {key!r} in section [{section}]")
        group[key] = _convert(section, key, raw, table[key])
    return group


def load_config(path=None, text=None):
    """Parse an INI file (or literal text) into a RunConfig."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if text is not None:
        parser.read_string(text)
    elif path is not None:
        with open(path) as fh:
            parser.read_file(fh)
    for section in parser.sections():
        if section not in SECTIONS:
            raise ValueError(f"unknown section [{section}]")
    cfg = RunConfig()

    def items(section):
        return parser.items(section) if parser.has_section(section) else []

    _fill_dataclass(cfg.scenario, "scenario", items("scenario"))
    cfg.scenario.__post_init__()
    _fill_dataclass(cfg.priors, "priors", items("priors"))
    _fill_group(cfg.grids, GRID_KEYS, "grids", items("grids"))
    _fill_group(cfg.stage1, STAGE1_KEYS, "stage1", items("stage1"))
    sched_keys = {f.name: f for f in fields(cfg.sched)}
    for key, raw in items("stage2"):
        if key in sched_keys:
            kind = type(getattr(cfg.sched, key))
            setattr(cfg.sched, key, _convert("stage2", key, raw, kind))
        elif key in STAGE2_EXTRA:
            cfg.stage2_extra[key] = _convert("stage2", key, raw,
                                             STAGE2_EXTRA[key])
        else:
            raise ValueError(f"unknown key {key!r} in section [stage2]")
    _fill_group(cfg.beamforming, BEAM_KEYS, "beamforming",
                items("beamforming"))
    _fill_group(cfg.sweep, SWEEP_KEYS, "sweep", items("sweep"))
    return cfg
