import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from core.allocator import AllocatorParams
from core.baselines import make_mode
from core.dram import DramGeometry, GlobalRowTable, TransformConfig, build_geometry, build_grt, build_transforms
from core.errors import ConfigError
from core.workload import MixSpec, load_mix

logger = logging.getLogger(__name__)

SEED_ENV = "ROWGUARD_SEED"
TRANSFORM_KEYS = ("mode", "scramble", "scramble_taps", "mirror_pairs", "inversion_mask")
ALLOCATOR_KEYS = tuple(f.name for f in fields(AllocatorParams))
SECTIONS = ("dram", "allocator", "workload", "output", "verify", "seed")


@dataclass(frozen=True)
class WorkloadSection:
    trace: Optional[str] = None
    spec: Optional[str] = None
    mix: Optional[Dict] = None


@dataclass(frozen=True)
class OutputSection:
    out_dir: str = "runs"
    sample_interval: int = 1000
    pdf: Optional[str] = None


@dataclass(frozen=True)
class VerifySection:
    verify_every: int = 0
    blast_radius: int = 2
    report: Optional[str] = None


@dataclass(frozen=True)
class System:
    geo: DramGeometry
    transforms: TransformConfig
    grt: GlobalRowTable
    params: AllocatorParams

    @property
    def subarray_rows(self) -> Optional[int]:
        return self.params.chunk_rows if self.params.mode == "siloz" else None


@dataclass(frozen=True)
class RunConfig:
    dram: Dict[str, Any] = field(default_factory=dict)
    allocator: Dict[str, Any] = field(default_factory=dict)
    workload: WorkloadSection = field(default_factory=WorkloadSection)
    output: OutputSection = field(default_factory=OutputSection)
    verify: VerifySection = field(default_factory=VerifySection)
    seed: int = 0
    explicit_seed: bool = False

    @property
    def mode(self) -> str:
        return self.allocator.get("mode", "aegis")

    def geometry(self) -> DramGeometry:
        return build_geometry({k: v for k, v in self.dram.items() if k not in TRANSFORM_KEYS})

    def build(self, grt: Optional[GlobalRowTable] = None) -> System:
        """Geometry, transforms, GRT and allocator parameters for this run."""
        geo = self.geometry()
        transforms = build_transforms({k: v for k, v in self.dram.items() if k in TRANSFORM_KEYS}, geo)
        if grt is None or grt.transforms != transforms or grt.inverse.size != geo.total_global_rows:
            grt = build_grt(geo, transforms)
        params = make_mode(self.mode, geo, grt)
        explicit = {k: v for k, v in self.allocator.items() if k != "mode"}
        if explicit:
            params = replace(params, **explicit)
        return System(geo, transforms, grt, params.validate(grt))

    def mix(self) -> MixSpec:
        if self.workload.spec:
            spec = load_mix(self.workload.spec)
        else:
            spec = MixSpec.from_dict(self.workload.mix or {}, prefix="workload.mix")
        return replace(spec, seed=self.seed) if self.explicit_seed else spec

    def to_dict(self) -> Dict:
        return {
            "dram": dict(self.dram),
            "allocator": dict(self.allocator),
            "workload": vars(self.workload).copy(),
            "output": vars(self.output).copy(),
            "verify": vars(self.verify).copy(),
            "seed": self.seed,
        }


def _section(cls, data: Any, name: str):
    if data is None:
        return cls()
    if not isinstance(data, Mapping):
        raise ConfigError(name, "expected an object")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field")
    return cls(**data)


def _set_dotted(raw: Dict, dotted: str, value: Any):
    head, _, rest = dotted.partition(".")
    if not rest:
        raw[head] = value
        return
    node = raw.setdefault(head, {})
    if not isinstance(node, dict):
        raise ConfigError(head, "expected an object")
    _set_dotted(node, rest, value)


def _check_keys(data: Mapping, allowed, name: str):
    for key in data:
        if key not in allowed:
            raise ConfigError(f"{name}.{key}", "unknown field")


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """
    Read a RunConfig from JSON, then apply dotted-key overrides
    (e.g. {"allocator.chunk_rows": 32}); overrides set to None are ignored.
    The seed falls back to $ROWGUARD_SEED, then 0; only a seed given in one
    of those places overrides the seed stored in a mix file.
    """
    environ = os.environ if environ is None else environ
    raw: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError("config", f"file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"{path}: invalid JSON ({e})") from e
        if not isinstance(raw, dict):
            raise ConfigError("config", "top level must be an object")
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(key, "unknown section")
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(raw, dotted, value)

    seed = raw.get("seed")
    if seed is None and environ.get(SEED_ENV):
        try:
            seed = int(environ[SEED_ENV])
        except ValueError:
            raise ConfigError("seed", f"${SEED_ENV} is not an integer: {environ[SEED_ENV]!r}") from None
    explicit_seed = seed is not None
    if seed is None:
        seed = 0
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", "must be a non-negative integer")

    dram = dict(raw.get("dram") or {})
    allocator = dict(raw.get("allocator") or {})
    _check_keys(allocator, ALLOCATOR_KEYS, "allocator")

    config = RunConfig(
        dram=dram,
        allocator=allocator,
        workload=_section(WorkloadSection, raw.get("workload"), "workload"),
        output=_section(OutputSection, raw.get("output"), "output"),
        verify=_section(VerifySection, raw.get("verify"), "verify"),
        seed=seed,
        explicit_seed=explicit_seed,
    )
    for name in ("trace", "spec"):
        ref = getattr(config.workload, name)
        if ref and not Path(ref).exists():
            raise ConfigError(f"workload.{name}", f"file not found: {ref}")
    if config.output.sample_interval <= 0:
        raise ConfigError("output.sample_interval", "must be positive")
    if config.verify.verify_every < 0:
        raise ConfigError("verify.verify_every", "must be >= 0")
    if config.verify.blast_radius < 1:
        raise ConfigError("verify.blast_radius", "must be >= 1")
    logger.debug("config loaded: %s", config.to_dict())
    return config
